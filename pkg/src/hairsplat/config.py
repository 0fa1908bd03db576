"""Key-value run configuration: ``section.field value`` lines for render, weights and schedule."""

from __future__ import annotations

import dataclasses

from .errors import InvalidInputError
from .io import read_kv
from .losses import STAGE_WEIGHTS, LossWeights
from .optim import FitSchedule
from .render import RenderConfig


@dataclasses.dataclass(frozen=True)
class RunConfig:
    render: RenderConfig = RenderConfig()
    schedule: FitSchedule = FitSchedule()
    seed: int = 0


def _convert(field: dataclasses.Field, current, values: list[str], key: str):
    kind = type(current)
    try:
        if field.name == "upsample":
            if len(values) == 1 and values[0].lower() in ("none", "off", "0"):
                return None
            if len(values) != 2:
                raise ValueError
            return (int(values[0]), int(values[1]))
        if len(values) != 1:
            raise ValueError
        (v,) = values
        if kind is bool:
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(v)
        return float(v)
    except ValueError:
        raise InvalidInputError(f"bad value for {key}: {' '.join(values)}") from None


def _apply(obj, section: str, items: dict):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for name, values in items.items():
        if name not in fields or name == "weights":
            raise InvalidInputError(f"unknown config key {section}.{name}")
        updates[name] = _convert(fields[name], getattr(obj, name), values, f"{section}.{name}")
    try:
        return dataclasses.replace(obj, **updates)
    except ValueError as exc:
        raise InvalidInputError(str(exc)) from None


def parse_config(kv: dict, base: RunConfig = RunConfig()) -> RunConfig:
    """Build a :class:`RunConfig` from ``{key: [values]}``; unknown keys are rejected.

    ``weights.preset`` selects a stage preset (coarse, fine, joint, hybrid,
    inversion) before individual ``weights.*`` overrides are applied.
    """
    sections: dict[str, dict] = {"render": {}, "weights": {}, "schedule": {}}
    seed = base.seed
    for key, values in kv.items():
        if key == "seed":
            seed = int(values[0])
            continue
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise InvalidInputError(f"unknown config key {key}")
        sections[section][name] = values
    render = _apply(base.render, "render", sections["render"])
    weights = base.schedule.weights
    preset = sections["weights"].pop("preset", None)
    if preset is not None:
        if preset[0] not in STAGE_WEIGHTS:
            raise InvalidInputError(f"unknown weight preset {preset[0]}")
        weights = STAGE_WEIGHTS[preset[0]]
    weights = _apply(weights, "weights", sections["weights"])
    schedule = _apply(base.schedule, "schedule", sections["schedule"])
    schedule = dataclasses.replace(schedule, weights=weights)
    return RunConfig(render=render, schedule=schedule, seed=seed)


def load_config(path=None, overrides=(), base: RunConfig = RunConfig()) -> RunConfig:
    kv = dict(read_kv(path)) if path else {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidInputError(f"override {item!r} is not key=value")
        kv[key.strip()] = value.split()
    return parse_config(kv, base)


def config_items(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed}
    for f in dataclasses.fields(cfg.render):
        out[f"render.{f.name}"] = getattr(cfg.render, f.name)
    for f in dataclasses.fields(cfg.schedule.weights):
        out[f"weights.{f.name}"] = getattr(cfg.schedule.weights, f.name)
    for f in dataclasses.fields(cfg.schedule):
        if f.name != "weights":
            val = getattr(cfg.schedule, f.name)
            out[f"schedule.{f.name}"] = "none" if val is None else val
    return out
