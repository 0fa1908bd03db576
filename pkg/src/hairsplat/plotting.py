"""Matplotlib figures for fit reports and render comparisons (Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import hsv_to_rgb  # noqa: E402


def direction_to_rgb(direction, weight=None) -> np.ndarray:
    """Undirected 2D directions as hue (angle mod pi), brightness from magnitude or ``weight``."""
    direction = np.asarray(direction, dtype=np.float64)
    angle = np.mod(np.arctan2(direction[..., 1], direction[..., 0]), np.pi)
    mag = np.linalg.norm(direction, axis=-1) if weight is None else np.asarray(weight, dtype=np.float64)
    hsv = np.stack([angle / np.pi, np.ones_like(angle), np.clip(mag, 0, 1)], axis=-1)
    return hsv_to_rgb(hsv)


def save_direction_png(path, direction, weight=None) -> None:
    plt.imsave(path, direction_to_rgb(direction, weight))


def plot_loss_curves(report, path, title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = report.losses("step")
    for key in ("total", "seg", "dirmap", "depth", "pen"):
        vals = report.losses(key)
        if np.any(vals > 0):
            ax.semilogy(steps, np.maximum(vals, 1e-12), label=key, lw=1.2 if key == "total" else 0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_render_comparison(render, target, path, title: str | None = None) -> None:
    """Silhouette and direction maps of a render next to its targets."""
    fig, axes = plt.subplots(2, 2, figsize=(6, 6))
    axes[0, 0].imshow(render.silhouette, cmap="gray", vmin=0, vmax=1)
    axes[0, 0].set_title("rendered silhouette", fontsize=9)
    axes[0, 1].imshow(target.silhouette, cmap="gray", vmin=0, vmax=1)
    axes[0, 1].set_title("target silhouette", fontsize=9)
    axes[1, 0].imshow(direction_to_rgb(render.direction, render.silhouette))
    axes[1, 0].set_title("rendered direction", fontsize=9)
    axes[1, 1].imshow(direction_to_rgb(target.direction, target.silhouette))
    axes[1, 1].set_title("target direction", fontsize=9)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_spectrum(basis, path) -> None:
    """Explained stddev per principal component."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(np.arange(basis.num_components), np.maximum(basis.stddev, 1e-16), marker=".", lw=0.8)
    ax.set_xlabel("component")
    ax.set_ylabel("stddev")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
