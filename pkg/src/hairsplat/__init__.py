"""Strand-based hair geometry toolkit.

Frequency-domain PCA strand codec, segment-constrained Gaussian splat
rendering with analytic gradients, and hair-map fitting to image targets.
"""

from .codec import StrandBasis, decode_strand, encode_strand, fit_basis
from .errors import (
    DegenerateInputError,
    DivergenceError,
    HairsplatError,
    InvalidInputError,
    ShapeError,
    StateError,
    UnderdeterminedError,
)
from .hairmap import HairMap, PcaHairMap, decode_map, root_grid
from .optim import FitSchedule, fit_hairmap
from .render import RenderConfig, build_splats, rasterize, rasterize_backward
from .scalp import CameraModel, HeadModel

__version__ = "0.1.0"
