"""Instance-level object repositioning for a toy text-conditioned diffusion
model, driven by cross-attention position energies and activation
preservation energies injected into the sampling loop."""

__version__ = "0.1.0"

from .errors import (
    AmbiguousMatchError,
    CaptureError,
    EmptyMaskError,
    GrammarError,
    GuidanceError,
    InstEditError,
    NoMatchError,
    RemoteError,
    SessionError,
)
from .geometry import BoundingBox, GridMask, Shift, mask_area, rasterize_box, shift_mask

__all__ = [
    "AmbiguousMatchError",
    "BoundingBox",
    "CaptureError",
    "EmptyMaskError",
    "GrammarError",
    "GridMask",
    "GuidanceError",
    "InstEditError",
    "NoMatchError",
    "RemoteError",
    "SessionError",
    "Shift",
    "mask_area",
    "rasterize_box",
    "shift_mask",
    "__version__",
]
