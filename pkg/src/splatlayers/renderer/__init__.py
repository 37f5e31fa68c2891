"""Differentiable tile-based Gaussian splatting on the CPU."""
from .camera import Camera, look_at, orbit_cameras
from .core import (
    MODES,
    RasterContext,
    RenderOutput,
    one_hot_labels,
    rasterize,
    render,
    render_reference,
)
from .gaussians import GaussianBatch
from .projection import DILATION, NEAR, project
from .raster import SIGMA_CAP, TILE, set_threads

__all__ = [
    "DILATION",
    "MODES",
    "NEAR",
    "SIGMA_CAP",
    "TILE",
    "Camera",
    "GaussianBatch",
    "RasterContext",
    "RenderOutput",
    "look_at",
    "one_hot_labels",
    "orbit_cameras",
    "project",
    "rasterize",
    "render",
    "render_reference",
    "set_threads",
]
