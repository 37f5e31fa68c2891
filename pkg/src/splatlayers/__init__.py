"""Layered UV Gaussian avatars on the CPU.

A parametric body drives five garment and body templates whose Gaussians are
decoded from a shared three-layer UV latent plane, rendered by a differentiable
tile-based splatting rasterizer, fitted to multi-view images, and modelled by a
small v-prediction diffusion prior.
"""
from .body_model import BodyModel, BodyParams, make_toy_model
from .diffusion import DiffusionPrior, Schedule, ToyDenoiser
from .feature_plane import Decoders
from .pipeline import (
    AvatarFitter,
    AvatarInstance,
    FitConfig,
    Fitter,
    fit,
    transfer_component,
)
from .renderer import Camera, GaussianBatch, render, render_reference
from .template import LABELS, build_layered_template

__version__ = "0.1.0"

__all__ = [
    "LABELS",
    "AvatarFitter",
    "AvatarInstance",
    "BodyModel",
    "BodyParams",
    "Camera",
    "Decoders",
    "DiffusionPrior",
    "FitConfig",
    "Fitter",
    "GaussianBatch",
    "Schedule",
    "ToyDenoiser",
    "build_layered_template",
    "fit",
    "make_toy_model",
    "render",
    "render_reference",
    "transfer_component",
]
