"""Layered UV latent plane, the two shared convolutional decoders, and
per-seed Gaussian extraction by bilinear lookup."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .renderer.gaussians import GaussianBatch
from .template import ATLAS_RES, N_LAYERS, SeedSet
from .tensor_core import ShapeError, bilinear_sample

Tensor = torch.Tensor

PLANE_CHANNELS = 12
GEOMETRY_CHANNELS = 6
HIDDEN = 32
MAX_OFFSET = 0.1  # meters
ROTATION_RANGE = math.pi / 2  # residual axis-angle spans (-pi/4, pi/4) per axis

# attribute name -> (decoder, channels)
HEADS = {"offset": ("dg", 3), "opacity": ("dg", 1), "color": ("dt", 3), "rotation": ("dt", 3), "scale": ("dt", 3)}
ATTRIBUTES = tuple(HEADS)
SMALL_INIT_HEADS = ("offset", "rotation", "scale")


def plane_shape(res: int = ATLAS_RES) -> tuple[int, int, int]:
    return (PLANE_CHANNELS, res, N_LAYERS * res)


def concat_layers(layers) -> Tensor:
    """Three (12, R, R) layers -> (12, R, 3R); layer k owns columns [kR, (k+1)R)."""
    if len(layers) != N_LAYERS:
        raise ShapeError(f"expected {N_LAYERS} layers, got {len(layers)}")
    ref = tuple(layers[0].shape)
    if len(ref) != 3 or ref[1] != ref[2]:
        raise ShapeError(f"layer must be (C, R, R), got {ref}")
    for layer in layers:
        if tuple(layer.shape) != ref:
            raise ShapeError(f"layer shapes differ: {tuple(layer.shape)} vs {ref}")
    return torch.cat(list(layers), dim=-1)


def split_layers(plane: Tensor) -> list[Tensor]:
    if plane.ndim != 3 or plane.shape[2] != N_LAYERS * plane.shape[1]:
        raise ShapeError(f"plane must be (C, R, {N_LAYERS}R), got {tuple(plane.shape)}")
    r = plane.shape[1]
    return [plane[:, :, k * r : (k + 1) * r] for k in range(N_LAYERS)]


def new_plane(rng: np.random.Generator, std: float = 0.01, res: int = ATLAS_RES) -> Tensor:
    return torch.from_numpy(rng.normal(0.0, std, plane_shape(res)).astype(np.float32))


class _Branch(nn.Module):
    def __init__(self, in_ch: int, heads: dict[str, int]):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, HIDDEN, 3, padding=1)
        self.norm = nn.BatchNorm2d(HIDDEN)
        self.heads = nn.ModuleDict({k: nn.Conv2d(HIDDEN, c, 3, padding=1) for k, c in heads.items()})

    def forward(self, x: Tensor) -> dict[str, Tensor]:
        h = nn.functional.silu(self.norm(self.conv(x)))
        return {k: head(h) for k, head in self.heads.items()}


class Decoders(nn.Module):
    """Geometry decoder ``dg`` (offset, opacity) and texture decoder ``dt``
    (color, rotation, scale) shared by every subject and layer."""

    def __init__(self, seed: int = 0, head_init: str = "symmetric"):
        super().__init__()
        if head_init not in ("symmetric", "as_written"):
            raise ValueError(f"head_init must be 'symmetric' or 'as_written', got {head_init!r}")
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.dg = _Branch(GEOMETRY_CHANNELS, {k: c for k, (d, c) in HEADS.items() if d == "dg"})
            self.dt = _Branch(PLANE_CHANNELS - GEOMETRY_CHANNELS, {k: c for k, (d, c) in HEADS.items() if d == "dt"})
        hi = 1e-1 if head_init == "as_written" else 1e-5
        with torch.no_grad():
            for name in SMALL_INIT_HEADS:
                conv = self._head(name)
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * (hi + 1e-5) - 1e-5)
            for name in ATTRIBUTES:
                self._head(name).bias.zero_()
        self.head_init = head_init

    def _head(self, name: str) -> nn.Conv2d:
        return getattr(self, HEADS[name][0]).heads[name]

    def freeze_statistics(self, frozen: bool = True) -> None:
        """Switch batch norm between batch statistics (warm-up) and frozen
        running statistics."""
        for branch in (self.dg, self.dt):
            branch.norm.train(not frozen)

    def forward(self, layers: Tensor) -> dict[str, Tensor]:
        """(B, 12, R, R) normalized layers -> raw head outputs."""
        out = self.dg(layers[:, :GEOMETRY_CHANNELS])
        out.update(self.dt(layers[:, GEOMETRY_CHANNELS:]))
        return out


@dataclass
class AttributeMaps:
    """Per-layer maps, each (3, C, R, R); index 0 is the body layer."""

    offset: Tensor
    opacity: Tensor
    color: Tensor
    rotation: Tensor
    scale: Tensor

    def stacked(self) -> Tensor:
        """(3, 13, R, R) with channels in ``ATTRIBUTES`` order."""
        return torch.cat([getattr(self, k) for k in ATTRIBUTES], dim=1)


def decode(plane: Tensor, decoders: Decoders) -> AttributeMaps:
    if plane.ndim != 3 or plane.shape[0] != PLANE_CHANNELS or plane.shape[2] != N_LAYERS * plane.shape[1]:
        raise ShapeError(
            f"plane must be ({PLANE_CHANNELS}, R, {N_LAYERS}R), got {tuple(plane.shape)}"
        )
    layers = torch.stack(split_layers(torch.tanh(plane)))
    raw = decoders(layers)
    return AttributeMaps(
        offset=raw["offset"],
        opacity=torch.sigmoid(raw["opacity"]),
        color=torch.sigmoid(raw["color"]),
        rotation=torch.sigmoid(raw["rotation"]),
        scale=torch.sigmoid(raw["scale"]),
    )


def sample_attributes(maps: AttributeMaps, seeds: SeedSet) -> dict[str, Tensor]:
    """Bilinear lookup of every attribute at each seed's uv in its own layer."""
    stacked = maps.stacked()
    out = stacked.new_empty((len(seeds), stacked.shape[1]))
    uv = torch.as_tensor(seeds.uv, dtype=stacked.dtype)
    rows = []
    for k in range(stacked.shape[0]):
        idx = np.flatnonzero(seeds.layer == k)
        if len(idx):
            rows.append((idx, bilinear_sample(stacked[k], uv[idx])))
    order = np.concatenate([i for i, _ in rows]) if rows else np.zeros(0, np.int64)
    values = torch.cat([v for _, v in rows]) if rows else out
    out = values[torch.as_tensor(np.argsort(order, kind="stable"))]
    res, col = {}, 0
    for name in ATTRIBUTES:
        c = HEADS[name][1]
        res[name] = out[:, col : col + c]
        col += c
    return res


def axis_angle_to_matrix(v: Tensor) -> Tensor:
    """Differentiable Rodrigues map for (N, 3) axis-angle vectors."""
    theta2 = (v * v).sum(-1, keepdim=True)
    small = theta2 < 1e-12
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = theta2_safe.sqrt()
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / theta2_safe)
    x, y, z = v.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1).reshape(-1, 3, 3)
    eye = torch.eye(3, dtype=v.dtype).expand_as(k)
    return eye + a[..., None] * k + b[..., None] * (k @ k)


def attributes_to_gaussians(attrs: dict[str, Tensor], seeds: SeedSet, max_offset: float = MAX_OFFSET) -> GaussianBatch:
    dt = attrs["offset"].dtype
    mu0 = torch.as_tensor(seeds.mu0, dtype=dt)
    rot0 = torch.as_tensor(seeds.rot0, dtype=dt)
    s0 = torch.as_tensor(seeds.scale0, dtype=dt)
    residual = axis_angle_to_matrix((attrs["rotation"] - 0.5) * ROTATION_RANGE)
    return GaussianBatch(
        means=mu0 + max_offset * attrs["offset"],
        rotations=rot0 @ residual,
        scales=s0 * (2.0 * attrs["scale"]),
        opacities=attrs["opacity"][:, 0],
        colors=attrs["color"],
        labels=seeds.label,
    )


def extract_gaussians(maps: AttributeMaps, seeds: SeedSet, max_offset: float = MAX_OFFSET) -> GaussianBatch:
    return attributes_to_gaussians(sample_attributes(maps, seeds), seeds, max_offset)


__all__ = [
    "ATTRIBUTES",
    "MAX_OFFSET",
    "PLANE_CHANNELS",
    "AttributeMaps",
    "Decoders",
    "attributes_to_gaussians",
    "axis_angle_to_matrix",
    "concat_layers",
    "decode",
    "extract_gaussians",
    "new_plane",
    "plane_shape",
    "sample_attributes",
    "split_layers",
]
