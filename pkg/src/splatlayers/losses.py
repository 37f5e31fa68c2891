"""Fitting objective: image reconstruction, body constraints, regularizers.

Every image term is a per-pixel mean (masked sums are divided by the full
pixel-channel count) so weights do not depend on resolution.
"""
from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .feature_plane import AttributeMaps
from .renderer.core import RenderOutput
from .template import LABELS
from .tensor_core import ShapeError, huber

log = logging.getLogger(__name__)
Tensor = torch.Tensor

HUBER_DELTA = 0.1
DEFAULT_SKIN = (0.8, 0.6, 0.5)
EXTERIOR = ("top", "bottom", "hair", "shoes")
MASK_SCOPES = ("others", "body_occluded", "all")


@dataclass
class LossWeights:
    color: float = 18.0
    mask: float = 9.0
    per: float = 0.05
    seg: float = 9.0
    maskin: float = 5.0
    skin: float = 0.5
    offset: float = 5.0
    smooth: float = 0.5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ViewTruth:
    """Ground truth for one view; images are (H, W[, C]) float tensors."""

    rgb: Tensor
    fg: Tensor
    components: dict[str, Tensor]  # label -> (H, W) silhouette mask
    segmentation: Tensor  # (H, W, 5) one-hot, zeros on background

    def __post_init__(self):
        h, w = self.fg.shape
        if tuple(self.rgb.shape) != (h, w, 3):
            raise ShapeError(f"rgb {tuple(self.rgb.shape)} does not match mask {(h, w)}")
        if tuple(self.segmentation.shape) != (h, w, len(LABELS)):
            raise ShapeError(f"segmentation {tuple(self.segmentation.shape)} must be {(h, w, len(LABELS))}")
        for k, m in self.components.items():
            if tuple(m.shape) != (h, w):
                raise ShapeError(f"component mask {k} has shape {tuple(m.shape)}, expected {(h, w)}")


def _masked_huber(pred: Tensor, target: Tensor, mask: Tensor | None, delta: float) -> Tensor:
    err = huber(pred, target, delta)
    if mask is not None:
        err = err * (mask[..., None] if err.ndim == mask.ndim + 1 else mask)
    return err.mean()


def recon_loss(
    full: RenderOutput,
    components: Mapping[str, RenderOutput],
    segmentation: Tensor,
    truth: ViewTruth,
    weights: LossWeights,
    delta: float = HUBER_DELTA,
    perceptual: Callable[[Tensor, Tensor], Tensor] | None = None,
    mask_scope: str = "others",
) -> tuple[Tensor, dict[str, Tensor]]:
    """Reconstruction terms on the joint render and on each component render.

    ``mask_scope`` picks the pixels where a component's silhouette is compared
    with its mask: ``"all"`` uses every pixel; ``"body_occluded"`` skips, for
    the body only, pixels covered by exterior components; ``"others"`` skips,
    for every component, pixels covered by any other component.
    """
    if mask_scope not in MASK_SCOPES:
        raise ValueError(f"mask_scope must be one of {MASK_SCOPES}, got {mask_scope!r}")
    missing = [k for k in truth.components if k not in components]
    if missing:
        raise ValueError(f"missing component renders for {missing}")
    parts = {
        "color": weights.color * _masked_huber(full.color, truth.rgb, None, delta),
        "mask": weights.mask * _masked_huber(full.alpha, truth.fg, None, delta),
    }
    comp_color = full.alpha.new_zeros(())
    comp_mask = full.alpha.new_zeros(())
    for label, m in truth.components.items():
        r = components[label]
        comp_color = comp_color + _masked_huber(r.color, truth.rgb, m, delta)
        if mask_scope == "others":
            # pixels covered by other components are unknown for this one
            known = torch.clamp(m + (1.0 - truth.fg), max=1.0)
        elif mask_scope == "body_occluded" and label == "body":
            known = 1.0 - occluded_mask(truth.components, truth.fg)
        else:
            known = None
        comp_mask = comp_mask + _masked_huber(r.alpha, m, known, delta)
    parts["comp_color"] = weights.color * comp_color
    parts["comp_mask"] = weights.mask * comp_mask
    parts["seg"] = weights.seg * _masked_huber(segmentation, truth.segmentation, None, delta)
    if perceptual is not None and weights.per > 0:
        parts["per"] = weights.per * perceptual(full.color, truth.rgb)
    else:
        parts["per"] = full.alpha.new_zeros(())
    return sum(parts.values()), parts


def maskin_loss(body_silhouette: Tensor, fg: Tensor, weight: float = 5.0) -> Tensor:
    """Penalize body coverage outside the foreground."""
    if body_silhouette.shape != fg.shape:
        raise ShapeError(
            f"silhouette {tuple(body_silhouette.shape)} and mask {tuple(fg.shape)} differ"
        )
    return weight * torch.relu(body_silhouette - fg).mean()


def occluded_mask(components: Mapping[str, Tensor], fg: Tensor) -> Tensor:
    """Foreground pixels covered by any exterior component."""
    out = torch.zeros_like(fg)
    for label in EXTERIOR:
        if label in components:
            out = torch.maximum(out, components[label])
    return out * fg


def skin_color(rgb: Tensor, hand_silhouette: Tensor, default=DEFAULT_SKIN) -> Tensor:
    sel = hand_silhouette > 0.5
    if not bool(sel.any()):
        log.warning("no hand pixels visible; using the default skin color %s", default)
        return torch.as_tensor(default, dtype=rgb.dtype)
    return rgb[sel].mean(0)


def skin_loss(
    body_rgb: Tensor, occluded: Tensor, c_skin: Tensor, weight: float = 0.5, delta: float = HUBER_DELTA
) -> Tensor:
    """Pull the body's hidden surface toward the subject's skin color."""
    n = occluded.sum()
    if float(n) == 0.0:
        return body_rgb.new_zeros(())
    err = huber(body_rgb, c_skin.to(body_rgb.dtype).expand_as(body_rgb), delta).mean(-1)
    return weight * (err * occluded).sum() / n


def total_variation(maps: Tensor) -> Tensor:
    """Mean squared neighbor difference over (L, C, H, W) maps, within each map."""
    dx = maps[..., :, 1:] - maps[..., :, :-1]
    dy = maps[..., 1:, :] - maps[..., :-1, :]
    return ((dx * dx).sum() + (dy * dy).sum()) / (dx.numel() + dy.numel())


def reg_loss(maps: AttributeMaps, offsets: Tensor, weights: LossWeights) -> tuple[Tensor, dict[str, Tensor]]:
    off = weights.offset * (offsets * offsets).sum(-1).mean()
    tv = weights.smooth * total_variation(maps.stacked())
    return off + tv, {"offset": off, "smooth": tv}


def segmentation_one_hot(labels: np.ndarray) -> Tensor:
    """(H, W) integer labels with -1 for background -> (H, W, 5)."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (len(LABELS),), dtype=np.float32)
    fg = labels >= 0
    out[fg, labels[fg]] = 1.0
    return torch.from_numpy(out)


__all__ = [
    "HUBER_DELTA",
    "LossWeights",
    "ViewTruth",
    "maskin_loss",
    "occluded_mask",
    "recon_loss",
    "reg_loss",
    "segmentation_one_hot",
    "skin_color",
    "skin_loss",
    "total_variation",
]
