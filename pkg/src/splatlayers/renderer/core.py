from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import raster
from .camera import Camera
from .gaussians import GaussianBatch
from .projection import Projection, project, project_backward

N_LABELS = 5
MODES = ("color", "silhouette", "silhouette_detached_full_opacity", "segmentation", "color+segmentation")


class RasterContext:
    """One forward/backward pair of the splatting rasterizer (numpy in/out)."""

    def __init__(self, camera: Camera, background: np.ndarray, tile: int = raster.TILE):
        self.camera = camera
        self.background = np.asarray(background, dtype=np.float64).reshape(-1)
        self.tile = tile
        self._saved = None

    def forward(self, means, rotations, scales, opacities, features):
        cam = self.camera
        feats = np.ascontiguousarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != len(means):
            raise ValueError(f"features must be (N, K), got {feats.shape} for {len(means)} Gaussians")
        if self.background.shape[0] != feats.shape[1]:
            raise ValueError(
                f"background has {self.background.shape[0]} channels, features have {feats.shape[1]}"
            )
        proj = project(means, rotations, scales, cam)
        opac = np.ascontiguousarray(opacities, dtype=np.float64)
        entries, tile_start = raster.bin_gaussians(
            proj.means2d, proj.cov2d, proj.depths, proj.valid, cam.width, cam.height, self.tile
        )
        out, trans = raster.raster_forward(
            proj.means2d, proj.conics, opac, feats, self.background, entries, tile_start,
            cam.width, cam.height, self.tile,
        )
        self._saved = (proj, np.asarray(rotations, np.float64), np.asarray(scales, np.float64),
                       opac, feats, entries, tile_start, out, trans)
        return out, 1.0 - trans, proj

    def backward(self, d_image: np.ndarray, d_alpha: np.ndarray) -> dict[str, np.ndarray]:
        if self._saved is None:
            raise RuntimeError("backward called before forward on this render context")
        proj, rots, scales, opac, feats, entries, tile_start, out, trans = self._saved
        cam = self.camera
        g_ent = raster.raster_backward(
            proj.means2d, proj.conics, opac, feats, self.background, entries, tile_start,
            cam.width, cam.height, self.tile, out, trans,
            np.ascontiguousarray(d_image, dtype=np.float64),
            np.ascontiguousarray(d_alpha, dtype=np.float64),
        )
        g = raster.reduce_entries(entries, g_ent, len(opac))
        g_means, g_rot, g_scales = project_backward(proj, rots, scales, cam, g[:, 0:2], g[:, 2:5])
        return {
            "means": g_means, "rotations": g_rot, "scales": g_scales,
            "opacities": g[:, 5], "features": g[:, raster.N_GEOM_GRADS:],
            "means2d": g[:, 0:2], "conics": g[:, 2:5],
        }


class _Rasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, rotations, scales, opacities, features, camera, background, stats):
        rc = RasterContext(camera, background)
        np_in = [x.detach().cpu().numpy() for x in (means, rotations, scales, opacities, features)]
        image, alpha, proj = rc.forward(*np_in)
        stats["culled"] = proj.n_culled
        stats["ill_conditioned"] = proj.n_ill_conditioned
        ctx.rc = rc
        ctx.dtype = means.dtype
        return (
            torch.from_numpy(image).to(means.dtype),
            torch.from_numpy(alpha).to(means.dtype),
        )

    @staticmethod
    def backward(ctx, d_image, d_alpha):
        g = ctx.rc.backward(d_image.detach().cpu().numpy(), d_alpha.detach().cpu().numpy())
        dt = ctx.dtype
        out = [torch.from_numpy(g[k]).to(dt) for k in ("means", "rotations", "scales", "opacities", "features")]
        needs = ctx.needs_input_grad
        return tuple(o if needs[i] else None for i, o in enumerate(out)) + (None, None, None)


def rasterize(means, rotations, scales, opacities, features, camera: Camera, background) -> tuple:
    """Differentiable splatting of arbitrary per-Gaussian feature vectors.

    Returns (image (H, W, K), alpha (H, W), stats).
    """
    stats: dict = {}
    image, alpha = _Rasterize.apply(
        means, rotations, scales, opacities, features, camera,
        np.asarray(background, dtype=np.float64), stats,
    )
    return image, alpha, stats


@dataclass
class RenderOutput:
    color: torch.Tensor | None  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    labels: torch.Tensor | None = None  # (H, W, 5)
    stats: dict = field(default_factory=dict)


def one_hot_labels(labels: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    out = torch.zeros((len(labels), N_LABELS), dtype=dtype)
    out[torch.arange(len(labels)), torch.as_tensor(labels, dtype=torch.long)] = 1.0
    return out


def _mode_inputs(batch: GaussianBatch, mode: str, background):
    dt = batch.means.dtype
    n = len(batch)
    if mode not in MODES:
        raise ValueError(f"unknown render mode {mode!r}; expected one of {MODES}")
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    opac = batch.opacities
    if mode == "color":
        feats, bgk = batch.colors, bg
    elif mode in ("silhouette", "silhouette_detached_full_opacity"):
        feats, bgk = torch.zeros((n, 0), dtype=dt), np.zeros(0)
        if mode == "silhouette_detached_full_opacity":
            opac = torch.ones(n, dtype=dt)
    elif mode == "segmentation":
        feats, bgk = one_hot_labels(batch.labels, dt), np.zeros(N_LABELS)
    else:
        feats = torch.cat([batch.colors, one_hot_labels(batch.labels, dt)], 1)
        bgk = np.concatenate([bg, np.zeros(N_LABELS)])
    return opac, feats, bgk


def _split(image, alpha, mode, stats) -> RenderOutput:
    if mode == "color":
        return RenderOutput(image, alpha, None, stats)
    if mode == "segmentation":
        return RenderOutput(None, alpha, image, stats)
    if mode == "color+segmentation":
        return RenderOutput(image[..., :3], alpha, image[..., 3:], stats)
    return RenderOutput(None, alpha, None, stats)


def render(batch: GaussianBatch, camera: Camera, background=None, mode: str = "color") -> RenderOutput:
    """Composite a Gaussian batch front-to-back; differentiable via autograd.

    ``silhouette_detached_full_opacity`` substitutes unit opacity and passes no
    gradient to the opacities.
    """
    opac, feats, bgk = _mode_inputs(batch, mode, background)
    image, alpha, stats = rasterize(
        batch.means, batch.rotations, batch.scales, opac, feats, camera, bgk
    )
    return _split(image, alpha, mode, stats)


def render_reference(batch: GaussianBatch, camera: Camera, background=None, mode: str = "color",
                     chunk: int = 4096) -> RenderOutput:
    """Brute-force oracle: one global depth sort, every Gaussian tested at
    every pixel, no tiling."""
    opac_t, feats_t, bgk = _mode_inputs(batch, mode, background)
    proj: Projection = project(
        batch.means.detach().numpy(), batch.rotations.detach().numpy(),
        batch.scales.detach().numpy(), camera,
    )
    ids = np.flatnonzero(proj.valid)
    ids = ids[np.lexsort((ids, proj.depths[ids]))]
    m2 = proj.means2d[ids]
    con = proj.conics[ids]
    opac = opac_t.detach().numpy().astype(np.float64)[ids]
    feats = feats_t.detach().numpy().astype(np.float64)[ids]
    h, w = camera.height, camera.width
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs.reshape(-1) + 0.5
    py = ys.reshape(-1) + 0.5
    k_ch = feats.shape[1]
    image = np.empty((h * w, k_ch))
    trans = np.empty(h * w)
    for s in range(0, h * w, chunk):
        dx = px[s : s + chunk, None] - m2[None, :, 0]
        dy = py[s : s + chunk, None] - m2[None, :, 1]
        power = -0.5 * (con[None, :, 0] * dx * dx + con[None, :, 2] * dy * dy) - con[None, :, 1] * dx * dy
        inside = power >= raster.CUTOFF
        sig = np.where(inside, np.minimum(opac[None, :] * np.exp(np.minimum(power, 0.0)), raster.SIGMA_CAP), 0.0)
        one_minus = 1.0 - sig
        t_before = np.cumprod(np.concatenate([np.ones((len(dx), 1)), one_minus[:, :-1]], 1), axis=1)
        wgt = sig * t_before
        t_final = t_before[:, -1] * one_minus[:, -1] if len(ids) else np.ones(len(dx))
        image[s : s + chunk] = wgt @ feats + t_final[:, None] * bgk[None, :]
        trans[s : s + chunk] = t_final
    dt = batch.means.dtype
    image_t = torch.from_numpy(image.reshape(h, w, k_ch)).to(dt)
    alpha_t = torch.from_numpy(1.0 - trans.reshape(h, w)).to(dt)
    stats = {"culled": proj.n_culled, "ill_conditioned": proj.n_ill_conditioned}
    return _split(image_t, alpha_t, mode, stats)
