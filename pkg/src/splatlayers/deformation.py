"""Canonical-to-posed deformation of Gaussian batches.

Blendshape offsets baked at each seed move the means into the subject's
shape/expression/pose-corrective space; blended joint transforms then pose
the means, rotations, and scales.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .body_model import (
    BodyModel,
    BodyParams,
    ModelError,
    pose_feature,
    rigid_transforms,
)
from .renderer.gaussians import GaussianBatch
from .template import SeedSet

log = logging.getLogger(__name__)

DET_RANGE = (0.5, 2.0)
POLAR_ITERS = 12


def _check_offsets(seeds: SeedSet, params: BodyParams) -> None:
    if seeds.shape_offsets is None or seeds.expr_offsets is None or seeds.pose_offsets is None:
        raise ModelError("seeds carry no baked blendshape offsets; run bake_offsets first")
    for name, arr, coeffs in (
        ("shape", seeds.shape_offsets, params.betas),
        ("expression", seeds.expr_offsets, params.expression),
    ):
        if arr.shape[2] != np.shape(coeffs)[0]:
            raise ModelError(
                f"{name} offsets have {arr.shape[2]} bases but {np.shape(coeffs)[0]} coefficients were given"
            )
    n_pose = 9 * (np.shape(params.pose)[0] - 1)
    if seeds.pose_offsets.shape[2] != n_pose:
        raise ModelError(f"pose offsets have {seeds.pose_offsets.shape[2]} bases, pose implies {n_pose}")


def shape_displacement(seeds: SeedSet, params: BodyParams) -> np.ndarray:
    """(N, 3) summed shape, expression and pose-corrective offsets."""
    _check_offsets(seeds, params)
    return (
        seeds.shape_offsets @ np.asarray(params.betas, np.float64)
        + seeds.expr_offsets @ np.asarray(params.expression, np.float64)
        + seeds.pose_offsets.astype(np.float64) @ pose_feature(params.pose)
    )


def warp_shape(batch: GaussianBatch, seeds: SeedSet, params: BodyParams) -> GaussianBatch:
    d = torch.as_tensor(shape_displacement(seeds, params), dtype=batch.means.dtype)
    return batch.replace(means=batch.means + d)


@dataclass(eq=False)
class DeformContext:
    transforms: np.ndarray  # (J, 4, 4) per joint
    blended: np.ndarray  # (N, 4, 4) per seed
    n_degenerate: int

    @classmethod
    def build(cls, weights: np.ndarray, transforms: np.ndarray) -> DeformContext:
        blended = np.einsum("nj,jab->nab", weights, transforms)
        bad = ~np.isfinite(blended).all(axis=(1, 2))
        if bad.any():
            raise ValueError(f"non-finite blended transform at seed {int(np.flatnonzero(bad)[0])}")
        det = np.linalg.det(blended[:, :3, :3])
        degenerate = (det < DET_RANGE[0]) | (det > DET_RANGE[1])
        if degenerate.any():
            log.warning("%d seeds have degenerate blended transforms (det outside %s)", degenerate.sum(), DET_RANGE)
        return cls(transforms, blended, int(degenerate.sum()))


def build_context(
    model: BodyModel, params: BodyParams, seeds: SeedSet, global_transform: np.ndarray | None = None
) -> DeformContext:
    params.validate(model)
    b = rigid_transforms(model, params.betas, params.pose)
    if global_transform is not None:
        b = np.asarray(global_transform, np.float64) @ b
    return DeformContext.build(seeds.weights, b)


def polar_rotation(m: torch.Tensor, iters: int = POLAR_ITERS) -> torch.Tensor:
    """Orthogonal polar factor of (N, 3, 3) matrices with positive determinant.

    Newton iteration X <- (X + X^-T) / 2 keeps gradients finite where an SVD
    would divide by equal singular values.
    """
    x = m
    for _ in range(iters):
        x = 0.5 * (x + torch.linalg.inv(x).transpose(-1, -2))
    return x


def pose_transform(batch: GaussianBatch, ctx: DeformContext) -> GaussianBatch:
    if ctx.blended.shape[0] != len(batch):
        raise ValueError(f"context has {ctx.blended.shape[0]} seeds, batch has {len(batch)}")
    t = torch.as_tensor(ctx.blended, dtype=batch.means.dtype)
    lin = t[:, :3, :3]
    means = (lin @ batch.means[:, :, None])[:, :, 0] + t[:, :3, 3]
    stretched = lin @ batch.rotations
    rotations = polar_rotation(stretched)
    # each local axis is scaled by how much the blend stretches it
    scales = batch.scales * torch.linalg.vector_norm(stretched, dim=1)
    return batch.replace(means=means, rotations=rotations, scales=scales)


def deform(
    batch: GaussianBatch, seeds: SeedSet, model: BodyModel, params: BodyParams,
    global_transform: np.ndarray | None = None,
) -> GaussianBatch:
    ctx = build_context(model, params, seeds, global_transform)
    return pose_transform(warp_shape(batch, seeds, params), ctx)


__all__ = [
    "DeformContext",
    "build_context",
    "deform",
    "polar_rotation",
    "pose_transform",
    "shape_displacement",
    "warp_shape",
]
