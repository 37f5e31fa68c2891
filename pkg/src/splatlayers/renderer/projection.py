"""EWA projection of 3D Gaussians to screen-space ellipses, with its
analytic vector-Jacobian product. Float64 numpy throughout."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera

NEAR = 0.01
DILATION = 0.3
MAX_CONDITION = 1e8


@dataclass
class Projection:
    means2d: np.ndarray  # (N, 2) pixel coordinates
    cov2d: np.ndarray  # (N, 2, 2) including dilation
    conics: np.ndarray  # (N, 3) inverse covariance (a, b, c)
    depths: np.ndarray  # (N,)
    valid: np.ndarray  # (N,) bool
    n_culled: int
    n_ill_conditioned: int
    # saved for the backward pass
    t: np.ndarray
    jac: np.ndarray  # (N, 2, 3)
    m: np.ndarray  # (N, 2, 3) = J @ W
    sigma: np.ndarray  # (N, 3, 3)
    rs: np.ndarray  # (N, 3, 3) = R @ diag(s)


def project(means, rotations, scales, camera: Camera) -> Projection:
    means = np.asarray(means, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    w = camera.rotation
    t = means @ w.T + camera.translation
    tz = t[:, 2]
    in_front = tz >= NEAR
    tz_safe = np.where(in_front, tz, 1.0)
    rs = rotations * scales[:, None, :]
    sigma = rs @ rs.transpose(0, 2, 1)
    n = len(means)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx / tz_safe
    jac[:, 0, 2] = -camera.fx * t[:, 0] / tz_safe**2
    jac[:, 1, 1] = camera.fy / tz_safe
    jac[:, 1, 2] = -camera.fy * t[:, 1] / tz_safe**2
    m = jac @ w
    cov = m @ sigma @ m.transpose(0, 2, 1)
    cov[:, 0, 0] += DILATION
    cov[:, 1, 1] += DILATION
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    # eigenvalue ratio of the symmetric 2x2
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(half_tr**2 - det, 0.0))
    lam_min = half_tr - disc
    lam_max = half_tr + disc
    ill = in_front & ((lam_min <= 0) | (lam_max > MAX_CONDITION * np.maximum(lam_min, 1e-300)))
    valid = in_front & ~ill
    det_safe = np.where(valid, det, 1.0)
    conics = np.stack([c / det_safe, -b / det_safe, a / det_safe], axis=1)
    means2d = np.stack(
        [camera.fx * t[:, 0] / tz_safe + camera.cx, camera.fy * t[:, 1] / tz_safe + camera.cy], 1
    )
    return Projection(
        means2d, cov, conics, tz, valid, int((~in_front).sum()), int(ill.sum()),
        t, jac, m, sigma, rs,
    )


def project_backward(
    proj: Projection, rotations, scales, camera: Camera, d_means2d: np.ndarray, d_conics: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chain screen-space gradients back to (means, rotations, scales)."""
    rotations = np.asarray(rotations, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    valid = proj.valid
    d_means2d = np.where(valid[:, None], d_means2d, 0.0)
    d_conics = np.where(valid[:, None], d_conics, 0.0)
    q = np.zeros((len(valid), 2, 2))
    q[:, 0, 0] = proj.conics[:, 0]
    q[:, 0, 1] = q[:, 1, 0] = proj.conics[:, 1]
    q[:, 1, 1] = proj.conics[:, 2]
    g_q = np.zeros_like(q)
    g_q[:, 0, 0] = d_conics[:, 0]
    g_q[:, 0, 1] = g_q[:, 1, 0] = 0.5 * d_conics[:, 1]
    g_q[:, 1, 1] = d_conics[:, 2]
    g_cov = -q @ g_q @ q
    m, sigma = proj.m, proj.sigma
    g_sigma = m.transpose(0, 2, 1) @ g_cov @ m
    g_m = 2.0 * g_cov @ m @ sigma
    g_jac = g_m @ camera.rotation.T

    t = proj.t
    tz = np.where(valid, t[:, 2], 1.0)
    fx, fy = camera.fx, camera.fy
    g_t = np.zeros_like(t)
    g_t[:, 0] = g_jac[:, 0, 2] * (-fx / tz**2) + d_means2d[:, 0] * fx / tz
    g_t[:, 1] = g_jac[:, 1, 2] * (-fy / tz**2) + d_means2d[:, 1] * fy / tz
    g_t[:, 2] = (
        g_jac[:, 0, 0] * (-fx / tz**2)
        + g_jac[:, 0, 2] * (2 * fx * t[:, 0] / tz**3)
        + g_jac[:, 1, 1] * (-fy / tz**2)
        + g_jac[:, 1, 2] * (2 * fy * t[:, 1] / tz**3)
        + d_means2d[:, 0] * (-fx * t[:, 0] / tz**2)
        + d_means2d[:, 1] * (-fy * t[:, 1] / tz**2)
    )
    g_means = g_t @ camera.rotation
    g_rs = 2.0 * g_sigma @ proj.rs
    g_rot = g_rs * scales[:, None, :]
    g_scales = np.einsum("nik,nik->nk", g_rs, rotations)
    return g_means, g_rot, g_scales
