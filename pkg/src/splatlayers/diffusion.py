"""Noise schedule, v-prediction loss, ancestral sampling, and a small
convolutional denoiser for width-concatenated layered planes."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn

from .feature_plane import PLANE_CHANNELS, concat_layers, split_layers
from .tensor_core import Adam, ShapeError

Tensor = torch.Tensor

N_STEPS = 1000
BETA_START = 1e-4
BETA_END = 0.02
MAX_WEIGHT = 1e4


@dataclass(frozen=True, eq=False)
class Schedule:
    """Discrete linear-beta schedule indexed by continuous t in [0, 1]."""

    n_steps: int = N_STEPS
    beta_start: float = BETA_START
    beta_end: float = BETA_END

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.n_steps, dtype=np.float64)
        abar = np.cumprod(1.0 - betas)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", abar)
        object.__setattr__(self, "alphas", np.sqrt(abar))
        object.__setattr__(self, "sigmas", np.sqrt(1.0 - abar))

    def index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError(f"diffusion time must lie in [0, 1], got {t}")
        return np.rint(t * (self.n_steps - 1)).astype(np.int64)

    def alpha(self, t) -> np.ndarray:
        return self.alphas[self.index(t)]

    def sigma(self, t) -> np.ndarray:
        return self.sigmas[self.index(t)]

    def time_of(self, index) -> np.ndarray:
        return np.asarray(index, dtype=np.float64) / (self.n_steps - 1)


def _coef(values, like: Tensor) -> Tensor:
    """Broadcast per-sample scalars against a (B, ...) or unbatched tensor."""
    v = torch.as_tensor(np.asarray(values), dtype=like.dtype)
    if v.ndim == 0:
        return v
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def forward_diffuse(x0: Tensor, eps: Tensor, t, schedule: Schedule) -> Tensor:
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} and noise {tuple(eps.shape)} differ")
    return _coef(schedule.alpha(t), x0) * x0 + _coef(schedule.sigma(t), x0) * eps


def v_target(x0: Tensor, eps: Tensor, t, schedule: Schedule) -> Tensor:
    return _coef(schedule.alpha(t), x0) * eps - _coef(schedule.sigma(t), x0) * x0


def recover_x0(xt: Tensor, v: Tensor, t, schedule: Schedule) -> Tensor:
    return _coef(schedule.alpha(t), xt) * xt - _coef(schedule.sigma(t), xt) * v


def recover_eps(xt: Tensor, v: Tensor, t, schedule: Schedule) -> Tensor:
    return _coef(schedule.sigma(t), xt) * xt + _coef(schedule.alpha(t), xt) * v


def loss_weight(t, schedule: Schedule, omega: float = 0.5) -> np.ndarray:
    snr = schedule.alpha(t) / schedule.sigma(t)
    return np.minimum(snr ** (2.0 * omega), MAX_WEIGHT)


class Denoiser(Protocol):
    def __call__(self, xt: Tensor, t) -> Tensor: ...


def diffusion_loss(
    x0: Tensor, denoiser: Denoiser, t, eps: Tensor, schedule: Schedule,
    omega: float = 0.5, reduction: str = "sum",
) -> Tensor:
    """0.5 * w(t) * ||x0_hat - x0||^2 with x0_hat recovered from predicted v.

    ``reduction="sum"`` sums over elements (and samples); ``"mean"`` averages.
    Gradients reach both the denoiser and ``x0``.
    """
    xt = forward_diffuse(x0, eps, t, schedule)
    x0_hat = recover_x0(xt, denoiser(xt, t), t, schedule)
    w = _coef(loss_weight(t, schedule, omega), x0)
    err = 0.5 * w * (x0_hat - x0) ** 2
    if reduction == "sum":
        return err.sum()
    if reduction == "mean":
        return err.mean()
    raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def respaced(schedule: Schedule, n_steps: int) -> np.ndarray:
    """Descending step indices used by the sampler, from the last step down to 0."""
    if n_steps < 1 or n_steps > schedule.n_steps:
        raise ValueError(f"step count must be in [1, {schedule.n_steps}], got {n_steps}")
    idx = np.rint(np.linspace(schedule.n_steps - 1, 0, n_steps)).astype(np.int64)
    return np.unique(idx)[::-1]


@torch.no_grad()
def ddpm_sample(
    denoiser: Denoiser, schedule: Schedule, rng_seed: int, shape: tuple[int, ...], n_steps: int = N_STEPS,
) -> Tensor:
    """Ancestral sampling from N(0, I) over a respaced step sequence."""
    rng = np.random.default_rng(rng_seed)
    x = torch.from_numpy(rng.standard_normal(shape).astype(np.float32))
    steps = respaced(schedule, n_steps)
    abar = schedule.alpha_bar
    for i, k in enumerate(steps):
        t = schedule.time_of(k)
        if x.ndim == 4:
            t = np.full(x.shape[0], t)
        x0_hat = recover_x0(x, denoiser(x, t), t, schedule)
        if i == len(steps) - 1:
            return x0_hat
        prev = steps[i + 1]
        a_t, a_s = abar[k], abar[prev]
        beta = 1.0 - a_t / a_s
        c0 = math.sqrt(a_s) * beta / (1.0 - a_t)
        ct = math.sqrt(1.0 - beta) * (1.0 - a_s) / (1.0 - a_t)
        var = beta * (1.0 - a_s) / (1.0 - a_t)
        noise = torch.from_numpy(rng.standard_normal(shape).astype(np.float32))
        x = c0 * x0_hat + ct * x + math.sqrt(var) * noise
    return x


def time_embedding(t, dim: int) -> Tensor:
    """Sinusoidal features of the continuous time, (B, dim)."""
    t = torch.from_numpy(np.atleast_1d(np.asarray(t, dtype=np.float64)).astype(np.float32))
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = 1000.0 * t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class ToyDenoiser(nn.Module):
    """Three 3x3 convolution blocks with a channel-wise time embedding.

    ``positional`` adds a learned per-texel bias after the first block and
    ``context`` adds a global-average-pooled summary of the first block to the
    second; without them every texel is denoised from a 7x7 window alone.
    """

    def __init__(
        self, channels: int = PLANE_CHANNELS, hidden: int = 16, size: tuple[int, int] | None = None,
        t_dim: int = 32, positional: bool = True, context: bool = True, seed: int = 0,
    ):
        super().__init__()
        if positional and size is None:
            raise ValueError("a positional denoiser needs the plane size (H, W)")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.t_dim = t_dim
            self.conv_in = nn.Conv2d(channels, hidden, 3, padding=1)
            self.conv_mid = nn.Conv2d(hidden, hidden, 3, padding=1)
            self.conv_out = nn.Conv2d(hidden, channels, 3, padding=1)
            self.t_in = nn.Linear(t_dim, hidden)
            self.t_mid = nn.Linear(t_dim, hidden)
            self.pos = nn.Parameter(torch.zeros((hidden,) + tuple(size))) if positional else None
            self.ctx = nn.Linear(hidden, hidden) if context else None

    def forward(self, xt: Tensor, t) -> Tensor:
        unbatched = xt.ndim == 3
        x = xt[None] if unbatched else xt
        emb = time_embedding(np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],)), self.t_dim).to(x.dtype)
        h = self.conv_in(x) + self.t_in(emb)[:, :, None, None]
        if self.pos is not None:
            h = h + self.pos
        h = nn.functional.silu(h)
        g = self.conv_mid(h) + self.t_mid(emb)[:, :, None, None]
        if self.ctx is not None:
            g = g + self.ctx(h.mean(dim=(2, 3)))[:, :, None, None]
        out = self.conv_out(nn.functional.silu(g))
        return out[0] if unbatched else out


class DiffusionPrior(BaseEstimator):
    """Fit a toy denoiser to a stack of planes and draw samples from it.

    With ``standardize`` the planes are divided by their global standard
    deviation before training (the schedule assumes unit-scale data) and
    samples are scaled back.
    """

    def __init__(
        self, n_iter: int = 2000, lr: float = 1e-3, batch_size: int = 4, hidden: int = 16,
        omega: float = 0.5, sample_steps: int = 100, positional: bool = True, context: bool = True,
        standardize: bool = True, random_state: int = 0,
    ):
        self.n_iter = n_iter
        self.lr = lr
        self.batch_size = batch_size
        self.hidden = hidden
        self.omega = omega
        self.sample_steps = sample_steps
        self.positional = positional
        self.context = context
        self.standardize = standardize
        self.random_state = random_state

    def fit(self, planes, y=None) -> DiffusionPrior:
        from .validation import check_planes

        x = check_planes(planes)
        std = float(x.std()) if self.standardize else 1.0
        self.scale_ = std if std > 0 else 1.0
        x = x / self.scale_
        rng = np.random.default_rng(self.random_state)
        self.schedule_ = Schedule()
        self.denoiser_ = ToyDenoiser(
            x.shape[1], self.hidden, tuple(x.shape[2:]), positional=self.positional,
            context=self.context, seed=self.random_state,
        )
        opt = Adam(list(self.denoiser_.parameters()), lr=self.lr)
        self.loss_curve_ = []
        for _ in range(self.n_iter):
            idx = rng.integers(0, len(x), self.batch_size)
            t = rng.uniform(0.0, 1.0, self.batch_size)
            eps = torch.from_numpy(rng.standard_normal((self.batch_size,) + tuple(x.shape[1:])).astype(np.float32))
            opt.zero_grad()
            loss = diffusion_loss(x[idx], self.denoiser_, t, eps, self.schedule_, self.omega, "mean")
            loss.backward()
            opt.step()
            self.loss_curve_.append(float(loss))
        self.n_features_in_ = int(np.prod(x.shape[1:]))
        self.plane_shape_ = tuple(x.shape[1:])
        return self

    def sample(self, n_samples: int = 1, random_state: int | None = None) -> Tensor:
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "denoiser_")
        seed = self.random_state if random_state is None else random_state
        out = ddpm_sample(
            self.denoiser_, self.schedule_, seed, (n_samples,) + self.plane_shape_, self.sample_steps
        )
        return out * self.scale_


__all__ = [
    "DiffusionPrior",
    "Schedule",
    "ToyDenoiser",
    "concat_layers",
    "ddpm_sample",
    "diffusion_loss",
    "forward_diffuse",
    "loss_weight",
    "recover_eps",
    "recover_x0",
    "respaced",
    "split_layers",
    "time_embedding",
    "v_target",
]
