"""Differentiable array primitives used throughout the package.

Arrays are ``torch.Tensor`` objects in float32; torch's autograd records the
tape. This module pins down the fixed operation set the pipeline relies on,
with shape diagnostics, plus an Adam implementation that skips non-finite
gradients and the ``LAVT`` checkpoint format.
"""
from __future__ import annotations

import struct
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

DTYPE = torch.float32
MAGIC = b"LAVT"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def tensor(data, requires_grad: bool = False, dtype=DTYPE) -> Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=dtype).clone()
    t.requires_grad_(requires_grad)
    return t


def _broadcast_check(name: str, a: Tensor, b: Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(
            f"{name}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast"
        ) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)
    return a * b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} are not aligned"
        )
    return a @ b


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2D convolution with zero 'same' padding for odd kernels.

    ``x`` is (N, C, H, W) or (C, H, W); ``weight`` is (O, C, k, k).
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input {tuple(x.shape)} and kernel {tuple(weight.shape)} disagree on channels"
        )
    kh, kw = weight.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel {tuple(weight.shape)} must have odd extents")
    out = F.conv2d(x, weight, bias, padding=(kh // 2, kw // 2))
    return out[0] if squeeze else out


def bilinear_sample(image: Tensor, uv: Tensor) -> Tensor:
    """Sample a (C, H, W) image at (N, 2) uv coordinates in [0, 1]^2.

    Texel ``(i, j)`` has its center at ``((j + 0.5) / W, (i + 0.5) / H)``.
    Coordinates are clamped to the valid texel range. Returns (N, C).
    """
    if image.ndim != 3 or uv.ndim != 2 or uv.shape[1] != 2:
        raise ShapeError(
            f"bilinear_sample: image {tuple(image.shape)} and uv {tuple(uv.shape)} "
            "must be (C,H,W) and (N,2)"
        )
    _, h, w = image.shape
    x = (uv[:, 0] * w - 0.5).clamp(0.0, w - 1.0)
    y = (uv[:, 1] * h - 0.5).clamp(0.0, h - 1.0)
    x0 = x.detach().floor().clamp(max=max(w - 2, 0)).long()
    y0 = y.detach().floor().clamp(max=max(h - 2, 0)).long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = (x - x0.to(x.dtype)).unsqueeze(0)
    fy = (y - y0.to(y.dtype)).unsqueeze(0)
    flat = image.reshape(image.shape[0], -1)
    v00 = flat[:, y0 * w + x0]
    v01 = flat[:, y0 * w + x1]
    v10 = flat[:, y1 * w + x0]
    v11 = flat[:, y1 * w + x1]
    top = v00 + (v01 - v00) * fx
    bottom = v10 + (v11 - v10) * fx
    return (top + (bottom - top) * fy).T


def sum(x: Tensor, dim=None) -> Tensor:
    return x.sum() if dim is None else x.sum(dim)


def mean(x: Tensor, dim=None) -> Tensor:
    return x.mean() if dim is None else x.mean(dim)


silu = F.silu
sigmoid = torch.sigmoid
tanh = torch.tanh
relu = torch.relu


def huber(x: Tensor, target: Tensor | float = 0.0, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty: quadratic below ``delta``, linear above."""
    if not isinstance(target, Tensor):
        target = torch.full_like(x, float(target))
    _broadcast_check("huber", x, target)
    x, target = torch.broadcast_tensors(x, target)
    return F.huber_loss(x, target, reduction="none", delta=delta)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss into leaf ``.grad``."""
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss was not produced by recorded operations")
    loss.backward()


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: Tensor
    v: Tensor
    step: int = 0


def adam_step(
    param: Tensor,
    grad: Tensor,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """In-place bias-corrected Adam update. Returns False (and leaves
    everything untouched) when ``grad`` has non-finite entries."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(
            f"adam_step: param {tuple(param.shape)}, grad {tuple(grad.shape)}, "
            f"state {tuple(state.m.shape)} disagree"
        )
    if not torch.isfinite(grad).all():
        return False
    with torch.no_grad():
        state.step += 1
        state.m.mul_(beta1).add_(grad, alpha=1 - beta1)
        state.v.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
        m_hat = state.m / (1 - beta1**state.step)
        v_hat = state.v / (1 - beta2**state.step)
        param.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return True


@dataclass
class Adam:
    """Adam over a fixed list of parameters; one learning rate per group."""

    params: list[Tensor]
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    skipped: int = 0
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        self.states = [
            AdamState(torch.zeros_like(p.detach()), torch.zeros_like(p.detach()))
            for p in self.params
        ]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if not adam_step(p.data, g, s, self.lr, *self.betas, eps=self.eps):
                self.skipped += 1

    def state_tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, s in enumerate(self.states):
            out[f"{prefix}.{i}.m"] = s.m
            out[f"{prefix}.{i}.v"] = s.v
            out[f"{prefix}.{i}.step"] = torch.tensor([float(s.step)])
        return out


# ------------------------------------------------------------ checkpoints


def save_tensors(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write named tensors as little-endian f32 in the LAVT container."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, Tensor) else np.asarray(value)
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> dict[str, Tensor]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a LAVT checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported LAVT version {version}")
    off = 12
    out: dict[str, Tensor] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            out[name] = torch.from_numpy(data.astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated LAVT checkpoint") from exc
    return out


def parameters_with_prefix(prefix: str, named: Iterable[tuple[str, Tensor]]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in named}
