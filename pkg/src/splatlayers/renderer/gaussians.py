from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
import torch

from ..template import LABELS

Tensor = torch.Tensor


@dataclass(eq=False)
class GaussianBatch:
    """Renderable Gaussians; float tensors may carry autograd history."""

    means: Tensor  # (N, 3)
    rotations: Tensor  # (N, 3, 3)
    scales: Tensor  # (N, 3), > 0
    opacities: Tensor  # (N,) in [0, 1]
    colors: Tensor  # (N, 3) in [0, 1]
    labels: np.ndarray  # (N,) index into LABELS

    def __post_init__(self):
        n = self.means.shape[0]
        expect = {
            "means": (n, 3), "rotations": (n, 3, 3), "scales": (n, 3),
            "opacities": (n,), "colors": (n, 3),
        }
        for name, shape in expect.items():
            got = tuple(getattr(self, name).shape)
            if got != shape:
                raise ValueError(f"GaussianBatch.{name} has shape {got}, expected {shape}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (n,):
            raise ValueError(f"GaussianBatch.labels has shape {self.labels.shape}, expected ({n},)")

    def __len__(self) -> int:
        return self.means.shape[0]

    def subset(self, idx) -> GaussianBatch:
        if isinstance(idx, np.ndarray) and idx.dtype == bool:
            idx = np.flatnonzero(idx)
        t = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return GaussianBatch(
            self.means[t], self.rotations[t], self.scales[t], self.opacities[t],
            self.colors[t], self.labels[np.asarray(idx)],
        )

    def component(self, label: str) -> GaussianBatch:
        return self.subset(np.flatnonzero(self.labels == LABELS.index(label)))

    def replace(self, **changes) -> GaussianBatch:
        return replace(self, **changes)

    def detach(self) -> GaussianBatch:
        return GaussianBatch(
            *(getattr(self, f.name).detach() for f in fields(self) if f.name != "labels"),
            labels=self.labels,
        )

    def validate(self) -> None:
        if (self.scales <= 0).any():
            raise ValueError("GaussianBatch scales must be positive")
        for name in ("means", "rotations", "scales", "opacities", "colors"):
            if not torch.isfinite(getattr(self, name)).all():
                raise ValueError(f"GaussianBatch.{name} contains non-finite values")

    @staticmethod
    def concatenate(parts: list[GaussianBatch]) -> GaussianBatch:
        return GaussianBatch(
            torch.cat([p.means for p in parts]),
            torch.cat([p.rotations for p in parts]),
            torch.cat([p.scales for p in parts]),
            torch.cat([p.opacities for p in parts]),
            torch.cat([p.colors for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )
