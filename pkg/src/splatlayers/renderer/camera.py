from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # (4, 4) rigid
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        m = np.asarray(self.world_to_camera, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"world_to_camera must be 4x4, got {m.shape}")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-5) or np.linalg.det(r) < 0:
            raise ValueError("world_to_camera rotation must be orthonormal with det +1")
        object.__setattr__(self, "world_to_camera", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def compose(self, transform: np.ndarray) -> Camera:
        """Camera viewing ``transform``-moved content as this one views the original:
        returns a camera with extrinsics ``world_to_camera @ inv(transform)``."""
        return Camera(
            self.fx, self.fy, self.cx, self.cy,
            self.world_to_camera @ np.linalg.inv(transform), self.width, self.height,
        )

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "world_to_camera": self.world_to_camera.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> Camera:
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            np.asarray(d["world_to_camera"], dtype=np.float64),
            int(d["width"]), int(d["height"]),
        )


def look_at(
    eye, target, up=(0.0, 1.0, 0.0), fx: float = 100.0, fy: float | None = None,
    width: int = 64, height: int = 64,
) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    m = np.eye(4)
    m[:3, :3] = np.stack([right, down, forward])
    m[:3, 3] = -m[:3, :3] @ eye
    return Camera(fx, fy if fy is not None else fx, width / 2.0, height / 2.0, m, width, height)


def orbit_cameras(
    n: int, radius: float, target, height: float = 0.0, fx: float = 100.0,
    width: int = 64, height_px: int = 64, phase: float = 0.0,
) -> list[Camera]:
    """``n`` cameras on a horizontal ring around ``target`` (y up)."""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for k in range(n):
        a = phase + 2 * np.pi * k / n
        eye = target + np.array([radius * np.sin(a), height, radius * np.cos(a)])
        cams.append(look_at(eye, target, fx=fx, width=width, height=height_px))
    return cams
