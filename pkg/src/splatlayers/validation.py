"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numpy as np
import torch

from .feature_plane import PLANE_CHANNELS
from .renderer import Camera
from .template import N_LAYERS


def check_plane(plane) -> torch.Tensor:
    """A finite (12, R, 3R) plane as float32."""
    x = torch.as_tensor(np.asarray(plane.detach() if isinstance(plane, torch.Tensor) else plane), dtype=torch.float32)
    if x.ndim != 3 or x.shape[0] != PLANE_CHANNELS or x.shape[2] != N_LAYERS * x.shape[1]:
        raise ValueError(f"plane must have shape ({PLANE_CHANNELS}, R, {N_LAYERS}R), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("plane contains non-finite values")
    return x


def check_planes(planes) -> torch.Tensor:
    """A non-empty stack of planes, (N, 12, R, 3R)."""
    if isinstance(planes, (list, tuple)):
        if not planes:
            raise ValueError("need at least one plane")
        return torch.stack([check_plane(p) for p in planes])
    x = torch.as_tensor(np.asarray(planes.detach() if isinstance(planes, torch.Tensor) else planes), dtype=torch.float32)
    if x.ndim != 4 or len(x) == 0:
        raise ValueError(f"planes must be a non-empty (N, C, R, 3R) array, got {tuple(x.shape)}")
    return torch.stack([check_plane(p) for p in x])


def check_camera(camera) -> Camera:
    if isinstance(camera, Camera):
        return camera
    if isinstance(camera, dict):
        return Camera.from_json(camera)
    raise TypeError(f"expected a Camera or its JSON dict, got {type(camera).__name__}")


def check_scenes(scenes) -> list:
    """Scenes as loaded ``SceneTruth`` objects; paths are loaded."""
    from .assets_io import SceneTruth, load_scene

    if isinstance(scenes, (str, bytes)) or not hasattr(scenes, "__iter__"):
        scenes = [scenes]
    out = [s if isinstance(s, SceneTruth) else load_scene(s) for s in scenes]
    if not out:
        raise ValueError("need at least one scene")
    return out


__all__ = ["check_camera", "check_plane", "check_planes", "check_scenes"]
