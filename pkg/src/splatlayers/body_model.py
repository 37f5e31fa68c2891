"""Parametric body model with SMPL-X structure and a procedural toy humanoid.

All arrays are numpy float64. The model is immutable after construction.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_core

# SMPL 24-joint kinematic tree.
SMPL_PARENTS = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
)
JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle",
    "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
)
REGION_NAMES = (
    "pelvis", "torso", "neck", "face", "scalp", "collar", "upper_arm", "forearm",
    "hand", "thigh", "shin", "foot",
)

# Names reserved in the LAVT model file.
MODEL_KEYS = (
    "template", "faces", "shape_dirs", "pose_dirs", "expr_dirs",
    "j_regressor", "parents", "lbs_weights",
)


class ModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BodyModel:
    template: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)
    shape_dirs: np.ndarray  # (V, 3, n_betas)
    pose_dirs: np.ndarray  # (V, 3, 9 * (J - 1))
    expr_dirs: np.ndarray  # (V, 3, n_expr)
    j_regressor: np.ndarray  # (J, V)
    parents: np.ndarray  # (J,)
    lbs_weights: np.ndarray  # (V, J)
    regions: np.ndarray | None = None  # (V,) index into region_names
    region_names: tuple[str, ...] = REGION_NAMES
    parts: np.ndarray | None = None  # (V,) capsule id, used for cylindrical unwrap
    part_bones: np.ndarray | None = None  # (P, 2) joint pairs spanning each capsule

    def __post_init__(self):
        v = self.template.shape[0]
        j = self.parents.shape[0]
        if self.template.shape != (v, 3):
            raise ModelError(f"template must be (V,3), got {self.template.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ModelError(f"faces must be (F,3), got {self.faces.shape}")
        if self.faces.min() < 0 or self.faces.max() >= v:
            raise ModelError("faces reference vertices out of range")
        for name in ("shape_dirs", "pose_dirs", "expr_dirs"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != (v, 3):
                raise ModelError(f"{name} must be (V,3,K), got {arr.shape}")
        if self.pose_dirs.shape[2] != 9 * (j - 1):
            raise ModelError(
                f"pose_dirs must have 9*(J-1)={9 * (j - 1)} columns, got {self.pose_dirs.shape[2]}"
            )
        if self.j_regressor.shape != (j, v):
            raise ModelError(f"j_regressor must be (J,V)=({j},{v}), got {self.j_regressor.shape}")
        if self.lbs_weights.shape != (v, j):
            raise ModelError(f"lbs_weights must be (V,J)=({v},{j}), got {self.lbs_weights.shape}")
        if np.any(self.lbs_weights < 0) or not np.allclose(self.lbs_weights.sum(1), 1.0, atol=1e-5):
            raise ModelError("skinning-weight rows must be non-negative and sum to 1")
        if not np.allclose(self.j_regressor.sum(1), 1.0, atol=1e-5):
            raise ModelError("joint-regressor rows must sum to 1")
        if self.parents[0] != -1:
            raise ModelError("joint 0 must be the root (parent -1)")
        for i in range(1, j):
            if not 0 <= self.parents[i] < i:
                raise ModelError(f"parent of joint {i} must precede it (acyclic chain)")

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_betas(self) -> int:
        return self.shape_dirs.shape[2]

    @property
    def n_expr(self) -> int:
        return self.expr_dirs.shape[2]

    def region_index(self, name: str) -> int:
        return self.region_names.index(name)

    def to_tensors(self) -> dict[str, np.ndarray]:
        data = {k: getattr(self, k) for k in MODEL_KEYS}
        if self.regions is not None:
            data["regions"] = self.regions
        if self.parts is not None:
            data["parts"] = self.parts
            data["part_bones"] = self.part_bones
        return data

    @classmethod
    def from_tensors(cls, tensors, source: str = "model") -> BodyModel:
        t = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        missing = [k for k in MODEL_KEYS if k not in t]
        if missing:
            raise ModelError(f"{source}: missing model tensors {missing}")
        return cls(
            template=t["template"],
            faces=t["faces"].astype(np.int64),
            shape_dirs=t["shape_dirs"],
            pose_dirs=t["pose_dirs"],
            expr_dirs=t["expr_dirs"],
            j_regressor=t["j_regressor"],
            parents=t["parents"].astype(np.int64),
            lbs_weights=t["lbs_weights"],
            regions=t["regions"].astype(np.int64) if "regions" in t else None,
            parts=t["parts"].astype(np.int64) if "parts" in t else None,
            part_bones=t["part_bones"].astype(np.int64) if "part_bones" in t else None,
        )

    def save(self, path: str | Path) -> None:
        tensor_core.save_tensors(path, self.to_tensors())

    @classmethod
    def load(cls, path: str | Path) -> BodyModel:
        raw = tensor_core.load_tensors(path)
        return cls.from_tensors({k: v.numpy() for k, v in raw.items()}, str(path))


@dataclass
class BodyParams:
    betas: np.ndarray
    pose: np.ndarray  # (J, 3) axis-angle
    expression: np.ndarray

    @classmethod
    def zeros(cls, model: BodyModel) -> BodyParams:
        return cls(
            np.zeros(model.n_betas), np.zeros((model.n_joints, 3)), np.zeros(model.n_expr)
        )

    def validate(self, model: BodyModel) -> None:
        if np.shape(self.betas) != (model.n_betas,):
            raise ModelError(f"expected {model.n_betas} shape coefficients, got {np.shape(self.betas)}")
        if np.shape(self.expression) != (model.n_expr,):
            raise ModelError(
                f"expected {model.n_expr} expression coefficients, got {np.shape(self.expression)}"
            )
        if np.shape(self.pose) != (model.n_joints, 3):
            raise ModelError(f"expected pose ({model.n_joints},3), got {np.shape(self.pose)}")
        for name in ("betas", "pose", "expression"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelError(f"{name} contains non-finite values")

    def to_json(self) -> dict:
        return {
            "betas": np.asarray(self.betas).tolist(),
            "pose": np.asarray(self.pose).tolist(),
            "expression": np.asarray(self.expression).tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> BodyParams:
        return cls(
            np.asarray(d["betas"], dtype=np.float64),
            np.asarray(d["pose"], dtype=np.float64).reshape(-1, 3),
            np.asarray(d["expression"], dtype=np.float64),
        )


def from_smplx_arrays(arrays, n_betas: int = 10, n_expr: int = 10, n_shape_total: int = 300) -> BodyModel:
    """Map arrays exported from an SMPL-X ``.npz`` onto the model tensor names.

    Expected keys: ``v_template`` (V,3), ``f`` (F,3), ``shapedirs`` (V,3,S+E)
    holding shape bases then expression bases, ``posedirs`` (V,3,P) or
    the flattened (P, 3V) layout, ``J_regressor`` (J,V), ``kintree_table``
    (2,J) whose first row holds parents, and ``weights`` (V,J). Region labels
    are not part of SMPL-X; pass a model through ``dataclasses.replace`` to
    attach them before building an atlas.
    """
    a = {k: np.asarray(v) for k, v in dict(arrays).items()}
    v = a["v_template"].shape[0]
    shapedirs = a["shapedirs"].astype(np.float64)
    posedirs = a["posedirs"].astype(np.float64)
    if posedirs.ndim == 2:
        posedirs = posedirs.T.reshape(v, 3, -1)
    parents = a["kintree_table"][0].astype(np.int64).copy()
    parents[0] = -1
    return BodyModel(
        template=a["v_template"].astype(np.float64),
        faces=a["f"].astype(np.int64),
        shape_dirs=shapedirs[:, :, :n_betas],
        pose_dirs=posedirs,
        expr_dirs=shapedirs[:, :, n_shape_total : n_shape_total + n_expr],
        j_regressor=np.asarray(a["J_regressor"], dtype=np.float64),
        parents=parents,
        lbs_weights=a["weights"].astype(np.float64),
    )


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)[..., None, None]
    k = np.zeros(aa.shape[:-1] + (3, 3))
    k[..., 0, 1], k[..., 0, 2] = -aa[..., 2], aa[..., 1]
    k[..., 1, 0], k[..., 1, 2] = aa[..., 2], -aa[..., 0]
    k[..., 2, 0], k[..., 2, 1] = -aa[..., 1], aa[..., 0]
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    # sin(t)/t and (1-cos t)/t^2 with their series below the threshold
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * k + b * (k @ k)


def pose_feature(pose: np.ndarray) -> np.ndarray:
    """Concatenated (R_j - I) for non-root joints, flattened."""
    rots = rodrigues(np.asarray(pose)[1:])
    return (rots - np.eye(3)).reshape(-1)


def canonical_mesh(model: BodyModel, params: BodyParams) -> np.ndarray:
    params.validate(model)
    return (
        model.template
        + model.shape_dirs @ params.betas
        + model.expr_dirs @ params.expression
        + model.pose_dirs @ pose_feature(params.pose)
    )


def skeleton(model: BodyModel, betas: np.ndarray) -> np.ndarray:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.shape != (model.n_betas,):
        raise ModelError(f"expected {model.n_betas} shape coefficients, got {betas.shape}")
    return model.j_regressor @ (model.template + model.shape_dirs @ betas)


def rigid_transforms(model: BodyModel, betas: np.ndarray, pose: np.ndarray) -> np.ndarray:
    """Per-joint 4x4 transforms taking rest-pose space to posed space."""
    joints = skeleton(model, betas)
    rots = rodrigues(np.asarray(pose, dtype=np.float64))
    j = model.n_joints
    world = np.zeros((j, 4, 4))
    for i in range(j):
        local = np.eye(4)
        local[:3, :3] = rots[i]
        p = model.parents[i]
        local[:3, 3] = joints[i] - (joints[p] if p >= 0 else 0.0)
        world[i] = local if p < 0 else world[p] @ local
    rest_inv = np.tile(np.eye(4), (j, 1, 1))
    rest_inv[:, :3, 3] = -joints
    return world @ rest_inv


def blend_transforms(weights: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    return np.einsum("nj,jab->nab", weights, transforms)


def lbs_mesh(model: BodyModel, params: BodyParams) -> np.ndarray:
    verts = canonical_mesh(model, params)
    t = blend_transforms(model.lbs_weights, rigid_transforms(model, params.betas, params.pose))
    return np.einsum("nab,nb->na", t[:, :3, :3], verts) + t[:, :3, 3]


def edge_incidence(faces: np.ndarray) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for f in faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    return counts


def face_normals(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    n = np.cross(e1, e2)
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)


def vertex_normals(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    n = np.cross(e1, e2)  # area weighted
    out = np.zeros_like(verts)
    for k in range(3):
        np.add.at(out, faces[:, k], n)
    return out / np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)


# ------------------------------------------------------------- toy humanoid

# T-pose joint positions in meters: y up, +x is the subject's left, +z forward.
_TOY_JOINTS = np.array([
    [0.00, 0.95, 0.00], [0.09, 0.88, 0.00], [-0.09, 0.88, 0.00], [0.00, 1.07, 0.00],
    [0.10, 0.50, 0.00], [-0.10, 0.50, 0.00], [0.00, 1.20, 0.00], [0.10, 0.10, 0.00],
    [-0.10, 0.10, 0.00], [0.00, 1.33, 0.00], [0.10, 0.03, 0.13], [-0.10, 0.03, 0.13],
    [0.00, 1.50, 0.00], [0.07, 1.42, 0.00], [-0.07, 1.42, 0.00], [0.00, 1.68, 0.00],
    [0.19, 1.42, 0.00], [-0.19, 1.42, 0.00], [0.45, 1.42, 0.00], [-0.45, 1.42, 0.00],
    [0.70, 1.42, 0.00], [-0.70, 1.42, 0.00], [0.80, 1.42, 0.00], [-0.80, 1.42, 0.00],
])

# (start joint, end joint, radius, region)
_TOY_CAPSULES = (
    (0, 3, 0.14, "pelvis"), (3, 6, 0.13, "torso"), (6, 9, 0.14, "torso"),
    (9, 12, 0.05, "neck"), (12, 15, 0.10, "face"),
    (1, 4, 0.07, "thigh"), (2, 5, 0.07, "thigh"), (4, 7, 0.05, "shin"), (5, 8, 0.05, "shin"),
    (7, 10, 0.045, "foot"), (8, 11, 0.045, "foot"),
    (13, 16, 0.05, "collar"), (14, 17, 0.05, "collar"),
    (16, 18, 0.045, "upper_arm"), (17, 19, 0.045, "upper_arm"),
    (18, 20, 0.04, "forearm"), (19, 21, 0.04, "forearm"),
    (20, 22, 0.035, "hand"), (21, 23, 0.035, "hand"),
)


def _capsule(a: np.ndarray, b: np.ndarray, r: float, n_around: int):
    """Closed capsule surface; returns verts, faces and the ring indices at a and b."""
    axis = b - a
    length = np.linalg.norm(axis)
    axis = axis / length
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    w = np.cross(axis, u)
    s45 = np.sqrt(0.5)
    # (axial offset from a, radius)
    rings = [(-r * s45, r * s45), (0.0, r), (0.5 * length, r), (length, r), (length + r * s45, r * s45)]
    phis = 2 * np.pi * np.arange(n_around) / n_around
    verts = [
        a + off * axis + rad * (np.cos(phi) * u + np.sin(phi) * w)
        for off, rad in rings
        for phi in phis
    ]
    verts += [a - r * axis, b + r * axis]
    pole_a, pole_b = len(verts) - 2, len(verts) - 1
    faces = []
    n = n_around
    for k in range(len(rings) - 1):
        for i in range(n):
            i2 = (i + 1) % n
            p0, p1 = k * n + i, k * n + i2
            q0, q1 = (k + 1) * n + i, (k + 1) * n + i2
            faces += [(p0, q0, p1), (p1, q0, q1)]
    last = (len(rings) - 1) * n
    for i in range(n):
        i2 = (i + 1) % n
        faces.append((pole_a, i2, i))
        faces.append((pole_b, last + i, last + i2))
    verts = np.array(verts)
    faces = np.array(faces)
    # orient outward
    cen = verts[faces].mean(1)
    t = np.clip((cen - a) @ axis, 0.0, length)
    radial = cen - (a + t[:, None] * axis)
    flip = (face_normals(verts, faces) * radial).sum(1) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    ring_a = np.arange(n, 2 * n)
    ring_b = np.arange(3 * n, 4 * n)
    return verts, faces, ring_a, ring_b


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip((p - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def make_toy_model(seed: int = 0, n_around: int = 8, n_betas: int = 10, n_expr: int = 10) -> BodyModel:
    """Capsule-limb humanoid with SMPL's 24-joint skeleton (~800 vertices)."""
    rng = np.random.default_rng(seed)
    joints = _TOY_JOINTS
    n_joints = len(joints)
    verts, faces, regions, parts = [], [], [], []
    ring_for_joint: dict[int, np.ndarray] = {}
    end_rings: dict[int, np.ndarray] = {}
    offset = 0
    for pid, (ja, jb, r, region) in enumerate(_TOY_CAPSULES):
        v, f, ra, rb = _capsule(joints[ja], joints[jb], r, n_around)
        verts.append(v)
        faces.append(f + offset)
        regions.append(np.full(len(v), REGION_NAMES.index(region)))
        parts.append(np.full(len(v), pid))
        ring_for_joint.setdefault(ja, ra + offset)
        end_rings[jb] = rb + offset
        offset += len(v)
    verts = np.concatenate(verts)
    faces = np.concatenate(faces)
    regions = np.concatenate(regions)
    parts = np.concatenate(parts)

    # scalp: top and back of the head capsule
    head = joints[15]
    head_vs = regions == REGION_NAMES.index("face")
    rel = verts - head
    scalp = head_vs & ((rel[:, 1] > 0.04) | ((rel[:, 1] > -0.1) & (rel[:, 2] < -0.03)))
    regions[scalp] = REGION_NAMES.index("scalp")

    v_count = len(verts)
    j_regressor = np.zeros((n_joints, v_count))
    for j in range(n_joints):
        ring = ring_for_joint.get(j, end_rings.get(j))
        j_regressor[j, ring] = 1.0 / len(ring)

    # distance-based skinning: each joint owns the bones to its children
    children = {j: [c for c in range(n_joints) if SMPL_PARENTS[c] == j] for j in range(n_joints)}
    bandwidth = 0.03
    dist = np.empty((v_count, n_joints))
    for j in range(n_joints):
        segs = children[j] or [j]
        dist[:, j] = np.min(
            [_segment_distance(verts, joints[j], joints[c]) for c in segs], axis=0
        )
    logits = -(dist**2) / (2 * bandwidth**2)
    logits -= logits.max(1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(1, keepdims=True)

    normals = vertex_normals(verts, faces)
    # radial direction from each vertex's own capsule axis
    radial = np.zeros_like(verts)
    for pid, (ja, jb, _, _) in enumerate(_TOY_CAPSULES):
        m = parts == pid
        a, b = joints[ja], joints[jb]
        ab = b - a
        t = np.clip((verts[m] - a) @ ab / (ab @ ab), 0, 1)
        radial[m] = verts[m] - (a + t[:, None] * ab)

    def mask(*names):
        return np.isin(regions, [REGION_NAMES.index(n) for n in names])[:, None]

    side = np.sign(verts[:, 0:1])
    arms = mask("collar", "upper_arm", "forearm", "hand")
    legs = mask("thigh", "shin", "foot")
    shape_dirs = np.zeros((v_count, 3, n_betas))
    basis = [
        verts * np.array([0.0, 0.05, 0.0]),  # height
        0.15 * radial,  # global girth
        arms * np.array([1.0, 0.0, 0.0]) * (verts[:, 0:1] - side * 0.19) * 0.1,  # arm length
        legs * np.array([0.0, 1.0, 0.0]) * (verts[:, 1:2] - 0.88) * 0.1,  # leg length
        mask("pelvis", "torso") * 0.2 * radial,  # torso girth
        arms * side * np.array([0.02, 0.0, 0.0]),  # shoulder width
        mask("face", "scalp") * 0.1 * (verts - head),  # head size
        mask("torso", "pelvis") * np.array([0.0, 0.0, 0.03])
        * np.exp(-((verts[:, 1:2] - 1.1) ** 2) / 0.02) * (verts[:, 2:3] > 0),  # belly
        legs * side * np.array([0.015, 0.0, 0.0]),  # hip width
        (arms | legs) * 0.15 * radial,  # limb girth
    ]
    for k in range(min(n_betas, len(basis))):
        shape_dirs[:, :, k] = basis[k]
    for k in range(len(basis), n_betas):
        shape_dirs[:, :, k] = 0.005 * rng.standard_normal((v_count, 3))

    face_vs = mask("face")[:, 0]
    expr_dirs = np.zeros((v_count, 3, n_expr))
    face_pts = verts[face_vs]
    for k in range(n_expr):
        center = face_pts[rng.integers(len(face_pts))]
        bump = np.exp(-np.sum((verts - center) ** 2, 1) / (2 * 0.03**2)) * face_vs
        expr_dirs[:, :, k] = 0.01 * bump[:, None] * normals

    pose_dirs = 1e-4 * rng.standard_normal((v_count, 3, 9 * (n_joints - 1)))

    part_bones = np.array([(a, b) for a, b, _, _ in _TOY_CAPSULES])
    return BodyModel(
        template=verts,
        faces=faces,
        shape_dirs=shape_dirs,
        pose_dirs=pose_dirs,
        expr_dirs=expr_dirs,
        j_regressor=j_regressor,
        parents=SMPL_PARENTS.copy(),
        lbs_weights=weights,
        regions=regions,
        parts=parts,
        part_bones=part_bones,
    )
