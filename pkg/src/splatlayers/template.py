"""Component templates, their three-layer UV atlas, and Gaussian seeding.

Each component (body, top, bottom, hair, shoes) is a sub-surface of the body
model; exterior components are pushed a few millimetres outward along the
vertex normals. Per-vertex blendshape rows and skinning weights ride along
through subdivision so that every seed can be baked by barycentric
interpolation.
"""
from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .body_model import BodyModel, face_normals, vertex_normals

log = logging.getLogger(__name__)

LABELS = ("body", "top", "bottom", "hair", "shoes")
LAYER_OF = {"body": 0, "hair": 1, "shoes": 1, "top": 2, "bottom": 2}
N_LAYERS = 3
ATLAS_RES = 128

COMPONENT_REGIONS = {
    "body": None,  # every face
    "top": ("torso", "collar", "upper_arm", "forearm"),
    "bottom": ("pelvis", "thigh", "shin"),
    "hair": ("scalp",),
    "shoes": ("foot",),
}
# horizontal span of each component inside its layer's atlas
COMPONENT_AREA = {
    "body": (0.0, 1.0),
    "hair": (0.0, 0.5),
    "shoes": (0.5, 1.0),
    "top": (0.0, 0.5),
    "bottom": (0.5, 1.0),
}
EXTERIOR_OFFSET = 0.005
ISLAND_MARGIN = 3.0 / ATLAS_RES


def label_index(label: str) -> int:
    if label not in LABELS:
        raise KeyError(f"unknown component label {label!r}; expected one of {LABELS}")
    return LABELS.index(label)


@dataclass(eq=False)
class ComponentTemplate:
    label: str
    layer: int
    vertices: np.ndarray  # (Vt, 3) canonical positions
    faces: np.ndarray  # (Ft, 3)
    corner_uv: np.ndarray  # (Ft, 3, 2) in [0, 1]^2 of the layer atlas
    shape_dirs: np.ndarray  # (Vt, 3, n_betas)
    expr_dirs: np.ndarray
    pose_dirs: np.ndarray
    lbs_weights: np.ndarray  # (Vt, J)
    face_region: np.ndarray  # (Ft,)
    face_source: np.ndarray  # (Ft,) original body-model face

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def uv_box(self) -> tuple[float, float, float, float]:
        uv = self.corner_uv.reshape(-1, 2)
        return (*uv.min(0), *uv.max(0))


# -------------------------------------------------------------------- atlas


def _face_regions(model: BodyModel) -> np.ndarray:
    """Majority vertex region per face (first vertex breaks ties)."""
    r = model.regions[model.faces]
    out = r[:, 0].copy()
    maj = (r[:, 1] == r[:, 2]) & (r[:, 1] != r[:, 0])
    out[maj] = r[maj, 1]
    return out


def _frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def _cylindrical_uv(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-corner (angle/2pi, axial) for (F, 3, 3) corner points; seams and
    poles are resolved per face."""
    axis = (b - a) / np.linalg.norm(b - a)
    u, w = _frame(axis)
    rel = points - a
    ax = rel @ axis
    radial = rel - ax[..., None] * axis
    rad = np.linalg.norm(radial, axis=-1)
    ang = np.mod(np.arctan2(radial @ w, radial @ u), 2 * np.pi) / (2 * np.pi)
    pole = rad < 1e-9
    ang = np.where(pole, np.nan, ang)
    # unwrap faces straddling the seam
    lo = np.nanmin(ang, axis=1, keepdims=True)
    ang = np.where(ang - lo > 0.5, ang - 1.0, ang)
    fill = np.nanmean(ang, axis=1, keepdims=True)
    ang = np.where(np.isnan(ang), fill, ang)
    return np.stack([ang, ax], axis=-1)


def _planar_uv(points: np.ndarray) -> np.ndarray:
    flat = points.reshape(-1, 3)
    centered = flat - flat.mean(0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return (centered @ vt[:2].T).reshape(points.shape[:-1] + (2,))


def _pack_islands(islands: list[np.ndarray], area: tuple[float, float]) -> list[np.ndarray]:
    """Scale each island's raw uv into its own cell of a grid over ``area``."""
    n = len(islands)
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    cw = (area[1] - area[0]) / cols
    ch = 1.0 / rows
    out = []
    for k, raw in enumerate(islands):
        r, c = divmod(k, cols)
        lo = raw.reshape(-1, 2).min(0)
        hi = raw.reshape(-1, 2).max(0)
        span = np.maximum(hi - lo, 1e-9)
        cell_lo = np.array([area[0] + c * cw + ISLAND_MARGIN, r * ch + ISLAND_MARGIN])
        cell_size = np.array([cw - 2 * ISLAND_MARGIN, ch - 2 * ISLAND_MARGIN])
        out.append(cell_lo + (raw - lo) / span * cell_size)
    return out


def default_atlas(model: BodyModel, offset: float = EXTERIOR_OFFSET) -> dict[str, ComponentTemplate]:
    """Carve the five component templates and lay them out in three layers."""
    if model.regions is None:
        raise ValueError("body model has no per-vertex region labels; cannot build the atlas")
    face_region = _face_regions(model)
    normals = vertex_normals(model.template, model.faces)
    out = {}
    for label in LABELS:
        regions = COMPONENT_REGIONS[label]
        if regions is None:
            face_ids = np.arange(len(model.faces))
        else:
            missing = [r for r in regions if r not in model.region_names]
            if missing:
                raise ValueError(f"body model lacks region labels {missing} needed by {label}")
            wanted = [model.region_index(r) for r in regions]
            face_ids = np.flatnonzero(np.isin(face_region, wanted))
        if len(face_ids) == 0:
            raise ValueError(f"component {label} selects no faces")
        sub = model.faces[face_ids]
        used, inverse = np.unique(sub, return_inverse=True)
        faces = inverse.reshape(-1, 3)
        shift = 0.0 if label == "body" else offset
        verts = model.template[used] + shift * normals[used]

        corner_pts = model.template[sub]
        if model.parts is not None:
            face_part = model.parts[sub[:, 0]]
            part_ids = np.unique(face_part)
            raws = []
            for pid in part_ids:
                a, b = model.part_bones[pid]
                ja = model.j_regressor[a] @ model.template
                jb = model.j_regressor[b] @ model.template
                raws.append(_cylindrical_uv(corner_pts[face_part == pid], ja, jb))
            packed = _pack_islands(raws, COMPONENT_AREA[label])
            corner_uv = np.zeros((len(face_ids), 3, 2))
            for pid, uv in zip(part_ids, packed):
                corner_uv[face_part == pid] = uv
        else:
            corner_uv = _pack_islands([_planar_uv(corner_pts)], COMPONENT_AREA[label])[0]

        out[label] = ComponentTemplate(
            label=label,
            layer=LAYER_OF[label],
            vertices=verts,
            faces=faces,
            corner_uv=corner_uv,
            shape_dirs=model.shape_dirs[used],
            expr_dirs=model.expr_dirs[used],
            pose_dirs=model.pose_dirs[used],
            lbs_weights=model.lbs_weights[used],
            face_region=face_region[face_ids],
            face_source=face_ids,
        )
    return out


def subdivide(template: ComponentTemplate, levels: int = 1) -> ComponentTemplate:
    """Split every face 4-way per level; attributes interpolate linearly."""
    if levels < 0:
        raise ValueError("levels must be >= 0")
    t = template
    for _ in range(levels):
        faces = t.faces
        edge_ids: dict[tuple[int, int], int] = {}
        pairs = []

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in edge_ids:
                edge_ids[key] = len(t.vertices) + len(pairs)
                pairs.append(key)
            return edge_ids[key]

        new_faces = np.empty((4 * len(faces), 3), dtype=np.int64)
        for i, (a, b, c) in enumerate(faces):
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces[4 * i : 4 * i + 4] = ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))
        pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)

        def extend(arr):
            return np.concatenate([arr, 0.5 * (arr[pairs[:, 0]] + arr[pairs[:, 1]])])

        uv = t.corner_uv
        m_ab, m_bc, m_ca = (uv[:, 0] + uv[:, 1]) / 2, (uv[:, 1] + uv[:, 2]) / 2, (uv[:, 2] + uv[:, 0]) / 2
        new_uv = np.stack(
            [
                np.stack([uv[:, 0], m_ab, m_ca], 1),
                np.stack([m_ab, uv[:, 1], m_bc], 1),
                np.stack([m_ca, m_bc, uv[:, 2]], 1),
                np.stack([m_ab, m_bc, m_ca], 1),
            ],
            1,
        ).reshape(-1, 3, 2)
        t = replace(
            t,
            vertices=extend(t.vertices),
            faces=new_faces,
            corner_uv=new_uv,
            shape_dirs=extend(t.shape_dirs),
            expr_dirs=extend(t.expr_dirs),
            pose_dirs=extend(t.pose_dirs),
            lbs_weights=extend(t.lbs_weights),
            face_region=np.repeat(t.face_region, 4),
            face_source=np.repeat(t.face_source, 4),
        )
    return t


# -------------------------------------------------------------------- seeds


@dataclass(eq=False)
class SeedSet:
    """Struct-of-arrays over Gaussian seeds."""

    label: np.ndarray  # (N,) index into LABELS
    layer: np.ndarray
    face: np.ndarray  # face id inside the component template
    region: np.ndarray
    mu0: np.ndarray  # (N, 3)
    rot0: np.ndarray  # (N, 3, 3), columns (edge, normal x edge, normal)
    scale0: np.ndarray  # (N, 3)
    uv: np.ndarray  # (N, 2)
    weights: np.ndarray  # (N, J)
    shape_offsets: np.ndarray | None = None  # (N, 3, n_betas)
    expr_offsets: np.ndarray | None = None
    pose_offsets: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.label)

    def subset(self, idx) -> SeedSet:
        vals = {}
        for f in self.__dataclass_fields__:
            v = getattr(self, f)
            vals[f] = None if v is None else v[idx]
        return SeedSet(**vals)

    @staticmethod
    def concatenate(parts: Sequence[SeedSet]) -> SeedSet:
        vals = {}
        for f in SeedSet.__dataclass_fields__:
            arrs = [getattr(p, f) for p in parts]
            vals[f] = None if any(a is None for a in arrs) else np.concatenate(arrs)
        return SeedSet(**vals)


def init_seeds(template: ComponentTemplate) -> SeedSet:
    """One seed per non-degenerate face, at its centroid with a tangent frame."""
    v = template.vertices[template.faces]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    cross = np.cross(e1, e2)
    area = 0.5 * np.linalg.norm(cross, axis=1)
    keep = area >= 1e-12
    if not keep.all():
        log.warning("%s: skipped %d degenerate faces", template.label, int((~keep).sum()))
    idx = np.flatnonzero(keep)
    n = cross[idx] / np.linalg.norm(cross[idx], axis=1, keepdims=True)
    t1 = e1[idx] / np.linalg.norm(e1[idx], axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    rot0 = np.stack([t1, t2, n], axis=-1)
    edges = np.stack(
        [np.linalg.norm(e1[idx], axis=1), np.linalg.norm(e2[idx], axis=1),
         np.linalg.norm(v[idx, 2] - v[idx, 1], axis=1)], 1
    ).mean(1)
    scale0 = np.stack([edges / 2, edges / 2, edges / 8], 1)
    tri = template.faces[idx]
    weights = template.lbs_weights[tri].mean(1)
    count = len(idx)
    return SeedSet(
        label=np.full(count, label_index(template.label)),
        layer=np.full(count, template.layer),
        face=idx,
        region=template.face_region[idx],
        mu0=v[idx].mean(1),
        rot0=rot0,
        scale0=scale0,
        uv=template.corner_uv[idx].mean(1),
        weights=weights,
    )


def bake_offsets(seeds: SeedSet, template: ComponentTemplate) -> SeedSet:
    """Barycentric (centroid) blendshape offsets for every seed."""
    tri = template.faces[seeds.face]
    return replace(
        seeds,
        shape_offsets=template.shape_dirs[tri].mean(1),
        expr_offsets=template.expr_dirs[tri].mean(1),
        pose_offsets=template.pose_dirs[tri].mean(1).astype(np.float32),
    )


# ---------------------------------------------------------- skinning field


@dataclass(eq=False)
class SkinningField:
    lo: np.ndarray  # (3,)
    hi: np.ndarray  # (3,)
    weights: np.ndarray  # (R, R, R, J), indexed [ix, iy, iz]

    @property
    def resolution(self) -> int:
        return self.weights.shape[0]

    def cell_centers(self) -> np.ndarray:
        r = self.resolution
        axes = [self.lo[k] + (np.arange(r) + 0.5) * (self.hi[k] - self.lo[k]) / r for k in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1)

    def lookup(self, points: np.ndarray) -> tuple[np.ndarray, int]:
        """Trilinear weights at points, renormalized; returns (weights, n_clamped)."""
        r = self.resolution
        x = (points - self.lo) / (self.hi - self.lo) * r - 0.5
        outside = np.any((x < -0.5) | (x > r - 0.5), axis=1)
        x = np.clip(x, 0.0, r - 1.0)
        i0 = np.minimum(np.floor(x).astype(np.int64), r - 2)
        f = x - i0
        out = np.zeros((len(points), self.weights.shape[-1]))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    wgt = (
                        (f[:, 0] if dx else 1 - f[:, 0])
                        * (f[:, 1] if dy else 1 - f[:, 1])
                        * (f[:, 2] if dz else 1 - f[:, 2])
                    )
                    out += wgt[:, None] * self.weights[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        out /= out.sum(1, keepdims=True)
        return out, int(outside.sum())


def mean_edge_length(verts: np.ndarray, faces: np.ndarray) -> float:
    e = np.concatenate(
        [verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 1]],
         verts[faces[:, 0]] - verts[faces[:, 2]]]
    )
    return float(np.linalg.norm(e, axis=1).mean())


def build_skinning_field(
    model: BodyModel, grid_res: int = 64, k: int = 8, padding: float = 0.1
) -> SkinningField:
    """Gaussian-falloff fusion of the k nearest template-vertex weights."""
    lo = model.template.min(0) - padding
    hi = model.template.max(0) + padding
    fld = SkinningField(lo, hi, np.zeros((grid_res,) * 3 + (model.n_joints,), dtype=np.float32))
    centers = fld.cell_centers().reshape(-1, 3)
    k = min(k, len(model.template))
    dist, idx = cKDTree(model.template).query(centers, k=k)
    dist = dist.reshape(len(centers), k)
    idx = idx.reshape(len(centers), k)
    h = 2.0 * mean_edge_length(model.template, model.faces)
    # subtracting the nearest distance keeps far cells from underflowing
    phi = np.exp(-(dist**2 - dist[:, :1] ** 2) / (2 * h * h))
    fused = np.einsum("ck,ckj->cj", phi, model.lbs_weights[idx]) / phi.sum(1, keepdims=True)
    fused /= fused.sum(1, keepdims=True)
    fld.weights[:] = fused.reshape(fld.weights.shape)
    return fld


def assign_weights(seeds: SeedSet, fld: SkinningField) -> tuple[SeedSet, int]:
    """Body seeds keep barycentric weights; exterior seeds read the field."""
    weights = seeds.weights.copy()
    ext = seeds.label != label_index("body")
    clamped = 0
    if ext.any():
        weights[ext], clamped = fld.lookup(seeds.mu0[ext])
    if clamped:
        log.warning("%d seeds fell outside the skinning field and were clamped", clamped)
    return replace(seeds, weights=weights), clamped


# --------------------------------------------------------- full template


@dataclass(eq=False)
class LayeredTemplate:
    templates: dict[str, ComponentTemplate]
    seeds: SeedSet
    field: SkinningField
    levels: int = 1

    def component_slices(self) -> dict[str, np.ndarray]:
        return {lab: np.flatnonzero(self.seeds.label == i) for i, lab in enumerate(LABELS)}


def build_layered_template(
    model: BodyModel, levels: int = 1, field_res: int = 64, offset: float = EXTERIOR_OFFSET
) -> LayeredTemplate:
    atlas = default_atlas(model, offset=offset)
    templates = {lab: subdivide(t, levels) for lab, t in atlas.items()}
    parts = [bake_offsets(init_seeds(t), t) for t in templates.values()]
    seeds = SeedSet.concatenate(parts)
    fld = build_skinning_field(model, grid_res=field_res)
    seeds, _ = assign_weights(seeds, fld)
    return LayeredTemplate(templates, seeds, fld, levels)


def face_areas(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


__all__ = [
    "LABELS",
    "LAYER_OF",
    "ComponentTemplate",
    "LayeredTemplate",
    "SeedSet",
    "SkinningField",
    "assign_weights",
    "bake_offsets",
    "build_layered_template",
    "build_skinning_field",
    "default_atlas",
    "face_areas",
    "face_normals",
    "init_seeds",
    "label_index",
    "subdivide",
]
