"""Scene manifests, image and mask files, PLY interchange, and the synthetic
toy scene generator."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from scipy.spatial.transform import Rotation

from .body_model import BodyModel, BodyParams, make_toy_model
from .losses import ViewTruth, segmentation_one_hot
from .renderer import Camera, GaussianBatch, look_at, render
from .template import LABELS, LayeredTemplate, build_layered_template, label_index
from .tensor_core import load_tensors, save_tensors

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SCENE_FORMAT = "splatlayers-scene"
SEG_BACKGROUND = 255


class SceneError(ValueError):
    """Invalid or inconsistent scene data."""


class ImageDecodeError(SceneError):
    """An image file exists but cannot be decoded."""


# ------------------------------------------------------------------ images


def save_png(path: str | Path, image: np.ndarray) -> None:
    """Write a float [0,1] (H,W[,3]) image or a uint8 array as 8-bit PNG."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise SceneError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc


def save_raw(path: str | Path, image) -> None:
    """Lossless f32 dump of an image in the tensor checkpoint container."""
    save_tensors(path, {"image": torch.as_tensor(np.asarray(image, dtype=np.float32))})


def load_raw(path: str | Path) -> np.ndarray:
    return load_tensors(path)["image"].numpy()


def _rgb(path: Path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr[..., :3].astype(np.float32) / 255.0


def _mask(path: Path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr.astype(np.float32) / 255.0 >= 0.5).astype(np.float32)


def _labels(path: Path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    lab = arr.astype(np.int64)
    lab[lab == SEG_BACKGROUND] = -1
    if lab.max() >= len(LABELS):
        raise SceneError(f"{path}: segmentation class {lab.max()} outside 0..{len(LABELS) - 1}")
    return lab


def labels_to_png(labels: np.ndarray) -> np.ndarray:
    out = np.asarray(labels).astype(np.int64).copy()
    out[out < 0] = SEG_BACKGROUND
    return out.astype(np.uint8)


# --------------------------------------------------------------- manifests


@dataclass(eq=False)
class ViewData:
    camera: Camera
    truth: ViewTruth
    labels: np.ndarray  # (H, W) with -1 for background
    amodal: dict[str, np.ndarray] = field(default_factory=dict)
    layers: dict[str, np.ndarray] = field(default_factory=dict)  # component rendered alone, RGB
    pure: dict[str, np.ndarray] = field(default_factory=dict)  # pixels one component colours alone


@dataclass(eq=False)
class SceneTruth:
    subject: str
    params: BodyParams
    background: np.ndarray
    views: list[ViewData]
    heldout: list[ViewData]
    model_path: Path | None
    root: Path

    def load_model(self) -> BodyModel:
        if self.model_path is None:
            raise SceneError(f"scene {self.subject} names no body model")
        return BodyModel.load(self.model_path)


def _load_view(root: Path, entry: dict) -> ViewData:
    try:
        camera = Camera.from_json(entry["camera"])
        rgb = _rgb(root / entry["rgb"])
        fg = _mask(root / entry["fg"])
        labels = _labels(root / entry["segmentation"])
    except KeyError as exc:
        raise SceneError(f"view entry lacks field {exc}") from None
    h, w = fg.shape
    for name, arr in (("rgb", rgb), ("segmentation", labels)):
        if arr.shape[:2] != (h, w):
            raise SceneError(f"{name} size {arr.shape[:2]} does not match mask size {(h, w)}")
    if (camera.height, camera.width) != (h, w):
        raise SceneError(f"camera size {(camera.height, camera.width)} does not match images {(h, w)}")
    comps = {}
    for label in LABELS:
        p = entry.get("components", {}).get(label)
        m = _mask(root / p) if p else (labels == label_index(label)).astype(np.float32)
        if m.shape != (h, w):
            raise SceneError(f"component mask {label} size {m.shape} does not match {(h, w)}")
        comps[label] = m
    amodal = {k: _mask(root / p) for k, p in entry.get("amodal", {}).items()}
    layers = {k: _rgb(root / p) for k, p in entry.get("layers", {}).items()}
    pure = {k: _mask(root / p) > 0.5 for k, p in entry.get("pure", {}).items()}
    truth = ViewTruth(
        torch.from_numpy(rgb), torch.from_numpy(fg),
        {k: torch.from_numpy(v) for k, v in comps.items()},
        segmentation_one_hot(labels),
    )
    return ViewData(camera, truth, labels, amodal, layers, pure)


def load_scene(path: str | Path) -> SceneTruth:
    path = Path(path)
    manifest = path / MANIFEST if path.is_dir() else path
    if not manifest.exists():
        raise SceneError(f"missing file: {manifest}")
    try:
        data = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{manifest}: invalid JSON ({exc})") from None
    root = manifest.parent
    if not data.get("views"):
        raise SceneError(f"{manifest}: scene has no views")
    model = data.get("body_model")
    if model and not (root / model).exists():
        raise SceneError(f"missing file: {root / model}")
    return SceneTruth(
        subject=str(data.get("subject", root.name)),
        params=BodyParams.from_json(data["body_params"]),
        background=np.asarray(data.get("background", [1.0, 1.0, 1.0]), dtype=np.float64),
        views=[_load_view(root, v) for v in data["views"]],
        heldout=[_load_view(root, v) for v in data.get("heldout", [])],
        model_path=root / model if model else None,
        root=root,
    )


def find_scenes(data_dir: str | Path) -> list[Path]:
    """Manifests directly in ``data_dir`` or one level below, sorted."""
    data_dir = Path(data_dir)
    if (data_dir / MANIFEST).exists():
        return [data_dir / MANIFEST]
    found = sorted(data_dir.glob(f"*/{MANIFEST}"))
    if not found:
        raise SceneError(f"no {MANIFEST} found in {data_dir} or its subdirectories")
    return found


# --------------------------------------------------------------------- PLY

PLY_PROPS = (
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3", "red", "green", "blue",
)


def export_ply(batch: GaussianBatch, path: str | Path, binary: bool = True) -> None:
    """Write Gaussians as PLY vertices; rotations as unit quaternions (w, x, y, z)."""
    b = batch.detach()
    rot = b.rotations.double().numpy()
    quat_xyzw = Rotation.from_matrix(rot).as_quat()
    quat = np.concatenate([quat_xyzw[:, 3:], quat_xyzw[:, :3]], 1)
    cols = np.concatenate(
        [b.means.double().numpy(), b.opacities.double().numpy()[:, None], b.scales.double().numpy(),
         quat, b.colors.double().numpy()], 1
    ).astype("<f4")
    labels = np.asarray(b.labels, dtype="<i4")
    fmt = "binary_little_endian" if binary else "ascii"
    header = [
        "ply", f"format {fmt} 1.0", f"element vertex {len(cols)}",
        *(f"property float {p}" for p in PLY_PROPS), "property int label", "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(len(cols), dtype=[(p, "<f4") for p in PLY_PROPS] + [("label", "<i4")])
            for i, p in enumerate(PLY_PROPS):
                rec[p] = cols[:, i]
            rec["label"] = labels
            fh.write(rec.tobytes())
        else:
            fh.writelines((" ".join(repr(float(v)) for v in row) + f" {int(lab)}\n").encode("ascii") for row, lab in zip(cols, labels))


def import_ply(path: str | Path) -> GaussianBatch:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise SceneError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    fmt = next(l.split()[1] for l in header if l.startswith("format"))
    n = int(next(l.split()[2] for l in header if l.startswith("element vertex")))
    props = [(l.split()[1], l.split()[2]) for l in header if l.startswith("property")]
    body = raw[end + len(b"end_header\n"):]
    names = [p for _, p in props]
    if fmt == "binary_little_endian":
        types = {"float": "<f4", "int": "<i4", "double": "<f8", "uchar": "u1"}
        rec = np.frombuffer(body, dtype=[(p, types[t]) for t, p in props], count=n)
        col = {p: rec[p].astype(np.float64) for p in names}
    elif fmt == "ascii":
        table = np.loadtxt(body.decode("ascii").splitlines(), ndmin=2) if n else np.zeros((0, len(names)))
        col = {p: table[:, i] for i, p in enumerate(names)}
    else:
        raise SceneError(f"{path}: unsupported PLY format {fmt}")
    quat = np.stack([col["rot_1"], col["rot_2"], col["rot_3"], col["rot_0"]], 1)
    rot = Rotation.from_quat(quat).as_matrix() if n else np.zeros((0, 3, 3))
    f32 = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float32)
    return GaussianBatch(
        f32(np.stack([col["x"], col["y"], col["z"]], 1).reshape(n, 3)),
        f32(rot.reshape(n, 3, 3)),
        f32(np.stack([col["scale_0"], col["scale_1"], col["scale_2"]], 1).reshape(n, 3)),
        f32(col["opacity"]),
        f32(np.stack([col["red"], col["green"], col["blue"]], 1).reshape(n, 3)),
        col.get("label", np.zeros(n)).astype(np.int64),
    )


# --------------------------------------------------------------- toy scene

TOY_SIZE = 128
TOY_FOCAL = 180.0
TOY_RADIUS = 3.2
TOY_TARGET = (0.0, 0.88, 0.0)

_BASE_COLORS = {
    "body": (0.86, 0.66, 0.54),
    "top": (0.20, 0.35, 0.75),
    "bottom": (0.25, 0.22, 0.20),
    "hair": (0.35, 0.20, 0.10),
    "shoes": (0.75, 0.75, 0.72),
}
# regions each garment actually covers in the synthetic subject
_GARMENT_REGIONS = {
    "top": ("torso", "collar", "upper_arm"),
    "bottom": ("pelvis", "thigh"),
    "hair": ("scalp",),
    "shoes": ("foot",),
}
TOY_OPACITY = 0.95
PURE_SHARE = 0.98  # a pixel is pure when one component supplies this share of its alpha
TOY_SCALE = 1.4  # denser coverage than the base seed scale


def toy_params(model: BodyModel, seed: int) -> BodyParams:
    rng = np.random.default_rng(seed)
    p = BodyParams.zeros(model)
    p.betas[:] = rng.normal(0.0, 0.5, model.n_betas)
    p.expression[:] = rng.normal(0.0, 0.5, model.n_expr)
    # arms lowered a little, one knee bent, head turned slightly
    p.pose[16] = (0.0, 0.0, -0.35)
    p.pose[17] = (0.0, 0.0, 0.35)
    p.pose[4] = (0.15, 0.0, 0.0)
    p.pose[15] = (0.0, 0.15, 0.0)
    return p


def toy_avatar(template: LayeredTemplate, model: BodyModel, seed: int) -> GaussianBatch:
    """Canonical ground-truth Gaussians: template geometry, smooth per-component colors."""
    s = template.seeds
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, 3)
    colors = np.zeros((len(s), 3))
    opac = np.zeros(len(s))
    for k, label in enumerate(LABELS):
        sel = s.label == k
        p = s.mu0[sel]
        shade = 0.10 * np.sin(7.0 * p[:, 1:2] + phase[0]) + 0.06 * np.cos(11.0 * p[:, 0:1] + phase[1])
        tint = 0.03 * np.sin(5.0 * p[:, 2:3] + phase)
        colors[sel] = np.clip(np.asarray(_BASE_COLORS[label]) + shade + tint, 0.02, 0.98)
        if label == "body":
            opac[sel] = TOY_OPACITY
        else:
            wanted = [model.region_index(r) for r in _GARMENT_REGIONS[label]]
            opac[sel] = np.where(np.isin(s.region[sel], wanted), TOY_OPACITY, 0.0)
    f32 = lambda a: torch.as_tensor(a, dtype=torch.float32)
    return GaussianBatch(f32(s.mu0), f32(s.rot0), f32(TOY_SCALE * s.scale0), f32(opac), f32(colors), s.label)


def toy_cameras(views: int, size: int = TOY_SIZE, phase: float = 0.0, elevation: float = 0.3) -> list[Camera]:
    cams = []
    target = np.asarray(TOY_TARGET)
    focal = TOY_FOCAL * size / TOY_SIZE
    for k in range(views):
        a = phase + 2 * np.pi * k / views
        eye = target + np.array([TOY_RADIUS * np.sin(a), elevation, TOY_RADIUS * np.cos(a)])
        cams.append(look_at(eye, target, fx=focal, width=size, height=size))
    return cams


def _render_truth(batch: GaussianBatch, cam: Camera, bg: np.ndarray) -> dict:
    out = render(batch, cam, background=bg, mode="color+segmentation")
    alpha = out.alpha.numpy()
    fg = alpha > 0.5
    labels = np.where(fg, out.labels.numpy().argmax(-1), -1)
    share = out.labels.numpy() / np.maximum(alpha, 1e-12)[..., None]
    pure = {label: fg & (share[..., k] >= PURE_SHARE) for k, label in enumerate(LABELS)}
    amodal, layers = {}, {}
    for k, label in enumerate(LABELS):
        part = batch.subset(batch.labels == k)
        alone = render(part, cam, background=bg, mode="color+segmentation")
        amodal[label] = alone.alpha.numpy() > 0.5
        layers[label] = alone.color.numpy()
    return {"rgb": out.color.numpy(), "fg": fg, "labels": labels, "amodal": amodal, "layers": layers, "pure": pure}


def _salt(labels: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    out = labels.copy()
    fg = np.flatnonzero(out.reshape(-1) >= 0)
    hit = fg[rng.random(len(fg)) < rate]
    out.reshape(-1)[hit] = rng.integers(0, len(LABELS), len(hit))
    return out


def make_toy_scene(
    out_dir: str | Path, seed: int = 0, views: int = 8, size: int = TOY_SIZE, levels: int = 1,
    noise_rate: float = 0.0, noise_views: int = 0, subject: str | None = None, model_seed: int = 0,
) -> Path:
    """Render a synthetic subject from a camera ring plus one held-out view.

    The body model comes from ``model_seed`` so several subjects can share
    one template atlas. Writes ``manifest.json``, the body model, PNG images, and the ground-truth
    Gaussians as ``gt.ply``. Returns the manifest path.
    """
    if noise_views > 2:
        raise ValueError("mask noise may be injected on at most 2 views")
    out = Path(out_dir)
    (out / "views").mkdir(parents=True, exist_ok=True)
    make_toy_model(model_seed).save(out / "body_model.lavt")
    # build from the stored (f32) model so fitting sees identical geometry
    model = BodyModel.load(out / "body_model.lavt")
    template = build_layered_template(model, levels=levels)
    params = toy_params(model, seed)
    canonical = toy_avatar(template, model, seed)
    from .deformation import deform

    posed = deform(canonical, template.seeds, model, params)
    bg = np.ones(3)
    rng = np.random.default_rng(seed + 1)
    cams = toy_cameras(views, size) + toy_cameras(1, size, phase=np.pi / views, elevation=0.1)

    entries = []
    for i, cam in enumerate(cams):
        t = _render_truth(posed, cam, bg)
        labels = t["labels"]
        if i < noise_views and noise_rate > 0:
            labels = _salt(labels, noise_rate, rng)
        stem = f"views/{i:02d}"
        save_png(out / f"{stem}_rgb.png", t["rgb"])
        save_png(out / f"{stem}_fg.png", t["fg"].astype(np.float64))
        save_png(out / f"{stem}_seg.png", labels_to_png(labels))
        entry = {
            "camera": cam.to_json(), "rgb": f"{stem}_rgb.png", "fg": f"{stem}_fg.png",
            "segmentation": f"{stem}_seg.png", "components": {}, "amodal": {}, "layers": {}, "pure": {},
        }
        for k, label in enumerate(LABELS):
            save_png(out / f"{stem}_mask_{label}.png", (labels == k).astype(np.float64))
            save_png(out / f"{stem}_amodal_{label}.png", t["amodal"][label].astype(np.float64))
            entry["components"][label] = f"{stem}_mask_{label}.png"
            entry["amodal"][label] = f"{stem}_amodal_{label}.png"
            save_png(out / f"{stem}_layer_{label}.png", t["layers"][label])
            entry["layers"][label] = f"{stem}_layer_{label}.png"
            save_png(out / f"{stem}_pure_{label}.png", t["pure"][label].astype(np.float64))
            entry["pure"][label] = f"{stem}_pure_{label}.png"
        entries.append(entry)
    export_ply(posed, out / "gt.ply")
    manifest = {
        "format": SCENE_FORMAT, "version": 1, "subject": subject or f"toy{seed}",
        "body_model": "body_model.lavt", "body_params": params.to_json(),
        "background": bg.tolist(), "template_levels": levels,
        "views": entries[:views], "heldout": entries[views:],
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return out / MANIFEST


__all__ = [
    "ImageDecodeError",
    "SceneError",
    "SceneTruth",
    "ViewData",
    "export_ply",
    "find_scenes",
    "import_ply",
    "labels_to_png",
    "load_raw",
    "load_scene",
    "make_toy_scene",
    "read_png",
    "save_png",
    "save_raw",
    "toy_avatar",
    "toy_cameras",
    "toy_params",
]
