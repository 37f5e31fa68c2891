"""Joint optimization of per-subject planes, shared decoders, and the
denoiser; component transfer and animation drivers."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .body_model import BodyModel, BodyParams
from .deformation import build_context, pose_transform, warp_shape
from .diffusion import Schedule, ToyDenoiser, diffusion_loss
from .feature_plane import (
    AttributeMaps,
    Decoders,
    attributes_to_gaussians,
    decode,
    new_plane,
    plane_shape,
    sample_attributes,
)
from .losses import (
    MASK_SCOPES,
    LossWeights,
    maskin_loss,
    occluded_mask,
    recon_loss,
    reg_loss,
    skin_color,
    skin_loss,
)
from .renderer import Camera, GaussianBatch, render
from .template import (
    ATLAS_RES,
    COMPONENT_AREA,
    LABELS,
    LAYER_OF,
    LayeredTemplate,
    build_layered_template,
)
from .tensor_core import Adam, load_tensors, save_tensors

log = logging.getLogger(__name__)
Tensor = torch.Tensor

torch.set_num_threads(1)  # bitwise-stable reductions; the rasterizer does the parallel work

TERMS = ("color", "mask", "comp_color", "comp_mask", "seg", "per", "maskin", "skin", "offset", "smooth", "diffusion")


class FitAborted(RuntimeError):
    """Raised after repeated non-finite iterations."""


@dataclass
class FitConfig:
    iters: int = 2000
    scenes_per_iter: int = 4
    views_per_scene: int = 2
    lr_plane: float = 0.04
    lr_decoder: float = 1e-4
    lr_denoiser: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    huber_delta: float = 0.1
    diffusion_weight: float = 1.0
    omega: float = 0.5
    bn_warmup: int = 100
    head_init: str = "symmetric"
    plane_init_std: float = 0.01
    max_offset: float = 0.1
    levels: int = 1
    field_res: int = 64
    denoiser_hidden: int = 16
    terms: tuple[str, ...] | None = None  # None enables every term
    mask_scope: str = "others"  # see losses.recon_loss
    checkpoint_every: int = 0
    max_failures: int = 3
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        for name in ("iters", "scenes_per_iter", "views_per_scene"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr_plane", "lr_decoder", "lr_denoiser"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.terms is not None:
            self.terms = tuple(self.terms)
            unknown = set(self.terms) - set(TERMS)
            if unknown:
                raise ValueError(f"unknown loss terms {sorted(unknown)}; known: {TERMS}")
        if self.mask_scope not in MASK_SCOPES:
            raise ValueError(f"mask_scope must be one of {MASK_SCOPES}, got {self.mask_scope!r}")

    def enabled(self, term: str) -> bool:
        return self.terms is None or term in self.terms

    def to_json(self) -> dict:
        d = asdict(self)
        d["terms"] = list(self.terms) if self.terms is not None else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> FitConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------- avatars


@dataclass(eq=False)
class AvatarInstance:
    subject: str
    plane: Tensor  # (12, R, 3R)
    params: BodyParams

    def copy(self) -> AvatarInstance:
        return AvatarInstance(self.subject, self.plane.detach().clone(), copy.deepcopy(self.params))


@dataclass(eq=False)
class Decoded:
    maps: AttributeMaps
    attrs: dict[str, Tensor]
    canonical: GaussianBatch
    posed: GaussianBatch


def decode_avatar(
    avatar: AvatarInstance, decoders: Decoders, template: LayeredTemplate, model: BodyModel,
    params: BodyParams | None = None, max_offset: float = 0.1, global_transform=None,
) -> Decoded:
    """Plane -> attribute maps -> per-seed Gaussians -> posed Gaussians."""
    params = avatar.params if params is None else params
    maps = decode(avatar.plane, decoders)
    attrs = sample_attributes(maps, template.seeds)
    canonical = attributes_to_gaussians(attrs, template.seeds, max_offset)
    ctx = build_context(model, params, template.seeds, global_transform)
    posed = pose_transform(warp_shape(canonical, template.seeds, params), ctx)
    return Decoded(maps, attrs, canonical, posed)


def component_batches(batch: GaussianBatch) -> dict[str, GaussianBatch]:
    return {label: batch.component(label) for label in LABELS}


def island_columns(label: str, res: int = ATLAS_RES) -> slice:
    """Plane columns owned by a component's UV area in its layer."""
    if label not in LAYER_OF:
        raise KeyError(f"unknown component label {label!r}; expected one of {LABELS}")
    k = LAYER_OF[label]
    lo, hi = COMPONENT_AREA[label]
    return slice(k * res + int(round(lo * res)), k * res + int(round(hi * res)))


def transfer_component(target: AvatarInstance, source: AvatarInstance, label: str) -> AvatarInstance:
    """Copy ``source``'s latent island for ``label`` into a copy of ``target``.

    The target keeps its body parameters, so the transferred component is
    re-shaped to the target body when deformed.
    """
    cols = island_columns(label, target.plane.shape[1])
    if source.plane.shape != target.plane.shape:
        raise ValueError(f"plane shapes differ: {tuple(source.plane.shape)} vs {tuple(target.plane.shape)}")
    out = target.copy()
    with torch.no_grad():
        out.plane[:, :, cols] = source.plane[:, :, cols]
    return out


# -------------------------------------------------------------- checkpoints


def save_avatar(
    path: str | Path, avatar: AvatarInstance, decoders: Decoders, model: BodyModel,
    levels: int = 1, max_offset: float = 0.1, field_res: int = 64,
) -> None:
    data: dict = {"plane": avatar.plane}
    data["params.betas"] = avatar.params.betas
    data["params.pose"] = avatar.params.pose
    data["params.expression"] = avatar.params.expression
    for k, v in decoders.state_dict().items():
        data[k] = v.float()
    for k, v in model.to_tensors().items():
        data[f"model.{k}"] = v
    data["meta.levels"] = np.array([levels])
    data["meta.max_offset"] = np.array([max_offset])
    data["meta.field_res"] = np.array([field_res])
    data["meta.subject"] = np.frombuffer(avatar.subject.encode("utf-8"), dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_tensors(path, data)


@dataclass(eq=False)
class LoadedAvatar:
    avatar: AvatarInstance
    decoders: Decoders
    model: BodyModel
    levels: int
    max_offset: float
    field_res: int = 64

    def template(self) -> LayeredTemplate:
        return build_layered_template(self.model, self.levels, self.field_res)


def load_avatar(path: str | Path) -> LoadedAvatar:
    t = load_tensors(path)
    if "plane" not in t:
        raise ValueError(f"{path}: not an avatar checkpoint (no plane tensor)")
    subject = bytes(t["meta.subject"].numpy().astype(np.uint8)).decode("utf-8") if "meta.subject" in t else Path(path).stem
    params = BodyParams(
        t["params.betas"].double().numpy(), t["params.pose"].double().numpy(),
        t["params.expression"].double().numpy(),
    )
    decoders = Decoders()
    state = decoders.state_dict()
    for k in state:
        if k not in t:
            raise ValueError(f"{path}: missing decoder tensor {k}")
        state[k] = t[k].to(state[k].dtype)
    decoders.load_state_dict(state)
    decoders.freeze_statistics(True)
    model = BodyModel.from_tensors({k[6:]: v.numpy() for k, v in t.items() if k.startswith("model.")}, str(path))
    return LoadedAvatar(
        AvatarInstance(subject, t["plane"].clone(), params), decoders, model,
        int(t["meta.levels"][0]), float(t["meta.max_offset"][0]),
        int(t["meta.field_res"][0]) if "meta.field_res" in t else 64,
    )


def save_denoiser(path: str | Path, denoiser: ToyDenoiser) -> None:
    data = {k: v for k, v in denoiser.state_dict().items()}
    data["meta.hidden"] = np.array([denoiser.conv_in.out_channels])
    data["meta.channels"] = np.array([denoiser.conv_in.in_channels])
    data["meta.positional"] = np.array([denoiser.pos is not None])
    data["meta.context"] = np.array([denoiser.ctx is not None])
    save_tensors(path, data)


def load_denoiser(path: str | Path) -> ToyDenoiser:
    t = load_tensors(path)
    pos = bool(t["meta.positional"][0])
    den = ToyDenoiser(
        int(t["meta.channels"][0]), int(t["meta.hidden"][0]),
        tuple(t["pos"].shape[1:]) if pos else None, positional=pos, context=bool(t["meta.context"][0]),
    )
    den.load_state_dict({k: v for k, v in t.items() if not k.startswith("meta.")})
    return den


# --------------------------------------------------------------- rendering


@dataclass(eq=False)
class ViewRenders:
    full: object
    components: dict
    body_silhouette: Tensor


def render_view(posed: GaussianBatch, camera: Camera, background) -> ViewRenders:
    """Full joint render (color + segmentation), one render per component,
    and the body silhouette with unit opacity."""
    full = render(posed, camera, background, mode="color+segmentation")
    comps = {k: render(b, camera, background, mode="color") for k, b in component_batches(posed).items()}
    body = posed.component("body")
    sil = render(body, camera, mode="silhouette_detached_full_opacity").alpha
    return ViewRenders(full, comps, sil)


def psnr(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float:
    err = (np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2
    if mask is not None:
        err = err[np.asarray(mask, bool)]
    mse = float(err.mean())
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)


# --------------------------------------------------------------------- fit


@dataclass(eq=False)
class Subject:
    scene: object  # assets_io.SceneTruth
    avatar: AvatarInstance
    optimizer: Adam
    c_skin: Tensor


class Fitter:
    """Holds the full optimization state; ``step`` runs one joint iteration."""

    def __init__(self, scenes: list, config: FitConfig, model: BodyModel | None = None):
        if not scenes:
            raise ValueError("fit needs at least one scene")
        self.config = config
        self.model = model if model is not None else scenes[0].load_model()
        for s in scenes[1:]:
            if s.model_path is not None and not _same_model(self.model, s.load_model()):
                raise ValueError(f"scene {s.subject} uses a different body model; subjects must share a template")
        self.rng = np.random.default_rng(config.seed)
        self.template = build_layered_template(self.model, config.levels, config.field_res)
        self.decoders = Decoders(seed=config.seed, head_init=config.head_init)
        self.decoders.train()
        shape = plane_shape()
        self.denoiser = ToyDenoiser(shape[0], config.denoiser_hidden, shape[1:], seed=config.seed + 1)
        self.schedule = Schedule()
        self.opt_decoder = Adam(list(self.decoders.parameters()), lr=config.lr_decoder)
        self.opt_denoiser = Adam(list(self.denoiser.parameters()), lr=config.lr_denoiser)
        self.subjects: list[Subject] = []
        for s in scenes:
            plane = new_plane(self.rng, config.plane_init_std).requires_grad_(True)
            avatar = AvatarInstance(s.subject, plane, s.params)
            self.subjects.append(Subject(s, avatar, Adam([plane], lr=config.lr_plane), self._skin_color(s)))
        self.iteration = 0
        self.failures = 0
        self.events: list[dict] = []

    def _skin_color(self, scene) -> Tensor:
        """Mean ground-truth color under the rendered template hands."""
        seeds = self.template.seeds
        hand = self.model.region_index("hand")
        idx = np.flatnonzero((seeds.label == 0) & (seeds.region == hand))
        sub = seeds.subset(idx)
        n = len(idx)
        f32 = lambda a: torch.as_tensor(a, dtype=torch.float32)
        batch = GaussianBatch(f32(sub.mu0), f32(sub.rot0), f32(sub.scale0), torch.ones(n),
                              torch.zeros(n, 3), sub.label)
        posed = pose_transform(warp_shape(batch, sub, scene.params), build_context(self.model, scene.params, sub))
        rgbs, sils = [], []
        for v in scene.views:
            sils.append(render(posed, v.camera, mode="silhouette_detached_full_opacity").alpha)
            rgbs.append(v.truth.rgb)
        return skin_color(torch.cat([r.reshape(-1, 3) for r in rgbs]), torch.cat([s.reshape(-1) for s in sils]))

    # ------------------------------------------------------------ losses

    def view_loss(self, posed: GaussianBatch, view, background, c_skin: Tensor) -> dict[str, Tensor]:
        cfg = self.config
        w = cfg.weights
        r = render_view(posed, view.camera, background)
        _, parts = recon_loss(r.full, r.components, r.full.labels, view.truth, w, cfg.huber_delta,
                              mask_scope=cfg.mask_scope)
        parts["maskin"] = maskin_loss(r.body_silhouette, view.truth.fg, w.maskin)
        m_oc = occluded_mask(view.truth.components, view.truth.fg)
        parts["skin"] = skin_loss(r.components["body"].color, m_oc, c_skin, w.skin, cfg.huber_delta)
        return parts

    def _select(self, parts: dict) -> Tensor:
        vals = [v for k, v in parts.items() if self.config.enabled(k)]
        return sum(vals) if vals else torch.zeros(())

    def compute_loss(self, chosen: list[int]) -> tuple[Tensor, dict[str, float]]:
        cfg = self.config
        total = torch.zeros(())
        log_parts: dict[str, float] = {k: 0.0 for k in TERMS}
        n_views = 0
        planes = []
        for si in chosen:
            sub = self.subjects[si]
            dec = decode_avatar(sub.avatar, self.decoders, self.template, self.model, max_offset=cfg.max_offset)
            k = min(cfg.views_per_scene, len(sub.scene.views))
            views = self.rng.choice(len(sub.scene.views), size=k, replace=False)
            for vi in sorted(views.tolist()):
                parts = self.view_loss(dec.posed, sub.scene.views[vi], sub.scene.background, sub.c_skin)
                total = total + self._select(parts)
                for key, v in parts.items():
                    log_parts[key] += v.item()
                n_views += 1
            _, reg = reg_loss(dec.maps, dec.attrs["offset"], cfg.weights)
            # regularizers count once per subject after the per-view average
            total = total + self._select(reg) * k
            for key, v in reg.items():
                log_parts[key] += v.item() * k
            planes.append(sub.avatar.plane)
        total = total / n_views
        log_parts = {key: v / n_views for key, v in log_parts.items()}
        if cfg.enabled("diffusion") and cfg.diffusion_weight > 0:
            x0 = torch.stack(planes)
            t = self.rng.uniform(0.0, 1.0, len(planes))
            eps = torch.from_numpy(self.rng.standard_normal(tuple(x0.shape)).astype(np.float32))
            dl = cfg.diffusion_weight * diffusion_loss(x0, self.denoiser, t, eps, self.schedule, cfg.omega, "mean")
            total = total + dl
            log_parts["diffusion"] = dl.item()
        log_parts["total"] = total.item()
        return total, log_parts

    # -------------------------------------------------------------- step

    def _snapshot(self):
        return (
            [s.avatar.plane.detach().clone() for s in self.subjects],
            copy.deepcopy(self.decoders.state_dict()),
            copy.deepcopy(self.denoiser.state_dict()),
        )

    def _restore(self, snap) -> None:
        planes, dec, den = snap
        with torch.no_grad():
            for s, p in zip(self.subjects, planes):
                s.avatar.plane.copy_(p)
        self.decoders.load_state_dict(dec)
        self.denoiser.load_state_dict(den)

    def _all_params(self, chosen):
        params = [self.subjects[i].avatar.plane for i in chosen]
        return params + list(self.decoders.parameters()) + list(self.denoiser.parameters())

    def step(self) -> dict:
        cfg = self.config
        if self.iteration == cfg.bn_warmup:
            self.decoders.freeze_statistics(True)
        n = len(self.subjects)
        chosen = sorted(self.rng.choice(n, size=min(cfg.scenes_per_iter, n), replace=False).tolist())
        snap = self._snapshot()
        for p in self._all_params(range(n)):
            p.grad = None
        total, parts = self.compute_loss(chosen)
        ok = math.isfinite(total.item())
        if ok and total.requires_grad:
            total.backward()
            ok = all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in self._all_params(chosen))
        record = {"iter": self.iteration, **parts, "subjects": [self.subjects[i].avatar.subject for i in chosen]}
        if not ok:
            self._restore(snap)
            self.failures += 1
            record["skipped"] = True
            self.events.append({"iter": self.iteration, "event": "non-finite loss or gradient; step skipped"})
            log.warning("iteration %d: non-finite loss or gradient, parameters restored", self.iteration)
            if self.failures >= cfg.max_failures:
                raise FitAborted(f"{self.failures} consecutive non-finite iterations at iteration {self.iteration}")
        else:
            self.failures = 0
            for i in chosen:
                self.subjects[i].optimizer.step()
            self.opt_decoder.step()
            self.opt_denoiser.step()
            record["skipped"] = False
        self.iteration += 1
        return record

    # ------------------------------------------------------------ output

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for s in self.subjects:
            save_avatar(d / f"avatar_{s.avatar.subject}.ckpt", s.avatar, self.decoders, self.model,
                        self.config.levels, self.config.max_offset, self.config.field_res)
        save_denoiser(d / "denoiser.ckpt", self.denoiser)
        return d

    @torch.no_grad()
    def evaluate(self, which: str = "views") -> list[dict]:
        """Per-subject metrics over the training (``views``) or ``heldout`` views."""
        out = []
        cfg = self.config
        was = [m.training for m in self.decoders.modules()]
        self.decoders.freeze_statistics(True)
        for sub in self.subjects:
            dec = decode_avatar(sub.avatar, self.decoders, self.template, self.model, max_offset=cfg.max_offset)
            for vi, v in enumerate(getattr(sub.scene, which)):
                r = render_view(dec.posed, v.camera, sub.scene.background)
                _, parts = recon_loss(r.full, r.components, r.full.labels, v.truth, cfg.weights, cfg.huber_delta,
                                      mask_scope=cfg.mask_scope)
                rgb = r.full.color.numpy()
                gt = v.truth.rgb.numpy()
                m = {"subject": sub.avatar.subject, "view": vi, "color": float(parts["color"]),
                     "psnr": psnr(rgb, gt)}
                if "body" in v.layers:
                    # body rendered alone vs the true body layer; on mixed pixels the
                    # image is not the body's colour, so score pure body pixels
                    body = r.components["body"].color.numpy()
                    m["body_psnr_visible"] = psnr(body, v.layers["body"], v.labels == 0)
                    if "body" in v.pure:
                        m["body_psnr"] = psnr(body, v.layers["body"], v.pure["body"])
                for k, label in enumerate(LABELS):
                    if label in v.amodal:
                        sil = render(dec.posed.component(label), v.camera, mode="silhouette").alpha.numpy()
                        m[f"iou_{label}"] = iou(sil > 0.5, v.amodal[label] > 0.5)
                out.append(m)
        for mod, flag in zip(self.decoders.modules(), was):
            mod.training = flag
        return out


def _same_model(a: BodyModel, b: BodyModel) -> bool:
    ta, tb = a.to_tensors(), b.to_tensors()
    return ta.keys() == tb.keys() and all(np.array_equal(ta[k], tb[k]) for k in ta)


def _jsonable(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def fit(scenes: list, config: FitConfig, run_dir: str | Path | None = None, progress=None) -> Fitter:
    """Run ``config.iters`` joint iterations; write the run directory if given."""
    fitter = Fitter(scenes, config)
    run = Path(run_dir) if run_dir is not None else None
    fh = None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        (run / "samples").mkdir(exist_ok=True)
        (run / "config.json").write_text(json.dumps(config.to_json(), indent=1, sort_keys=True))
        fh = open(run / "losses.jsonl", "w")
    try:
        for _ in range(config.iters):
            rec = fitter.step()
            if fh is not None:
                fh.write(_jsonable(rec) + "\n")
            if progress is not None:
                progress(rec)
            every = config.checkpoint_every
            if run is not None and every and fitter.iteration % every == 0 and fitter.iteration < config.iters:
                fitter.save(run / "checkpoints" / f"iter_{fitter.iteration}")
    finally:
        if fh is not None:
            fh.close()
    if run is not None:
        fitter.save(run / "checkpoints" / f"iter_{fitter.iteration}")
        if fitter.events:
            (run / "events.jsonl").write_text("".join(_jsonable(e) + "\n" for e in fitter.events))
    return fitter


# ---------------------------------------------------------------- animate


@torch.no_grad()
def animate(
    loaded: LoadedAvatar, frames: list[BodyParams], camera: Camera, background=(1.0, 1.0, 1.0),
    template: LayeredTemplate | None = None,
) -> list[np.ndarray]:
    """Render one image per pose frame; appearance is decoded once."""
    template = template or loaded.template()
    maps = decode(loaded.avatar.plane, loaded.decoders)
    attrs = sample_attributes(maps, template.seeds)
    canonical = attributes_to_gaussians(attrs, template.seeds, loaded.max_offset)
    images = []
    for p in frames:
        ctx = build_context(loaded.model, p, template.seeds)
        posed = pose_transform(warp_shape(canonical, template.seeds, p), ctx)
        images.append(render(posed, camera, np.asarray(background, np.float64)).color.numpy())
    return images


def load_pose_sequence(path: str | Path, model: BodyModel, base: BodyParams | None = None) -> list[BodyParams]:
    """JSON list of frames; each frame may give any of betas, pose, expression."""
    frames = json.loads(Path(path).read_text())
    if not isinstance(frames, list):
        raise ValueError(f"{path}: pose sequence must be a JSON list of frames")
    base = base or BodyParams.zeros(model)
    out = []
    for i, f in enumerate(frames):
        p = BodyParams(
            np.asarray(f.get("betas", base.betas), np.float64),
            np.asarray(f.get("pose", base.pose), np.float64).reshape(-1, 3),
            np.asarray(f.get("expression", base.expression), np.float64),
        )
        try:
            p.validate(model)
        except ValueError as exc:
            raise ValueError(f"{path}: frame {i}: {exc}") from None
        out.append(p)
    return out


# -------------------------------------------------------------- estimator


class AvatarFitter(BaseEstimator):
    """Estimator wrapper: ``fit`` on scenes, ``predict`` renders cameras."""

    def __init__(self, iters: int = 2000, views_per_scene: int = 2, scenes_per_iter: int = 4,
                 lr_plane: float = 0.04, diffusion_weight: float = 1.0, random_state: int = 0):
        self.iters = iters
        self.views_per_scene = views_per_scene
        self.scenes_per_iter = scenes_per_iter
        self.lr_plane = lr_plane
        self.diffusion_weight = diffusion_weight
        self.random_state = random_state

    def fit(self, scenes, y=None) -> AvatarFitter:
        from .validation import check_scenes

        scenes = check_scenes(scenes)
        cfg = FitConfig(
            iters=self.iters, views_per_scene=self.views_per_scene, scenes_per_iter=self.scenes_per_iter,
            lr_plane=self.lr_plane, diffusion_weight=self.diffusion_weight, seed=self.random_state,
        )
        self.fitter_ = fit(scenes, cfg)
        self.subjects_ = [s.avatar.subject for s in self.fitter_.subjects]
        return self

    @torch.no_grad()
    def predict(self, cameras, subject: int | str = 0) -> np.ndarray:
        from sklearn.utils.validation import check_is_fitted

        from .validation import check_camera

        check_is_fitted(self, "fitter_")
        f = self.fitter_
        idx = self.subjects_.index(subject) if isinstance(subject, str) else int(subject)
        sub = f.subjects[idx]
        f.decoders.freeze_statistics(True)
        dec = decode_avatar(sub.avatar, f.decoders, f.template, f.model, max_offset=f.config.max_offset)
        cams = [check_camera(c) for c in (cameras if isinstance(cameras, (list, tuple)) else [cameras])]
        return np.stack([render(dec.posed, c, sub.scene.background).color.numpy() for c in cams])


__all__ = [
    "AvatarFitter",
    "AvatarInstance",
    "Decoded",
    "FitAborted",
    "FitConfig",
    "Fitter",
    "LoadedAvatar",
    "animate",
    "component_batches",
    "decode_avatar",
    "fit",
    "iou",
    "island_columns",
    "load_avatar",
    "load_denoiser",
    "load_pose_sequence",
    "psnr",
    "render_view",
    "save_avatar",
    "save_denoiser",
    "transfer_component",
]
