"""Oracle suites behind ``splatlayers check``.

Each suite returns ``CheckResult`` rows; a row passes when its measured value
is within the stated bound. The fast suites run in seconds to minutes. The
``overfit`` and ``prior`` suites are full fitting experiments.
"""
from __future__ import annotations

import json
import math
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .renderer import Camera, GaussianBatch, look_at, render, render_reference

F64 = torch.float64


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.criterion:>2} {self.name}: {self.value:.6g} (bound {self.bound:.6g}) {self.detail}".rstrip()


def _random_batch(rng, n, dtype=F64, spread=0.5, scale=(0.02, 0.1)) -> GaussianBatch:
    rot = Rotation.random(n, random_state=int(rng.integers(1 << 31))).as_matrix() if n else np.zeros((0, 3, 3))
    return GaussianBatch(
        torch.tensor(rng.normal(0, spread, (n, 3)), dtype=dtype),
        torch.tensor(rot, dtype=dtype),
        torch.tensor(rng.uniform(*scale, (n, 3)), dtype=dtype),
        torch.tensor(rng.uniform(0.2, 0.9, n), dtype=dtype),
        torch.tensor(rng.uniform(0, 1, (n, 3)), dtype=dtype),
        rng.integers(0, 5, n),
    )


def _scene_camera(size: int) -> Camera:
    return look_at([0.3, 0.2, 3.0], [0, 0, 0], fx=1.1 * size, width=size, height=size)


# ----------------------------------------------------------------- renderer


def renderer_oracle(seed: int = 0, scenes: int = 20, size: int = 64, max_gaussians: int = 500) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(scenes):
        b = _random_batch(rng, int(rng.integers(1, max_gaussians + 1)), torch.float32)
        cam = _scene_camera(size)
        bg = rng.uniform(0, 1, 3)
        a = render(b, cam, background=bg).color
        r = render_reference(b, cam, background=bg).color
        worst = max(worst, float(torch.max(torch.abs(a - r))))
    dt = time.perf_counter() - t0
    from .renderer.raster import numba

    threads = numba.get_num_threads()
    return [
        CheckResult(1, "tiled vs reference max |dC|", worst <= 1e-5, worst, 1e-5, f"{scenes} scenes {size}x{size}"),
        CheckResult(1, "oracle suite runtime [s]", dt <= 60.0, dt, 60.0, f"{threads} thread(s)", dt),
    ]


def _fd_relative_errors(rng, n=10, size=16, h=1e-3) -> np.ndarray:
    b = _random_batch(rng, n, spread=0.3, scale=(0.05, 0.2))
    cam = _scene_camera(size)
    w_img = torch.tensor(rng.normal(size=(size, size, 3)))
    w_a = torch.tensor(rng.normal(size=(size, size)))

    def loss(batch):
        out = render(batch, cam, background=[0.5, 0.5, 0.5])
        return (out.color * w_img).sum() + (out.alpha * w_a).sum()

    leaves = {k: getattr(b, k).clone().requires_grad_() for k in ("means", "scales", "rotations", "opacities", "colors")}
    loss(b.replace(**leaves)).backward()
    rel = []
    with torch.no_grad():
        for k, v in leaves.items():
            flat = v.detach().reshape(-1)
            for i in range(len(flat)):
                p = flat.clone()
                p[i] += h
                up = loss(b.replace(**{k: p.reshape(v.shape)}))
                p[i] -= 2 * h
                down = loss(b.replace(**{k: p.reshape(v.shape)}))
                fd = float(up - down) / (2 * h)
                an = float(v.grad.reshape(-1)[i])
                scale = max(abs(fd), abs(an))
                if scale > 1e-4:  # parameters that touch no pixel carry no signal
                    rel.append(abs(fd - an) / scale)
    return np.asarray(rel)


def renderer_gradients(seed: int = 0, scenes: int = 10) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    rel = np.concatenate([_fd_relative_errors(rng) for _ in range(scenes)])
    dt = time.perf_counter() - t0
    frac = float(np.mean(rel < 1e-2))
    return [
        CheckResult(2, "FD agreement fraction (rel < 1e-2)", frac >= 0.95, frac, 0.95, f"{len(rel)} parameters"),
        CheckResult(2, "gradient suite runtime [s]", dt <= 120.0, dt, 120.0, "", dt),
    ]


def hand_cases(seed: int = 0) -> list[CheckResult]:
    out = []
    for dt in (F64, torch.float32):
        b = GaussianBatch(
            torch.tensor([[0, 0, 3.0], [0, 0, 3.5]], dtype=dt), torch.eye(3, dtype=dt).repeat(2, 1, 1),
            torch.full((2, 3), 0.5, dtype=dt), torch.tensor([0.5, 0.5], dtype=dt),
            torch.tensor([[1, 0, 0], [0, 0, 1.0]], dtype=dt), np.zeros(2, np.int64),
        )
        cam = Camera(60.0, 60.0, 8.5, 8.5, np.eye(4), 16, 16)
        got = render(b, cam, background=[0, 0, 0]).color[8, 8].tolist()
        err = float(np.max(np.abs(np.array(got) - [0.5, 0.0, 0.25])))
        out.append(CheckResult(3, f"two-Gaussian pixel ({str(dt)[6:]})", got == [0.5, 0.0, 0.25], err, 0.0, str(got)))
    empty = GaussianBatch(torch.zeros(0, 3), torch.zeros(0, 3, 3), torch.zeros(0, 3), torch.zeros(0),
                          torch.zeros(0, 3), np.zeros(0, np.int64))
    bg = [0.1, 0.5, 0.9]
    img = render(empty, _scene_camera(16), background=bg).color
    err = float(torch.max(torch.abs(img - torch.tensor(bg))))
    out.append(CheckResult(3, "empty scene is background", err == 0.0, err, 0.0))
    return out


# -------------------------------------------------------------- deformation


def deformation_rigidity(seed: int = 0) -> list[CheckResult]:
    from .assets_io import toy_avatar, toy_cameras, toy_params
    from .body_model import BodyParams, make_toy_model
    from .deformation import deform
    from .template import build_layered_template

    model = make_toy_model(0)
    tpl = build_layered_template(model, levels=0, field_res=32)
    g = toy_avatar(tpl, model, seed)
    g = g.replace(**{k: getattr(g, k).double() for k in ("means", "scales", "opacities", "colors")})
    g = g.replace(rotations=torch.tensor(Rotation.from_matrix(tpl.seeds.rot0).as_matrix()))
    rest = deform(g, tpl.seeds, model, BodyParams.zeros(model))
    rest_err = max(float(torch.max(torch.abs(getattr(rest, k) - getattr(g, k)))) for k in ("means", "rotations", "scales"))
    p = toy_params(model, seed + 1)
    m = np.eye(4)
    m[:3, :3] = Rotation.from_rotvec([0.3, 1.2, -0.4]).as_matrix()
    m[:3, 3] = (0.2, -0.1, 0.3)
    plain = deform(g, tpl.seeds, model, p)
    moved = deform(g, tpl.seeds, model, p, global_transform=m)
    err = 0.0
    for cam in toy_cameras(4, size=64):
        a = render(plain, cam, background=[1, 1, 1]).color
        b = render(moved, cam.compose(m), background=[1, 1, 1]).color
        err = max(err, float(torch.max(torch.abs(a - b))))
    return [
        CheckResult(4, "rigid motion commutes with rendering (Linf)", err <= 1e-4, err, 1e-4, "4 views"),
        CheckResult(4, "rest pose is identity (Linf)", rest_err <= 1e-6, rest_err, 1e-6),
    ]


# ---------------------------------------------------------------- diffusion


def diffusion_algebra(seed: int = 0) -> list[CheckResult]:
    from .diffusion import (
        Schedule,
        diffusion_loss,
        forward_diffuse,
        recover_x0,
        v_target,
    )

    s = Schedule()
    norm = float(np.max(np.abs(s.alphas**2 + s.sigmas**2 - 1)))
    rng = np.random.default_rng(seed)
    x0 = torch.tensor(rng.normal(size=(s.n_steps, 12, 4, 12)))
    eps = torch.tensor(rng.normal(size=x0.shape))
    t = s.time_of(np.arange(s.n_steps))
    xt = forward_diffuse(x0, eps, t, s)
    trip = float(torch.max(torch.abs(recover_x0(xt, v_target(x0, eps, t, s), t, s) - x0)))
    loss = float(diffusion_loss(x0, lambda x, tt: v_target(x0, eps, tt, s), t, eps, s))
    return [
        CheckResult(5, "alpha^2 + sigma^2 - 1 over all steps", norm <= 1e-6, norm, 1e-6),
        CheckResult(5, "v round trip max error", trip <= 1e-5, trip, 1e-5, "all 1000 steps"),
        CheckResult(5, "perfect-denoiser loss", loss <= 1e-12, loss, 1e-12, "float64 rounding only"),
    ]


# ------------------------------------------------------------------- maskin


def maskin_constraint(seed: int = 0) -> list[CheckResult]:
    from .losses import maskin_loss

    fg = torch.zeros(10, 10, dtype=F64)
    fg[2:8, 2:8] = 1.0
    inside = torch.zeros(10, 10, dtype=F64)
    inside[3:7, 3:7] = 0.9
    zero = float(maskin_loss(inside, fg, 5.0))
    half = torch.zeros(10, 10, dtype=F64)
    half[:, :5] = 1.0
    over = torch.zeros(10, 10, dtype=F64)
    over[:, :7] = 1.0
    viol = abs(float(maskin_loss(over, half, 5.0)) - 5.0 * 0.2)

    rng = np.random.default_rng(seed)
    cam = look_at([0, 0, 3], [0, 0, 0], fx=30, width=20, height=20)
    b = _random_batch(rng, 25, spread=0.3)
    op = b.opacities.clone().requires_grad_()
    means = b.means.clone().requires_grad_()
    box = torch.zeros(20, 20, dtype=F64)
    box[5:15, 5:15] = 1.0

    def loss(o, m):
        sil = render(b.replace(opacities=o, means=m), cam, mode="silhouette_detached_full_opacity").alpha
        return maskin_loss(sil, box)

    value = loss(op, means)
    value.backward()
    auto = 0.0 if op.grad is None else float(op.grad.abs().max())
    fd = 0.0
    with torch.no_grad():
        for i in range(len(op)):
            q = op.detach().clone()
            q[i] += 1e-3
            fd = max(fd, abs(float(loss(q, means)) - float(value)) / 1e-3)
    return [
        CheckResult(8, "maskin with silhouette inside foreground", zero == 0.0, zero, 0.0),
        CheckResult(8, "maskin vs weight x violating fraction", viol <= 1e-12, viol, 1e-12),
        CheckResult(8, "maskin opacity gradient (autograd)", auto == 0.0, auto, 0.0),
        CheckResult(8, "maskin opacity gradient (finite differences)", fd == 0.0, fd, 0.0),
    ]


# ----------------------------------------------------------------- transfer


def transfer_correctness(seed: int = 0) -> list[CheckResult]:
    from .assets_io import toy_cameras, toy_params
    from .body_model import make_toy_model
    from .feature_plane import Decoders, new_plane
    from .pipeline import (
        AvatarInstance,
        decode_avatar,
        island_columns,
        transfer_component,
    )
    from .template import build_layered_template

    model = make_toy_model(0)
    tpl = build_layered_template(model, levels=0, field_res=32)
    dec = Decoders(seed)
    dec.freeze_statistics(True)
    rng = np.random.default_rng(seed)
    a = AvatarInstance("a", new_plane(rng, 0.5), toy_params(model, seed))
    b = AvatarInstance("b", new_plane(rng, 0.5), toy_params(model, seed + 1))
    cams = toy_cameras(4, size=64)

    @torch.no_grad()
    def renders(av):
        posed = decode_avatar(av, dec, tpl, model).posed
        return posed, [render(posed, c, background=[1, 1, 1]).color for c in cams]

    _, base = renders(a)
    _, same = renders(transfer_component(a, a, "top"))
    self_err = max(float(torch.max(torch.abs(x - y))) for x, y in zip(base, same))
    out = [CheckResult(10, "self-transfer render change", self_err == 0.0, self_err, 0.0)]
    posed_a, _ = renders(a)
    for label in ("top", "hair"):
        moved = transfer_component(a, b, label)
        cols = island_columns(label, a.plane.shape[1])
        keep = torch.ones(a.plane.shape[2], dtype=torch.bool)
        keep[cols] = False
        outside_plane = float(torch.max(torch.abs(moved.plane[:, :, keep] - a.plane[:, :, keep])))
        posed_m, imgs = renders(moved)
        worst, n_out = 0.0, 0
        for cam, x, y in zip(cams, base, imgs):
            with torch.no_grad():
                m0 = render(posed_a.component(label), cam, mode="silhouette").alpha > 0
                m1 = render(posed_m.component(label), cam, mode="silhouette").alpha > 0
            outside = ~(m0 | m1)
            n_out += int(outside.sum())
            if outside.any():
                worst = max(worst, float(torch.max(torch.abs(x - y)[outside])))
        out.append(CheckResult(10, f"{label}: plane change outside island", outside_plane == 0.0, outside_plane, 0.0))
        out.append(CheckResult(10, f"{label}: pixel change outside component mask", worst <= 1e-6, worst, 1e-6,
                               f"{n_out} of {len(cams) * 64 * 64} pixels outside"))
    return out


# -------------------------------------------------------------- determinism

_WORKER = """
import hashlib, json, sys, warnings
warnings.filterwarnings("ignore")
from splatlayers.checks import _determinism_worker
print(json.dumps(_determinism_worker(sys.argv[1], int(sys.argv[2]))))
"""


def _determinism_worker(scene_dir: str, seed: int) -> dict:
    import hashlib

    from .assets_io import load_scene
    from .pipeline import FitConfig, Fitter
    from .renderer import set_threads

    rng = np.random.default_rng(seed)
    b = _random_batch(rng, 400, torch.float32, spread=0.4)
    means = b.means.clone().requires_grad_()
    cam = _scene_camera(64)
    scene = load_scene(scene_dir)
    out = {"renders": {}, "logs": {}}
    for n in (1, 3, 8):
        used = set_threads(n)
        means.grad = None
        img = render(b.replace(means=means), cam, background=[1, 1, 1])
        (img.color.sum() + img.alpha.sum()).backward()
        h = hashlib.sha256(img.color.detach().numpy().tobytes() + means.grad.numpy().tobytes())
        out["renders"][used] = h.hexdigest()
        f = Fitter([scene], FitConfig(seed=seed, levels=0, field_res=32))
        out["logs"][used] = [f.step() for _ in range(2)]
    return out


def determinism(seed: int = 0) -> list[CheckResult]:
    from .assets_io import make_toy_scene

    with tempfile.TemporaryDirectory() as tmp:
        make_toy_scene(tmp, seed=seed, views=2, size=32, levels=0)
        env = dict(os.environ, NUMBA_NUM_THREADS="8")
        res = subprocess.run(
            [sys.executable, "-c", _WORKER, tmp, str(seed)], env=env, capture_output=True, text=True, timeout=1800,
        )
    if res.returncode != 0:
        raise RuntimeError(f"determinism worker failed:\n{res.stderr}")
    data = json.loads(res.stdout.strip().splitlines()[-1])
    threads = sorted(int(k) for k in data["renders"])
    renders = len(set(data["renders"].values()))
    logs = [json.dumps(v, sort_keys=True) for v in data["logs"].values()]
    return [
        CheckResult(11, "distinct render+gradient hashes across thread counts", renders == 1, renders, 1,
                    f"threads {threads}"),
        CheckResult(11, "distinct loss logs across thread counts", len(set(logs)) == 1, len(set(logs)), 1,
                    f"threads {threads}"),
    ]


# ---------------------------------------------------------- fit experiments


def overfit_experiment(
    workdir: str | Path, seed: int = 0, iters: int = 2000, size: int = 128, views: int = 8, progress=None,
) -> tuple[list[CheckResult], dict]:
    """Fit the synthetic scene; criteria 6 (overfit, held-out view) and 7
    (body-only PSNR inside the body mask, per-component silhouette IoU)."""
    from .assets_io import load_scene, make_toy_scene
    from .pipeline import FitConfig, fit

    work = Path(workdir)
    make_toy_scene(work / "scene", seed=seed, views=views, size=size)
    scene = load_scene(work / "scene")
    cfg = FitConfig(iters=iters, seed=seed)
    t0 = time.perf_counter()
    first: dict = {}

    def hook(rec):
        if not first:
            first.update(rec)
        if progress is not None:
            progress(rec)

    fitter = fit([scene], cfg, work / "run", progress=hook)
    dt = time.perf_counter() - t0
    train = fitter.evaluate("views")
    held = fitter.evaluate("heldout")
    last = np.mean([m["color"] for m in train])
    ratio = float(last / first["color"])
    report = {"first_color": first["color"], "final_color": float(last), "train": train, "heldout": held,
              "seconds": dt, "iters": iters}
    (work / "overfit.json").write_text(json.dumps(report, indent=1))
    hp = min(m["psnr"] for m in held)
    body = min(m["body_psnr"] for m in train + held)
    body_visible = min(m["body_psnr_visible"] for m in train + held)
    rows = [
        CheckResult(6, "final / first-iteration color loss", ratio <= 0.10, ratio, 0.10, f"{iters} iterations"),
        CheckResult(6, "held-out view PSNR [dB]", hp >= 28.0, hp, 28.0),
        CheckResult(6, "fit runtime [s]", dt <= 7200.0, dt, 7200.0, "", dt),
        CheckResult(7, "body-only PSNR inside pure body mask [dB] (worst view)", body >= 30.0, body, 30.0,
                    f"argmax body mask: {body_visible:.2f} dB"),
    ]
    from .template import LABELS

    for label in LABELS:
        worst = min(m[f"iou_{label}"] for m in train + held if f"iou_{label}" in m)
        rows.append(CheckResult(7, f"{label} silhouette IoU (worst view)", worst >= 0.9, worst, 0.9))
    return rows, report


def prior_experiment(
    workdir: str | Path, seed: int = 0, subjects: int = 8, fit_iters: int = 300, size: int = 64,
    denoiser_iters: int = 3000, samples: int = 4, progress=None,
) -> tuple[list[CheckResult], dict]:
    """Criterion 9: fit several subjects, overfit the toy denoiser on their
    planes, and compare DDPM samples with the nearest training plane."""
    from .assets_io import load_scene, make_toy_scene
    from .diffusion import DiffusionPrior
    from .pipeline import FitConfig, fit

    work = Path(workdir)
    scenes = []
    for k in range(subjects):
        make_toy_scene(work / f"subject_{k}", seed=seed + k, views=4, size=size, subject=f"s{k}")
        scenes.append(load_scene(work / f"subject_{k}"))
    fitter = fit(scenes, FitConfig(iters=fit_iters, seed=seed), work / "run", progress=progress)
    planes = torch.stack([s.avatar.plane.detach() for s in fitter.subjects])
    t0 = time.perf_counter()
    prior = DiffusionPrior(n_iter=denoiser_iters, random_state=seed).fit(planes)
    drawn = prior.sample(samples, random_state=seed + 1)
    dt = time.perf_counter() - t0
    flat = planes.reshape(len(planes), -1).double()
    pair = torch.cdist(flat, flat) ** 2 / flat.shape[1]
    iu = torch.triu_indices(len(planes), len(planes), 1)
    scale = float(pair[iu[0], iu[1]].mean())
    d = torch.cdist(drawn.reshape(samples, -1).double(), flat) ** 2 / flat.shape[1]
    nearest = d.min(1)
    rel = (nearest.values / scale).tolist()
    report = {"inter_plane_mse": scale, "nearest_mse": nearest.values.tolist(), "nearest_index": nearest.indices.tolist(),
              "relative": rel, "denoiser_seconds": dt, "loss_tail": prior.loss_curve_[-20:]}
    (work / "prior.json").write_text(json.dumps(report, indent=1))
    rows = [CheckResult(9, f"sample {i}: nearest-plane MSE / inter-plane MSE", r <= 0.05, r, 0.05,
                        f"nearest plane {nearest.indices[i].item()}") for i, r in enumerate(rel)]
    rows.append(CheckResult(9, "denoiser training + sampling runtime [s]", dt <= 1800.0, dt, 1800.0, "", dt))
    return rows, report


SUITES = {
    "renderer": renderer_oracle,
    "gradients": renderer_gradients,
    "hand": hand_cases,
    "deformation": deformation_rigidity,
    "diffusion": diffusion_algebra,
    "maskin": maskin_constraint,
    "transfer": transfer_correctness,
    "determinism": determinism,
}
EXPERIMENTS = {"overfit": overfit_experiment, "prior": prior_experiment}


def run_suite(name: str, seed: int = 0, workdir: str | Path | None = None) -> list[CheckResult]:
    if name in SUITES:
        return SUITES[name](seed)
    if name in EXPERIMENTS:
        if workdir is None:
            with tempfile.TemporaryDirectory() as tmp:
                return EXPERIMENTS[name](tmp, seed)[0]
        return EXPERIMENTS[name](workdir, seed)[0]
    raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES) + sorted(EXPERIMENTS)} or 'all'")


def as_json(rows: list[CheckResult]) -> list[dict]:
    return [{k: (v if not isinstance(v, float) or math.isfinite(v) else str(v)) for k, v in asdict(r).items()} for r in rows]


__all__ = ["EXPERIMENTS", "SUITES", "CheckResult", "as_json", "overfit_experiment", "prior_experiment", "run_suite"]
