"""Command line entry point: ``splatlayers <command> [flags]``.

Exit codes: 0 success, 1 invalid input or failed check, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("splatlayers")


class UsageError(Exception):
    """Bad command line or input data; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--threads", type=int, default=1, help="rasterizer threads; results do not depend on it")
    p.add_argument("--config", type=Path, help="JSON file whose keys override command defaults")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="splatlayers", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-toy-scene", parents=[common], help="write a synthetic multi-view scene")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--levels", type=int, default=1, help="template subdivision levels")
    p.add_argument("--subjects", type=int, default=1, help="several subjects go to OUT/subject_K")
    p.add_argument("--noise-rate", type=float, default=0.0, help="salt noise rate on segmentation")
    p.add_argument("--noise-views", type=int, default=0, help="views receiving segmentation noise (<= 2)")

    p = sub.add_parser("fit", parents=[common], help="jointly fit planes, decoders and denoiser")
    p.add_argument("--data", type=Path, required=True, help="scene directory or a directory of scenes")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--iters", type=int)

    p = sub.add_parser("render", parents=[common], help="render an avatar checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scene", type=Path, help="use this scene's cameras instead of a ring")
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--component", help="render a single component label")
    p.add_argument("--raw", action="store_true", help="also write lossless float dumps")

    p = sub.add_parser("animate", parents=[common], help="render a pose sequence")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--poses", type=Path, required=True, help="JSON list of frames")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--view", type=int, default=0, help="ring camera index")
    p.add_argument("--views", type=int, default=8, help="ring size")
    p.add_argument("--size", type=int, default=128)

    p = sub.add_parser("transfer", parents=[common], help="copy one component from source into target")
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("sample", parents=[common], help="draw a plane from a trained denoiser")
    p.add_argument("--checkpoint", type=Path, required=True, help="denoiser checkpoint")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--avatar", type=Path, help="wrap the sample with this avatar's decoders and body")

    p = sub.add_parser("export-ply", parents=[common], help="write an avatar's Gaussians as PLY")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ascii", action="store_true")
    p.add_argument("--canonical", action="store_true", help="export before shaping and posing")

    p = sub.add_parser("check", parents=[common], help="run oracle suites")
    p.add_argument("--suite", default="all", help="suite name, or 'all' for every fast suite")
    p.add_argument("--workdir", type=Path, help="working directory for the fitting experiments")
    p.add_argument("--json", type=Path, help="write results as JSON")
    return parser


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


# ------------------------------------------------------------------ commands


def cmd_make_toy_scene(args) -> int:
    from .assets_io import make_toy_scene

    if args.subjects < 1:
        raise UsageError("--subjects must be at least 1")
    for k in range(args.subjects):
        out = args.out if args.subjects == 1 else args.out / f"subject_{k}"
        path = make_toy_scene(
            out, seed=args.seed + k, views=args.views, size=args.size, levels=args.levels,
            noise_rate=args.noise_rate, noise_views=args.noise_views,
        )
        print(path)
    return 0


def cmd_fit(args) -> int:
    from .assets_io import find_scenes, load_scene
    from .pipeline import FitConfig, fit

    cfg_dict = _load_config(args.config)
    cfg_dict["seed"] = args.seed
    if args.iters is not None:
        cfg_dict["iters"] = args.iters
    config = FitConfig.from_json(cfg_dict)
    scenes = [load_scene(p) for p in find_scenes(_require(args.data, "data directory"))]

    def progress(rec):
        log.info("iter %d total %.5f color %.5f", rec["iter"], rec.get("total", float("nan")), rec.get("color", 0.0))

    fitter = fit(scenes, config, args.out, progress=progress)
    print(args.out / "checkpoints" / f"iter_{fitter.iteration}")
    return 0


def _cameras(args):
    from .assets_io import load_scene, toy_cameras

    if args.scene is not None:
        s = load_scene(_require(args.scene, "scene"))
        return [v.camera for v in s.views + s.heldout], s.background
    return toy_cameras(args.views, args.size), np.ones(3)


def _posed(loaded, canonical_only=False):
    import torch

    from .pipeline import decode_avatar

    template = loaded.template()
    with torch.no_grad():
        dec = decode_avatar(loaded.avatar, loaded.decoders, template, loaded.model, max_offset=loaded.max_offset)
    return dec.canonical if canonical_only else dec.posed


def cmd_render(args) -> int:
    import torch

    from .assets_io import save_png, save_raw
    from .pipeline import load_avatar
    from .renderer import render
    from .template import LABELS

    loaded = load_avatar(_require(args.checkpoint, "checkpoint"))
    posed = _posed(loaded)
    if args.component is not None:
        if args.component not in LABELS:
            raise UsageError(f"unknown component {args.component!r}; expected one of {', '.join(LABELS)}")
        posed = posed.component(args.component)
    cams, bg = _cameras(args)
    args.out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for i, cam in enumerate(cams):
            out = render(posed, cam, bg)
            save_png(args.out / f"view_{i:02d}.png", out.color.numpy())
            if args.raw:
                save_raw(args.out / f"view_{i:02d}.lavt", out.color.numpy())
    print(args.out)
    return 0


def cmd_animate(args) -> int:
    from .assets_io import save_png, toy_cameras
    from .pipeline import animate, load_avatar, load_pose_sequence

    loaded = load_avatar(_require(args.checkpoint, "checkpoint"))
    frames = load_pose_sequence(_require(args.poses, "pose file"), loaded.model, loaded.avatar.params)
    cams = toy_cameras(args.views, args.size)
    if not 0 <= args.view < len(cams):
        raise UsageError(f"--view must be in [0, {len(cams) - 1}]")
    images = animate(loaded, frames, cams[args.view])
    args.out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_png(args.out / f"frame_{i:04d}.png", img)
    print(args.out)
    return 0


def cmd_transfer(args) -> int:
    from .pipeline import load_avatar, save_avatar, transfer_component
    from .template import LABELS

    if args.label not in LABELS:
        raise UsageError(f"unknown component {args.label!r}; expected one of {', '.join(LABELS)}")
    target = load_avatar(_require(args.target, "target checkpoint"))
    source = load_avatar(_require(args.source, "source checkpoint"))
    out = transfer_component(target.avatar, source.avatar, args.label)
    save_avatar(args.out, out, target.decoders, target.model, target.levels, target.max_offset, target.field_res)
    print(args.out)
    return 0


def cmd_sample(args) -> int:
    from .diffusion import Schedule, ddpm_sample
    from .pipeline import AvatarInstance, load_avatar, load_denoiser, save_avatar
    from .tensor_core import save_tensors

    den = load_denoiser(_require(args.checkpoint, "denoiser checkpoint"))
    if den.pos is None:
        raise UsageError("this denoiser has no plane size; sample needs a positional denoiser")
    shape = (1, den.conv_in.in_channels) + tuple(den.pos.shape[1:])
    plane = ddpm_sample(den, Schedule(), args.seed, shape, args.steps)[0]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    if args.avatar is not None:
        base = load_avatar(_require(args.avatar, "avatar checkpoint"))
        av = AvatarInstance(f"sample{args.seed}", plane, base.avatar.params)
        save_avatar(args.out, av, base.decoders, base.model, base.levels, base.max_offset, base.field_res)
    else:
        save_tensors(args.out, {"plane": plane})
    print(args.out)
    return 0


def cmd_export_ply(args) -> int:
    from .assets_io import export_ply
    from .pipeline import load_avatar

    loaded = load_avatar(_require(args.checkpoint, "checkpoint"))
    batch = _posed(loaded, canonical_only=args.canonical)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    export_ply(batch, args.out, binary=not args.ascii)
    print(args.out)
    return 0


def cmd_check(args) -> int:
    from .checks import EXPERIMENTS, SUITES, as_json, run_suite

    names = list(SUITES) if args.suite == "all" else [args.suite]
    for n in names:
        if n not in SUITES and n not in EXPERIMENTS:
            raise UsageError(f"unknown suite {n!r}; choose from {', '.join(list(SUITES) + list(EXPERIMENTS))} or all")
    rows = []
    for n in names:
        wd = None if args.workdir is None else args.workdir / n
        for r in run_suite(n, args.seed, wd):
            print(r.line(), flush=True)
            rows.append(r)
    if args.json is not None:
        args.json.write_text(json.dumps(as_json(rows), indent=1))
    failed = sum(not r.passed for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return 0 if failed == 0 else 1


COMMANDS = {
    "make-toy-scene": cmd_make_toy_scene, "fit": cmd_fit, "render": cmd_render, "animate": cmd_animate,
    "transfer": cmd_transfer, "sample": cmd_sample, "export-ply": cmd_export_ply, "check": cmd_check,
}


def _apply_config(args, parser) -> None:
    """Copy JSON config keys onto flags the user left at their defaults."""
    if args.command == "fit" or args.config is None:
        return
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    for key, value in _load_config(args.config).items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("help", "config"):
            raise UsageError(f"config key {key!r} is not a flag of {args.command}")
        a = actions[dest]
        if getattr(args, dest) == a.default:
            setattr(args, dest, a.type(value) if a.type is not None and value is not None else value)


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(args, parser)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 1
    from .renderer import set_threads

    set_threads(args.threads)
    from .assets_io import SceneError
    from .body_model import ModelError
    from .tensor_core import ShapeError

    try:
        return COMMANDS[args.command](args)
    except (UsageError, SceneError, ModelError, ShapeError, KeyError, ValueError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
