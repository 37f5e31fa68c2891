import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from splatlayers.assets_io import import_ply, load_raw, read_png
from splatlayers.cli import run
from splatlayers.pipeline import decode_avatar, load_avatar
from splatlayers.renderer import render

FAST = {"levels": 0, "field_res": 32, "scenes_per_iter": 2}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["make-toy-scene", "--out", str(root / "toy"), "--views", "2", "--size", "32",
                "--levels", "0", "--subjects", "2", "--seed", "4"]) == 0
    (root / "fast.json").write_text(json.dumps(FAST))
    assert run(["fit", "--data", str(root / "toy"), "--out", str(root / "run"), "--iters", "2",
                "--seed", "7", "--config", str(root / "fast.json")]) == 0
    return root


def ckpt(root, k):
    return root / "run" / "checkpoints" / "iter_2" / f"avatar_toy{4 + k}.ckpt"


def test_help_and_bad_flags(capsys):
    assert run(["--help"]) == 0
    assert run(["check", "--suite", "hand", "--bogus"]) == 1
    assert "unrecognized arguments" in capsys.readouterr().err
    assert run(["check", "--suite", "nonsense"]) == 1
    assert run(["render", "--checkpoint", "/no/such.ckpt", "--out", "/tmp/x"]) == 1
    assert run(["check", "--suite", "hand", "--threads", "0"]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "splatlayers", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "make-toy-scene" in proc.stdout


def test_check_renderer_exits_zero(capsys):
    assert run(["check", "--suite", "renderer"]) == 0
    out = capsys.readouterr().out
    assert "[PASS]" in out and "[FAIL]" not in out


def test_make_toy_scene_layout(workspace):
    for k in (0, 1):
        d = workspace / "toy" / f"subject_{k}"
        m = json.loads((d / "manifest.json").read_text())
        assert m["subject"] == f"toy{4 + k}" and len(m["views"]) == 2
        assert read_png(d / m["views"][0]["rgb"]).shape == (32, 32, 3)


def test_fit_is_reproducible(workspace):
    again = workspace / "run_again"
    assert run(["fit", "--data", str(workspace / "toy"), "--out", str(again), "--iters", "2",
                "--seed", "7", "--config", str(workspace / "fast.json")]) == 0
    a = (workspace / "run" / "losses.jsonl").read_text()
    assert a == (again / "losses.jsonl").read_text()
    assert len(a.splitlines()) == 2


def test_fit_rejects_bad_config(workspace, tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"no_such_key": 1}))
    assert run(["fit", "--data", str(workspace / "toy"), "--out", str(tmp_path / "r"),
                "--config", str(tmp_path / "bad.json")]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert run(["fit", "--data", str(workspace / "toy"), "--out", str(tmp_path / "r"),
                "--config", str(tmp_path / "broken.json")]) == 1


def test_transfer_then_render_differs_only_in_component(workspace, tmp_path):
    a, b = ckpt(workspace, 0), ckpt(workspace, 1)
    c = tmp_path / "c.ckpt"
    assert run(["transfer", "--target", str(a), "--source", str(b), "--label", "top", "--out", str(c)]) == 0
    for name, path in (("a", a), ("c", c)):
        assert run(["render", "--checkpoint", str(path), "--out", str(tmp_path / name),
                    "--views", "3", "--size", "32", "--raw"]) == 0

    # pixels the top component covers before or after the swap
    la, lc = load_avatar(a), load_avatar(c)
    assert run(["transfer", "--target", str(a), "--source", str(b), "--label", "nope", "--out", str(c)]) == 1
    from splatlayers.assets_io import toy_cameras

    changed_total = 0
    for i, cam in enumerate(toy_cameras(3, 32)):
        ia = load_raw(tmp_path / "a" / f"view_{i:02d}.lavt")
        ic = load_raw(tmp_path / "c" / f"view_{i:02d}.lavt")
        region = np.zeros((32, 32), bool)
        for loaded in (la, lc):
            with torch.no_grad():
                posed = decode_avatar(loaded.avatar, loaded.decoders, loaded.template(), loaded.model,
                                      max_offset=loaded.max_offset).posed
                sil = render(posed.component("top"), cam, np.ones(3), mode="silhouette").alpha
            region |= sil.numpy() > 0
        diff = np.abs(ia - ic).max(-1) > 0
        assert not np.any(diff & ~region)
        changed_total += int(diff.sum())
    assert changed_total > 0


def test_render_component_and_scene_cameras(workspace, tmp_path):
    assert run(["render", "--checkpoint", str(ckpt(workspace, 0)), "--out", str(tmp_path / "r"),
                "--scene", str(workspace / "toy" / "subject_0"), "--component", "hair"]) == 0
    assert len(list((tmp_path / "r").glob("view_*.png"))) == 3  # 2 views + 1 held out
    assert run(["render", "--checkpoint", str(ckpt(workspace, 0)), "--out", str(tmp_path / "r"),
                "--component", "cape"]) == 1


def test_export_ply(workspace, tmp_path):
    assert run(["export-ply", "--checkpoint", str(ckpt(workspace, 0)), "--out", str(tmp_path / "a.ply")]) == 0
    assert run(["export-ply", "--checkpoint", str(ckpt(workspace, 0)), "--out", str(tmp_path / "b.ply"),
                "--ascii", "--canonical"]) == 0
    a, b = import_ply(tmp_path / "a.ply"), import_ply(tmp_path / "b.ply")
    assert len(a) == len(b) > 0
    assert torch.equal(a.opacities, b.opacities)


def test_animate(workspace, tmp_path):
    loaded = load_avatar(ckpt(workspace, 0))
    pose = np.zeros((loaded.model.n_joints, 3))
    bent = pose.copy()
    bent[1, 0] = 0.6
    (tmp_path / "poses.json").write_text(json.dumps([{"pose": pose.tolist()}, {"pose": bent.tolist()}]))
    assert run(["animate", "--checkpoint", str(ckpt(workspace, 0)), "--poses", str(tmp_path / "poses.json"),
                "--out", str(tmp_path / "anim"), "--size", "32"]) == 0
    frames = sorted((tmp_path / "anim").glob("frame_*.png"))
    assert len(frames) == 2
    assert not np.array_equal(read_png(frames[0]), read_png(frames[1]))
    (tmp_path / "bad.json").write_text(json.dumps([{"pose": [[0, 0]]}]))
    assert run(["animate", "--checkpoint", str(ckpt(workspace, 0)), "--poses", str(tmp_path / "bad.json"),
                "--out", str(tmp_path / "anim")]) == 1


def test_sample(workspace, tmp_path):
    den = workspace / "run" / "checkpoints" / "iter_2" / "denoiser.ckpt"
    assert run(["sample", "--checkpoint", str(den), "--steps", "3", "--out", str(tmp_path / "s.ckpt"),
                "--avatar", str(ckpt(workspace, 0)), "--seed", "1"]) == 0
    s = load_avatar(tmp_path / "s.ckpt")
    assert tuple(s.avatar.plane.shape) == tuple(load_avatar(ckpt(workspace, 0)).avatar.plane.shape)
    assert torch.isfinite(s.avatar.plane).all()
    assert run(["sample", "--checkpoint", str(den), "--steps", "3", "--out", str(tmp_path / "p.lavt")]) == 0


def test_config_file_feeds_flags(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"views": 2, "size": 16, "levels": 0}))
    assert run(["make-toy-scene", "--out", str(tmp_path / "s"), "--config", str(tmp_path / "c.json")]) == 0
    m = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert len(m["views"]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({"colour": 1}))
    assert run(["make-toy-scene", "--out", str(tmp_path / "t"), "--config", str(tmp_path / "bad.json")]) == 1
