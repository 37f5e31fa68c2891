import hashlib
import json
import shutil

import numpy as np
import pytest
import torch
from conftest import random_batch

from splatlayers.assets_io import (
    ImageDecodeError,
    SceneError,
    export_ply,
    find_scenes,
    import_ply,
    load_raw,
    load_scene,
    make_toy_scene,
    read_png,
    save_png,
    save_raw,
    toy_cameras,
)
from splatlayers.template import LABELS


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def small_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    make_toy_scene(out, seed=2, views=3, size=24, levels=0)
    return out


# ---------------------------------------------------------------------- PLY

@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(rng, tmp_path, binary):
    b = random_batch(rng, 37, dtype=torch.float32)
    export_ply(b, tmp_path / "g.ply", binary=binary)
    back = import_ply(tmp_path / "g.ply")
    assert len(back) == 37
    for k in ("means", "scales", "opacities", "colors", "rotations"):
        assert torch.max(torch.abs(getattr(back, k) - getattr(b, k))) <= 1e-6, k
    assert np.array_equal(np.asarray(back.labels), np.asarray(b.labels))


def test_ply_header_and_unit_quaternions(rng, tmp_path):
    export_ply(random_batch(rng, 20), tmp_path / "g.ply")
    raw = (tmp_path / "g.ply").read_bytes()
    header = raw[: raw.index(b"end_header")].decode().splitlines()
    assert "format binary_little_endian 1.0" in header and "element vertex 20" in header
    props = [line.split()[-1] for line in header if line.startswith("property")]
    assert props == ["x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
                     "rot_0", "rot_1", "rot_2", "rot_3", "red", "green", "blue", "label"]
    body = raw[raw.index(b"end_header\n") + 11 :]
    rec = np.frombuffer(body, dtype=[(p, "<f4") for p in props[:-1]] + [("label", "<i4")])
    q = np.stack([rec[f"rot_{i}"] for i in range(4)], 1)
    assert np.max(np.abs(np.linalg.norm(q, axis=1) - 1)) <= 1e-6


def test_ply_empty_and_invalid(tmp_path):
    export_ply(random_batch(np.random.default_rng(0), 0), tmp_path / "e.ply")
    assert len(import_ply(tmp_path / "e.ply")) == 0
    (tmp_path / "x.ply").write_bytes(b"not a ply")
    with pytest.raises(SceneError, match="not a PLY"):
        import_ply(tmp_path / "x.ply")


# ------------------------------------------------------------------- images

def test_png_round_trip(rng, tmp_path):
    img = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    save_png(tmp_path / "a.png", img)
    assert np.array_equal(read_png(tmp_path / "a.png"), img)
    save_png(tmp_path / "b.png", img / 255.0)
    assert np.array_equal(read_png(tmp_path / "b.png"), img)


def test_corrupt_png(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"\x89PNG\r\n\x1a\n garbage")
    with pytest.raises(ImageDecodeError, match="bad.png"):
        read_png(tmp_path / "bad.png")
    with pytest.raises(SceneError, match="missing file"):
        read_png(tmp_path / "none.png")


def test_raw_dump_lossless(rng, tmp_path):
    img = rng.uniform(size=(4, 6, 3)).astype(np.float32)
    save_raw(tmp_path / "r.lavt", img)
    assert np.array_equal(load_raw(tmp_path / "r.lavt"), img)


# ---------------------------------------------------------------- scenes

def test_manifest_loads(small_dir):
    s = load_scene(small_dir)
    assert s.subject == "toy2" and len(s.views) == 3 and len(s.heldout) == 1
    v = s.views[0]
    assert v.truth.rgb.shape == (24, 24, 3) and v.camera.width == 24
    assert float(v.truth.rgb.min()) >= 0 and float(v.truth.rgb.max()) <= 1
    assert set(np.unique(v.truth.fg.numpy())) <= {0.0, 1.0}
    assert s.load_model().n_joints > 0


def test_manifest_round_trip_lossless(small_dir, tmp_path):
    s = load_scene(small_dir)
    manifest = json.loads((small_dir / "manifest.json").read_text())
    copy = tmp_path / "copy"
    shutil.copytree(small_dir, copy)
    (copy / "manifest.json").write_text(json.dumps(manifest))
    t = load_scene(copy)
    for a, b in zip(s.views, t.views):
        assert torch.equal(a.truth.rgb, b.truth.rgb) and np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.camera.world_to_camera, b.camera.world_to_camera)
    np.testing.assert_array_equal(s.params.pose, t.params.pose)
    # cameras survive the JSON trip exactly
    for v, cam in zip(s.views, toy_cameras(3, 24)):
        assert np.array_equal(v.camera.world_to_camera, cam.world_to_camera) and v.camera.fx == cam.fx


def test_masks_partition_foreground(small_dir):
    for v in load_scene(small_dir).views:
        stack = np.stack([v.truth.components[k].numpy() for k in LABELS])
        assert np.array_equal(stack.sum(0), v.truth.fg.numpy())
        assert v.truth.fg.sum() > 0


def test_components_derived_from_segmentation(small_dir, tmp_path):
    copy = tmp_path / "derived"
    shutil.copytree(small_dir, copy)
    m = json.loads((copy / "manifest.json").read_text())
    for v in m["views"]:
        v["components"] = {}
    (copy / "manifest.json").write_text(json.dumps(m))
    a, b = load_scene(small_dir), load_scene(copy)
    for va, vb in zip(a.views, b.views):
        for k in LABELS:
            assert torch.equal(va.truth.components[k], vb.truth.components[k])


def test_loading_does_not_touch_files(small_dir):
    before = tree_digest(small_dir)
    load_scene(small_dir)
    assert tree_digest(small_dir) == before


def test_missing_file_named(small_dir, tmp_path):
    copy = tmp_path / "missing"
    shutil.copytree(small_dir, copy)
    (copy / "views" / "01_fg.png").unlink()
    with pytest.raises(SceneError, match="01_fg.png"):
        load_scene(copy)
    with pytest.raises(SceneError, match="missing file"):
        load_scene(tmp_path / "nowhere")


def test_size_mismatch(small_dir, tmp_path):
    copy = tmp_path / "mismatch"
    shutil.copytree(small_dir, copy)
    save_png(copy / "views" / "00_rgb.png", np.zeros((10, 10, 3)))
    with pytest.raises(SceneError, match="does not match"):
        load_scene(copy)


def test_regeneration_byte_identical(small_dir, tmp_path):
    make_toy_scene(tmp_path, seed=2, views=3, size=24, levels=0)
    assert tree_digest(tmp_path) == tree_digest(small_dir)


def test_noise_injection_limits(tmp_path):
    with pytest.raises(ValueError, match="at most 2"):
        make_toy_scene(tmp_path, noise_views=3, noise_rate=0.1)
    make_toy_scene(tmp_path / "n", seed=2, views=3, size=24, levels=0, noise_rate=0.2, noise_views=1)
    clean = load_scene(tmp_path / "n")
    assert clean.views[0].truth.fg.sum() > 0


def test_find_scenes(small_dir, tmp_path):
    assert find_scenes(small_dir) == [small_dir / "manifest.json"]
    shutil.copytree(small_dir, tmp_path / "b")
    shutil.copytree(small_dir, tmp_path / "a")
    assert [p.parent.name for p in find_scenes(tmp_path)] == ["a", "b"]
    with pytest.raises(SceneError):
        find_scenes(tmp_path / "a" / "views")


def test_layer_images_match_ground_truth_components(small_dir):
    from splatlayers.pipeline import psnr
    from splatlayers.renderer import render

    s = load_scene(small_dir)
    gt = import_ply(small_dir / "gt.ply")
    for v in s.views + s.heldout:
        assert set(v.layers) == set(LABELS)
        for label in LABELS:
            ref = render(gt.component(label), v.camera, s.background).color.numpy()
            # only 8-bit quantisation separates the stored layer from a fresh render
            assert psnr(v.layers[label], ref) > 45.0, label


def test_pure_pixels_show_only_their_component(small_dir):
    from splatlayers.pipeline import psnr

    for v in load_scene(small_dir).views:
        for label in LABELS:
            pure = v.pure[label]
            assert not np.any(pure & (v.labels != LABELS.index(label)))
            if pure.any():
                assert psnr(v.truth.rgb.numpy(), v.layers[label], pure) > 45.0, label
