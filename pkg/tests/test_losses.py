import logging
from dataclasses import replace

import numpy as np
import pytest
import torch
from conftest import random_batch
from hypothesis import given, settings
from hypothesis import strategies as st

from splatlayers.feature_plane import AttributeMaps
from splatlayers.losses import (
    DEFAULT_SKIN,
    LossWeights,
    ViewTruth,
    maskin_loss,
    occluded_mask,
    recon_loss,
    reg_loss,
    segmentation_one_hot,
    skin_color,
    skin_loss,
    total_variation,
)
from splatlayers.renderer import RenderOutput, look_at, render
from splatlayers.template import LABELS
from splatlayers.tensor_core import ShapeError

F64 = torch.float64
ZERO = LossWeights(**{k: 0.0 for k in LossWeights().to_json()})


def make_truth(rng, h=12, w=10):
    labels = rng.integers(-1, 5, (h, w))
    fg = torch.tensor(labels >= 0, dtype=F64)
    comps = {lab: torch.tensor(labels == k, dtype=F64) for k, lab in enumerate(LABELS)}
    return ViewTruth(torch.tensor(rng.uniform(0, 1, (h, w, 3))), fg, comps, segmentation_one_hot(labels).double())


def perfect_renders(truth):
    full = RenderOutput(truth.rgb.clone(), truth.fg.clone())
    comps = {k: RenderOutput(truth.rgb.clone(), m.clone()) for k, m in truth.components.items()}
    return full, comps, truth.segmentation.clone()


def test_paper_weights():
    w = LossWeights()
    assert (w.color, w.mask, w.per, w.seg, w.maskin, w.skin, w.offset, w.smooth) == (18, 9, 0.05, 9, 5, 0.5, 5, 0.5)
    with pytest.raises(ValueError, match="non-negative"):
        LossWeights(color=-1.0)


# -------------------------------------------------------------- recon_loss

def test_perfect_render_is_zero(rng):
    truth = make_truth(rng)
    total, parts = recon_loss(*perfect_renders(truth), truth, LossWeights())
    assert float(total) == 0.0
    assert all(float(v) == 0.0 for v in parts.values())


def test_white_on_black_linear_branch():
    h, w = 6, 5
    truth = ViewTruth(torch.zeros(h, w, 3, dtype=F64), torch.zeros(h, w, dtype=F64), {}, torch.zeros(h, w, 5, dtype=F64))
    full = RenderOutput(torch.ones(h, w, 3, dtype=F64), torch.zeros(h, w, dtype=F64))
    total, _ = recon_loss(full, {}, torch.zeros(h, w, 5, dtype=F64), truth, replace(ZERO, color=18.0), delta=0.1)
    assert abs(float(total) - 1.71) <= 1e-12


def test_missing_component_render(rng):
    truth = make_truth(rng)
    full, comps, seg = perfect_renders(truth)
    del comps["hair"]
    with pytest.raises(ValueError, match="hair"):
        recon_loss(full, comps, seg, truth, LossWeights())


def test_perceptual_hook_is_used(rng):
    truth = make_truth(rng)
    full, comps, seg = perfect_renders(truth)
    _, parts = recon_loss(full, comps, seg, truth, LossWeights(), perceptual=lambda a, b: torch.tensor(2.0, dtype=F64))
    assert float(parts["per"]) == pytest.approx(0.1)
    _, parts = recon_loss(full, comps, seg, truth, LossWeights())
    assert float(parts["per"]) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["color", "mask", "seg"]))
def test_weights_scale_linearly(seed, key):
    rng = np.random.default_rng(seed)
    truth = make_truth(rng)
    full = RenderOutput(torch.tensor(rng.uniform(0, 1, (12, 10, 3))), torch.tensor(rng.uniform(0, 1, (12, 10))))
    comps = {k: RenderOutput(torch.tensor(rng.uniform(0, 1, (12, 10, 3))), torch.tensor(rng.uniform(0, 1, (12, 10))))
             for k in LABELS}
    seg = torch.tensor(rng.uniform(0, 1, (12, 10, 5)))
    w = LossWeights()
    total, a = recon_loss(full, comps, seg, truth, w)
    _, b = recon_loss(full, comps, seg, truth, replace(w, **{key: 2 * getattr(w, key)}))
    assert float(total) >= 0.0
    for k in a:
        doubled = k == key or (key == "color" and k == "comp_color") or (key == "mask" and k == "comp_mask")
        assert float(b[k]) == (2 * float(a[k]) if doubled else float(a[k])), k


def test_line_search_descent(rng):
    cam = look_at([0, 0, 3], [0, 0, 0], fx=30, width=24, height=24)
    target = random_batch(rng, 40, spread=0.3, scale=(0.05, 0.2))
    t_out = render(target, cam, background=[1, 1, 1], mode="color+segmentation")
    fg = (t_out.alpha > 0.5).double()
    labels = np.where(fg.numpy() > 0, t_out.labels.argmax(-1).numpy(), -1)
    comps = {lab: torch.tensor(labels == k, dtype=F64) for k, lab in enumerate(LABELS)}
    truth = ViewTruth(t_out.color.detach(), fg, comps, segmentation_one_hot(labels).double())
    start = random_batch(np.random.default_rng(9), 40, spread=0.3, scale=(0.05, 0.2))

    def objective(colors, means):
        b = start.replace(colors=colors, means=means)
        full = render(b, cam, background=[1, 1, 1], mode="color+segmentation")
        parts = {lab: render(b.component(lab), cam, background=[1, 1, 1]) for lab in LABELS}
        return recon_loss(RenderOutput(full.color, full.alpha), parts, full.labels, truth, LossWeights())[0]

    colors = start.colors.clone().requires_grad_()
    means = start.means.clone().requires_grad_()
    loss = objective(colors, means)
    loss.backward()
    values = [float(loss.detach())]
    with torch.no_grad():
        for step in (1e-3, 2e-3, 4e-3):
            values.append(float(objective(colors - step * colors.grad, means - step * means.grad)))
    assert all(b < a for a, b in zip(values, values[1:])), values


# ------------------------------------------------------------------ maskin

def test_maskin_zero_inside_foreground():
    fg = torch.zeros(10, 10, dtype=F64)
    fg[2:8, 2:8] = 1.0
    sil = torch.zeros(10, 10, dtype=F64)
    sil[3:7, 3:7] = 0.9
    assert float(maskin_loss(sil, fg)) == 0.0


def test_maskin_violating_area():
    fg = torch.zeros(10, 10, dtype=F64)
    fg[:, :5] = 1.0
    sil = torch.zeros(10, 10, dtype=F64)
    sil[:, :7] = 1.0  # 2 columns outside: 20% of pixels
    assert abs(float(maskin_loss(sil, fg, weight=5.0)) - 5.0 * 0.2) <= 1e-12


def test_maskin_shape_mismatch():
    with pytest.raises(ShapeError):
        maskin_loss(torch.zeros(4, 4), torch.zeros(4, 5))


def test_maskin_has_no_opacity_gradient(rng):
    cam = look_at([0, 0, 3], [0, 0, 0], fx=30, width=20, height=20)
    b = random_batch(rng, 25, spread=0.3)
    fg = torch.zeros(20, 20, dtype=F64)
    fg[5:15, 5:15] = 1.0
    op = b.opacities.clone().requires_grad_()
    means = b.means.clone().requires_grad_()

    def loss(o, m):
        sil = render(b.replace(opacities=o, means=m), cam, mode="silhouette_detached_full_opacity").alpha
        return maskin_loss(sil, fg)

    value = loss(op, means)
    assert float(value) > 0
    value.backward()
    assert op.grad is None or torch.count_nonzero(op.grad) == 0
    assert torch.count_nonzero(means.grad) > 0
    # finite-difference probe on every opacity
    with torch.no_grad():
        for i in range(25):
            bumped = op.detach().clone()
            bumped[i] = bumped[i] * 0.5
            assert float(loss(bumped, means)) == float(value)


# -------------------------------------------------------------------- skin

def test_skin_zero_when_matching():
    c = torch.tensor([0.7, 0.5, 0.4], dtype=F64)
    body = c.expand(8, 8, 3).clone()
    occ = torch.ones(8, 8, dtype=F64)
    assert float(skin_loss(body, occ, c)) == 0.0


def test_skin_empty_occlusion_is_zero(rng):
    body = torch.tensor(rng.uniform(size=(8, 8, 3)))
    assert float(skin_loss(body, torch.zeros(8, 8, dtype=F64), torch.tensor(DEFAULT_SKIN))) == 0.0


def test_skin_constant_field():
    c0 = torch.tensor([0.9, 0.2, 0.5], dtype=F64)
    cs = torch.tensor([0.6, 0.25, 0.5], dtype=F64)
    occ = torch.zeros(8, 8, dtype=F64)
    occ[2:5] = 1.0
    body = c0.expand(8, 8, 3).clone()
    d = (c0 - cs).abs()
    hub = torch.where(d <= 0.1, 0.5 * d * d, 0.1 * (d - 0.05)).mean()
    assert abs(float(skin_loss(body, occ, cs, weight=0.5)) - 0.5 * float(hub)) <= 1e-15


def test_skin_color_mean_over_hand_pixels():
    rgb = torch.zeros(4, 4, 3, dtype=F64)
    rgb[0, 0] = torch.tensor([1.0, 0.0, 0.0])
    rgb[0, 1] = torch.tensor([0.0, 1.0, 0.0])
    hand = torch.zeros(4, 4, dtype=F64)
    hand[0, :2] = 0.7
    hand[3, 3] = 0.5  # not above the threshold
    assert skin_color(rgb, hand).tolist() == [0.5, 0.5, 0.0]


def test_skin_color_fallback_warns(caplog):
    with caplog.at_level(logging.WARNING):
        c = skin_color(torch.zeros(4, 4, 3), torch.zeros(4, 4))
    assert c.tolist() == pytest.approx(list(DEFAULT_SKIN))
    assert "default skin" in caplog.text


def test_occluded_mask_is_exterior_union_inside_fg(rng):
    truth = make_truth(rng)
    occ = occluded_mask(truth.components, truth.fg)
    labels = truth.segmentation.argmax(-1).numpy()
    expect = (truth.fg.numpy() > 0) & (labels != 0)
    assert np.array_equal(occ.numpy() > 0, expect)


# --------------------------------------------------------------------- reg

def maps_from(stacked):
    cols = {"offset": 3, "opacity": 1, "color": 3, "rotation": 3, "scale": 3}
    out, c = {}, 0
    for k, n in cols.items():
        out[k] = stacked[:, c : c + n]
        c += n
    return AttributeMaps(**out)


def test_reg_zero_for_constant_maps():
    stacked = torch.zeros(3, 13, 8, 8, dtype=F64)
    stacked[:, 3:] = 0.4
    total, parts = reg_loss(maps_from(stacked), torch.zeros(50, 3, dtype=F64), LossWeights())
    assert float(total) == 0.0


def test_tv_step_edge():
    h, w, step = 6, 8, 0.3
    m = torch.zeros(1, 1, h, w, dtype=F64)
    m[..., w // 2 :] = step
    expect = h * step**2 / (h * (w - 1) + (h - 1) * w)
    assert abs(float(total_variation(m)) - expect) <= 1e-15


def test_tv_ignores_layer_seams():
    stacked = torch.zeros(3, 13, 8, 8, dtype=F64)
    stacked[1] = 1.0
    stacked[2] = -0.5
    assert float(total_variation(stacked)) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_tv_shift_invariant(seed, shift):
    m = torch.tensor(np.random.default_rng(seed).normal(size=(2, 3, 6, 6)))
    assert abs(float(total_variation(m + shift)) - float(total_variation(m))) <= 1e-12


def test_tv_gradient_finite_differences(rng):
    x = torch.tensor(rng.normal(size=(1, 1, 8, 8)), requires_grad=True)
    total_variation(x).backward()
    h = 1e-3
    with torch.no_grad():
        for i in np.ndindex(8, 8):
            p = x.detach().clone()
            p[0, 0][i] += h
            up = total_variation(p)
            p[0, 0][i] -= 2 * h
            fd = float(up - total_variation(p)) / (2 * h)
            an = float(x.grad[0, 0][i])
            assert abs(fd - an) <= 1e-4 * max(abs(fd), 1e-8), (i, fd, an)


def test_offset_term_mean_square():
    off = torch.tensor([[0.1, 0.0, 0.0], [0.0, 0.2, 0.2]], dtype=F64)
    stacked = torch.zeros(3, 13, 4, 4, dtype=F64)
    _, parts = reg_loss(maps_from(stacked), off, replace(ZERO, offset=5.0))
    assert abs(float(parts["offset"]) - 5.0 * (0.01 + 0.08) / 2) <= 1e-15


def test_view_truth_shape_checks():
    with pytest.raises(ShapeError, match="rgb"):
        ViewTruth(torch.zeros(4, 5, 3), torch.zeros(4, 4), {}, torch.zeros(4, 4, 5))
    with pytest.raises(ShapeError, match="component"):
        ViewTruth(torch.zeros(4, 4, 3), torch.zeros(4, 4), {"top": torch.zeros(3, 4)}, torch.zeros(4, 4, 5))


@pytest.mark.parametrize("scope", ["others", "body_occluded", "all"])
def test_mask_scope_hand_values(rng, scope):
    truth = make_truth(rng)
    full, comps, seg = perfect_renders(truth)
    # body and top both claim the whole foreground
    comps["body"] = RenderOutput(comps["body"].color, truth.fg.clone())
    comps["top"] = RenderOutput(comps["top"].color, truth.fg.clone())
    _, parts = recon_loss(full, comps, seg, truth, LossWeights(), mask_scope=scope)
    n = truth.fg.numel()
    ext = float(sum(truth.components[k].sum() for k in ("top", "bottom", "hair", "shoes")))
    not_top = float(truth.fg.sum() - truth.components["top"].sum())
    h1 = 0.1 * (1 - 0.05)  # Huber at |e| = 1, delta = 0.1
    expected = {
        "others": 0.0,
        "body_occluded": h1 * not_top / n,
        "all": h1 * (ext + not_top) / n,
    }[scope]
    assert abs(float(parts["comp_mask"]) - 9.0 * expected) <= 1e-12


def test_mask_scope_rejects_unknown(rng):
    truth = make_truth(rng)
    with pytest.raises(ValueError, match="mask_scope"):
        recon_loss(*perfect_renders(truth)[:2], truth.segmentation, truth, LossWeights(), mask_scope="nope")
