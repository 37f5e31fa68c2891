import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from splatlayers.body_model import BodyModel, BodyParams, canonical_mesh
from splatlayers.template import (
    ATLAS_RES,
    LABELS,
    LAYER_OF,
    ComponentTemplate,
    assign_weights,
    bake_offsets,
    build_skinning_field,
    default_atlas,
    face_areas,
    init_seeds,
    label_index,
    subdivide,
)


def single_face(verts, faces=None, weights=None, label="body"):
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.array([[0, 1, 2]]) if faces is None else np.asarray(faces)
    v = len(verts)
    return ComponentTemplate(
        label=label,
        layer=LAYER_OF[label],
        vertices=verts,
        faces=faces,
        corner_uv=np.tile([[0.1, 0.1], [0.9, 0.1], [0.1, 0.9]], (len(faces), 1, 1)),
        shape_dirs=np.zeros((v, 3, 2)),
        expr_dirs=np.zeros((v, 3, 1)),
        pose_dirs=np.zeros((v, 3, 9)),
        lbs_weights=np.tile([1.0, 0.0], (v, 1)) if weights is None else weights,
        face_region=np.zeros(len(faces), dtype=np.int64),
        face_source=np.arange(len(faces)),
    )


@pytest.fixture(scope="module")
def atlas(toy_model):
    return default_atlas(toy_model)


# --------------------------------------------------------------- subdivision

def test_subdivide_zero_levels_unchanged(atlas):
    t = atlas["top"]
    s = subdivide(t, 0)
    assert np.array_equal(s.faces, t.faces) and np.array_equal(s.vertices, t.vertices)


def test_subdivide_quadruples_faces(atlas):
    for t in atlas.values():
        assert subdivide(t, 1).n_faces == 4 * t.n_faces
        assert subdivide(t, 2).n_faces == 16 * t.n_faces


def test_subdivided_area_matches_parent(atlas):
    t = atlas["hair"]
    parent = face_areas(t.vertices, t.faces)
    s = subdivide(t, 1)
    child = face_areas(s.vertices, s.faces).reshape(-1, 4).sum(1)
    np.testing.assert_allclose(child, parent, atol=1e-6)


def test_subdivided_uv_in_unit_square(atlas):
    for t in atlas.values():
        uv = subdivide(t, 1).corner_uv
        assert uv.min() >= 0.0 and uv.max() <= 1.0


# --------------------------------------------------------------------- seeds

def test_unit_right_triangle_seed():
    s = init_seeds(single_face([[0, 0, 0], [1, 0, 0], [0, 1, 0]]))
    np.testing.assert_allclose(s.mu0[0], [1 / 3, 1 / 3, 0.0], atol=1e-15)
    np.testing.assert_allclose(s.rot0[0][:, 2], [0, 0, 1])  # normal
    np.testing.assert_allclose(s.rot0[0][:, 0], [1, 0, 0])  # first edge
    edge = (1 + 1 + np.sqrt(2)) / 3
    np.testing.assert_allclose(s.scale0[0], [edge / 2, edge / 2, edge / 8])


def test_seed_frames_orthonormal(layered):
    r = layered.seeds.rot0
    np.testing.assert_allclose(np.swapaxes(r, 1, 2) @ r, np.broadcast_to(np.eye(3), r.shape), atol=1e-9)
    np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-9)
    assert np.all(layered.seeds.scale0 > 0)


def test_degenerate_face_skipped(caplog):
    verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]]
    t = single_face(verts, faces=[[0, 1, 2], [0, 1, 3]])
    with caplog.at_level(logging.WARNING):
        s = init_seeds(t)
    assert len(s) == 1 and s.face[0] == 0
    assert "degenerate" in caplog.text


def test_seed_count_equals_face_count(layered):
    for label, t in layered.templates.items():
        assert (layered.seeds.label == label_index(label)).sum() == t.n_faces


# ------------------------------------------------------------------- baking

def test_zero_blendshapes_bake_to_zero():
    t = single_face([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    s = bake_offsets(init_seeds(t), t)
    assert not s.shape_offsets.any() and not s.expr_offsets.any() and not s.pose_offsets.any()


def test_shared_blendshape_row_bakes_through():
    t = single_face([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    d = np.array([[0.1, -0.2], [0.3, 0.0], [0.05, 0.7]])
    t.shape_dirs[:] = d
    s = bake_offsets(init_seeds(t), t)
    np.testing.assert_allclose(s.shape_offsets[0], d, atol=1e-15)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_baked_shape_matches_mesh_deformation(toy_model, atlas, seed):
    betas = np.random.default_rng(seed).normal(size=toy_model.n_betas)
    t = atlas["body"]
    seeds = bake_offsets(init_seeds(t), t)
    # brute force: deform the mesh, recompute centroids, subtract rest centroids
    params = BodyParams.zeros(toy_model)
    params.betas[:] = betas
    moved = canonical_mesh(toy_model, params)
    faces = toy_model.faces[t.face_source[seeds.face]]
    oracle = moved[faces].mean(1) - toy_model.template[faces].mean(1)
    np.testing.assert_allclose(seeds.shape_offsets @ betas, oracle, atol=1e-6)


# ----------------------------------------------------------- skinning field

def test_field_cell_on_isolated_vertex():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [10, 10, 10]])
    weights = np.array([[1.0, 0], [1, 0], [1, 0], [1, 0], [0, 1]])
    m = BodyModel(
        template=verts, faces=np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]),
        shape_dirs=np.zeros((5, 3, 1)), pose_dirs=np.zeros((5, 3, 9)), expr_dirs=np.zeros((5, 3, 1)),
        j_regressor=np.full((2, 5), 0.2), parents=np.array([-1, 0]), lbs_weights=weights,
    )
    fld = build_skinning_field(m, grid_res=51)
    centers = fld.cell_centers()
    np.testing.assert_allclose(centers[50, 50, 50], verts[4], atol=1e-9)
    np.testing.assert_allclose(fld.weights[50, 50, 50], [0.0, 1.0], atol=1e-3)


def test_field_cells_normalized(layered):
    np.testing.assert_allclose(layered.field.weights.sum(-1), 1.0, atol=1e-3)


def test_field_matches_barycentric_on_surface(toy_model, layered, rng):
    faces = rng.integers(0, len(toy_model.faces), 300)
    bary = rng.dirichlet(np.ones(3), 300)
    tri = toy_model.faces[faces]
    points = np.einsum("nk,nkd->nd", bary, toy_model.template[tri])
    direct = np.einsum("nk,nkj->nj", bary, toy_model.lbs_weights[tri])
    looked, clamped = layered.field.lookup(points)
    assert clamped == 0
    l1 = np.abs(looked - direct).sum(1)
    assert l1.mean() < 0.1, l1.mean()


def test_body_seed_single_joint_is_one_hot(layered):
    t = single_face([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    s, _ = assign_weights(init_seeds(t), layered.field)
    assert np.array_equal(s.weights[0], [1.0, 0.0])


def test_exterior_seed_at_cell_center_reads_cell(layered):
    seeds = layered.seeds.subset(np.flatnonzero(layered.seeds.label == label_index("top"))[:3])
    ijk = [(20, 40, 30), (31, 50, 32), (25, 33, 35)]
    seeds.mu0 = np.array([layered.field.cell_centers()[c] for c in ijk])
    s, clamped = assign_weights(seeds, layered.field)
    assert clamped == 0
    for k, c in enumerate(ijk):
        cell = layered.field.weights[c].astype(np.float64)
        np.testing.assert_allclose(s.weights[k], cell / cell.sum(), atol=1e-6)


def test_seed_outside_field_clamped(layered, caplog):
    seeds = layered.seeds.subset(np.flatnonzero(layered.seeds.label == label_index("hair"))[:2])
    seeds.mu0 = seeds.mu0 + np.array([0.0, 50.0, 0.0])
    with caplog.at_level(logging.WARNING):
        s, clamped = assign_weights(seeds, layered.field)
    assert clamped == 2 and "clamped" in caplog.text
    np.testing.assert_allclose(s.weights.sum(1), 1.0)


def test_all_seed_weights_normalized(layered):
    w = layered.seeds.weights
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-4)


# --------------------------------------------------------------------- atlas

def test_five_templates(atlas):
    assert tuple(atlas) == LABELS
    assert [t.label for t in atlas.values()] == list(LABELS)
    assert {t.layer for t in atlas.values()} == {0, 1, 2}


def test_same_layer_islands_disjoint(atlas):
    for a, b in (("hair", "shoes"), ("top", "bottom")):
        ba, bb = atlas[a].uv_box(), atlas[b].uv_box()
        assert ba[2] < bb[0] or bb[2] < ba[0] or ba[3] < bb[1] or bb[3] < ba[1]


def test_every_body_face_once(toy_model, atlas):
    assert np.array_equal(np.sort(atlas["body"].face_source), np.arange(len(toy_model.faces)))


def test_missing_regions_rejected(toy_model):
    from dataclasses import replace

    with pytest.raises(ValueError, match="region labels"):
        default_atlas(replace(toy_model, regions=None))


def test_components_do_not_share_texels(layered):
    s = layered.seeds
    half = 0.5 / ATLAS_RES
    for layer in range(3):
        labs = np.unique(s.label[s.layer == layer])
        for i, a in enumerate(labs):
            for b in labs[i + 1 :]:
                d, _ = cKDTree(s.uv[s.label == b]).query(s.uv[s.label == a])
                assert d.min() > half


def test_components_partition_seeds(layered):
    parts = layered.component_slices()
    joined = np.sort(np.concatenate(list(parts.values())))
    assert np.array_equal(joined, np.arange(len(layered.seeds)))
