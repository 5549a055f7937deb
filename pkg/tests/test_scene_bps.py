import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scenecast.motion_data import OBJECT_TYPES, SceneObject
from scenecast.normalize import AffineTransform2D
from scenecast.scene_bps import D_OBJ, bps_encode, encode_scene, generate_basis


def _obj(points, kind="table", oid="o"):
    return SceneObject(oid, kind, np.asarray(points, np.float64))


def test_encoding_dimension_split(basis):
    enc = bps_encode(_obj(np.zeros((1, 3))), basis)
    assert basis.size == 2048 and D_OBJ == 2061
    assert enc.vector().shape == (2061,)
    assert enc.distances.shape == (2048,) and enc.type_onehot.shape == (13,)


def test_onehot_slot_per_type(basis):
    for i, kind in enumerate(OBJECT_TYPES):
        v = bps_encode(_obj(np.zeros((1, 3)), kind), basis).vector()
        assert v[2048 + i] == 1.0 and v[2048:].sum() == 1.0


def test_basis_is_deterministic_and_inside_ball():
    a, b = generate_basis(5, 500, 2.0), generate_basis(5, 500, 2.0)
    np.testing.assert_array_equal(a.points, b.points)
    assert np.linalg.norm(a.points, axis=1).max() <= 2.0
    assert not a.points.flags.writeable


def test_distances_match_brute_force():
    basis = generate_basis(1, 200)
    pts = np.random.default_rng(0).normal(size=(50, 3))
    brute = np.sqrt(((basis.points[:, None] - pts[None]) ** 2).sum(-1)).min(axis=1)
    np.testing.assert_allclose(bps_encode(_obj(pts), basis).distances, brute, atol=1e-12)


def test_single_point_at_origin_gives_basis_norms(basis):
    d = bps_encode(_obj(np.zeros((1, 3))), basis).distances
    np.testing.assert_allclose(d, np.linalg.norm(basis.points, axis=1), atol=1e-12)


def test_empty_scene(basis):
    assert encode_scene([], basis).matrix().shape == (0, D_OBJ)


clouds = st.integers(0, 10_000).map(lambda s: np.random.default_rng(s).normal(size=(40, 3)) * 2)


@settings(max_examples=15, deadline=None)
@given(clouds)
def test_superset_never_increases_distances(pts):
    basis = generate_basis(2, 256)
    sub = bps_encode(_obj(pts[:20]), basis).distances
    full = bps_encode(_obj(pts), basis).distances
    assert np.all(full <= sub)


@settings(max_examples=15, deadline=None)
@given(clouds, st.integers(0, 100))
def test_point_order_is_irrelevant(pts, seed):
    basis = generate_basis(2, 256)
    perm = np.random.default_rng(seed).permutation(len(pts))
    np.testing.assert_array_equal(bps_encode(_obj(pts), basis).distances, bps_encode(_obj(pts[perm]), basis).distances)


@settings(max_examples=15, deadline=None)
@given(clouds, st.floats(-np.pi, np.pi), st.floats(-3, 3), st.floats(-3, 3))
def test_isometry_applied_to_basis_and_cloud_is_invariant(pts, angle, dx, dy):
    basis = generate_basis(2, 256)
    tf = AffineTransform2D(angle, (dx, dy))
    moved_basis = type(basis)(tf.apply_points(basis.points), basis.seed, basis.sampling_radius)
    a = bps_encode(_obj(pts), basis).distances
    b = bps_encode(_obj(tf.apply_points(pts)), moved_basis).distances
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_transform_argument_equals_pre_transformed_cloud(basis):
    pts = np.random.default_rng(3).normal(size=(30, 3))
    tf = AffineTransform2D(0.7, (1.0, -2.0))
    a = bps_encode(_obj(pts), basis, tf).distances
    b = bps_encode(_obj(tf.apply_points(pts)), basis).distances
    np.testing.assert_array_equal(a, b)


def test_scene_matrix_rows_follow_object_order(basis):
    objs = [_obj(np.ones((2, 3)) * k, oid=str(k)) for k in range(3)]
    m = encode_scene(objs, basis).matrix()
    for k in range(3):
        np.testing.assert_array_equal(m[k], bps_encode(objs[k], basis).vector())


def test_empty_cloud_is_rejected(basis):
    with pytest.raises(ValueError):
        SceneObject("x", "table", np.zeros((0, 3)))
