import math

import numpy as np
import pytest

import egomap.diffcore as dc
from egomap import geometry as geo
from egomap.geometry import CameraIntrinsics, Pose


def dependency_trace_centers(layers, n_out, n_in):
    """Brute force: propagate a dependency mask back through each layer."""
    centers = []
    for i in range(n_out):
        mask = np.zeros(n_out, dtype=bool)
        mask[i] = True
        for k, s in reversed(layers):
            size = (len(mask) - 1) * s + k
            prev = np.zeros(size, dtype=bool)
            for j in np.flatnonzero(mask):
                prev[j * s:j * s + k] = True
            mask = prev
        idx = np.flatnonzero(mask)
        assert idx[-1] < n_in
        centers.append((idx[0] + idx[-1]) / 2 + 0.5)
    return np.array(centers), idx[-1] - idx[0] + 1


def test_receptive_fields_match_dependency_trace():
    rows, cols = geo.receptive_field_centers()
    ref_rows, field = dependency_trace_centers(geo.PERCEPTION_LAYERS, 4, 64)
    ref_cols, _ = dependency_trace_centers(geo.PERCEPTION_LAYERS, 10, 112)
    np.testing.assert_array_equal(rows, ref_rows)
    np.testing.assert_array_equal(cols, ref_cols)
    assert geo.effective_stride_and_field() == (8, 36) and field == 36
    assert rows[0] == 18.0  # pixel indices 0..35 -> center index 17.5 -> continuous 18.0
    assert np.all(np.diff(rows) == 8) and np.all(np.diff(cols) == 8)


def test_receptive_fields_single_identity_layer():
    rows, cols = geo.receptive_field_centers(((1, 1),), (3, 5))
    np.testing.assert_array_equal(cols, np.arange(5) + 0.5)
    np.testing.assert_array_equal(rows, np.arange(3) + 0.5)


def test_intrinsics():
    intr = CameraIntrinsics()
    assert intr.focal == pytest.approx(56.0)
    with pytest.raises(ValueError):
        CameraIntrinsics(fov=math.pi)


def test_unproject_principal_point_and_edge():
    intr = CameraIntrinsics()
    np.testing.assert_allclose(geo.unproject(intr.cx, 10, 3.0, intr), [3.0, 0.0])
    np.testing.assert_allclose(geo.unproject(0.0, 10, 2.0, intr), [2.0, -2.0])


def test_unproject_nonpositive_depth_is_discarded():
    out = geo.unproject([10.0, 20.0], [5, 5], [0.0, -1.0], CameraIntrinsics())
    assert np.all(np.isnan(out))


def test_unproject_matches_3d_ray_oracle():
    rng = np.random.default_rng(0)
    intr = CameraIntrinsics()
    u = rng.uniform(0, intr.width, 100)
    v = rng.uniform(0, intr.height, 100)
    d = rng.uniform(0.1, 20, 100)
    # 3-D camera ray (right, down, forward), scaled to the given perpendicular depth
    ray = np.stack([(u - intr.cx) / intr.focal, (v - intr.cy) / intr.focal, np.ones(100)], axis=1)
    ray /= np.linalg.norm(ray, axis=1, keepdims=True)
    pts = ray * (d / ray[:, 2])[:, None]
    out = geo.unproject(u, v, d, intr)
    assert np.abs(out[:, 0] - pts[:, 2]).max() <= 1e-6
    assert np.abs(out[:, 1] - pts[:, 0]).max() <= 1e-6


def test_frustum_footprint():
    rng = np.random.default_rng(1)
    intr = CameraIntrinsics()
    pts = geo.unproject(rng.uniform(0, intr.width, 500), 0, rng.uniform(0.1, 10, 500), intr)
    assert np.all(np.abs(pts[:, 1]) <= pts[:, 0] * math.tan(intr.fov / 2) + 1e-9)


def test_frame_conversions():
    origin = Pose(0.0, 0.0, 0.0)
    np.testing.assert_allclose(geo.ego_to_allocentric([1.0, 2.0], origin), [1.0, -2.0])
    quarter = Pose(0.0, 0.0, math.pi / 2)
    np.testing.assert_allclose(geo.ego_to_allocentric([1.0, 0.0], quarter), [0.0, 1.0], atol=1e-15)
    rng = np.random.default_rng(2)
    pts = rng.uniform(-50, 50, (1000, 2))
    poses = np.column_stack([rng.uniform(-20, 20, (1000, 2)), rng.uniform(-np.pi, np.pi, 1000)])
    back = geo.allocentric_to_ego(geo.ego_to_allocentric(pts, poses), poses)
    assert np.abs(back - pts).max() <= 1e-9


def test_integrate_and_relative_delta_are_inverse():
    rng = np.random.default_rng(3)
    prev = np.column_stack([rng.uniform(-5, 5, (50, 2)), rng.uniform(-np.pi, np.pi, 50)])
    new = np.column_stack([rng.uniform(-5, 5, (50, 2)), rng.uniform(-np.pi, np.pi, 50)])
    np.testing.assert_allclose(geo.integrate(prev, geo.relative_delta(prev, new)), new, atol=1e-12)
    # forward motion at heading pi/2 moves north; a positive dphi turns left
    out = geo.integrate(np.array([0.0, 0.0, math.pi / 2]), np.array([1.0, 0.0, 0.1]))
    np.testing.assert_allclose(out, [0.0, 1.0, math.pi / 2 + 0.1], atol=1e-12)


def test_wrap_angle():
    assert geo.wrap_angle(math.pi) == pytest.approx(math.pi)
    assert geo.wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert geo.wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert Pose(0, 0, 7.0).phi == pytest.approx(7.0 - 2 * math.pi)


def sample(m, grid):
    with dc.precision("high"):
        return dc.bilinear_grid_sample(dc.Tensor(m), grid).data


def test_affine_grid_zero_delta_is_identity():
    rng = np.random.default_rng(4)
    m = rng.standard_normal((1, 3, 24, 24))
    grid = geo.affine_grid(np.zeros((1, 3)), (24, 24), (24, 24), 0.7)
    ys, xs = np.meshgrid(np.linspace(-1, 1, 24), np.linspace(-1, 1, 24), indexing="ij")
    np.testing.assert_allclose(grid[0], np.stack([xs, ys], -1), atol=1e-15)
    np.testing.assert_array_equal(sample(m, grid), m)


@pytest.mark.parametrize("n", [5, 24])
def test_quarter_turn_is_cell_permutation(n):
    m = np.random.default_rng(5).standard_normal((1, 2, n, n))
    out = sample(m, geo.affine_grid(np.array([[0.0, 0.0, math.pi / 2]]), (n, n), (n, n), 1.0))
    # the output frame faces left of the source: source "left" becomes output "up"
    np.testing.assert_array_equal(out, np.rot90(m, k=-1, axes=(2, 3)))


def test_forward_translation_shifts_rows():
    m = np.random.default_rng(6).standard_normal((1, 1, 6, 6))
    out = sample(m, geo.affine_grid(np.array([[2.0, 0.0, 0.0]]), (6, 6), (6, 6), 1.0))
    np.testing.assert_array_equal(out[0, 0, 2:], m[0, 0, :4])
    assert np.all(out[0, 0, :2] == 0)


@pytest.mark.parametrize("seed", range(10))
def test_affine_grid_composition_oracle(seed):
    rng = np.random.default_rng(seed)
    n, cs = 24, 0.7
    m = rng.standard_normal((1, 4, n, n))
    delta = np.array([[rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-np.pi, np.pi)]])
    fwd = geo.affine_grid(delta, (n, n), (n, n), cs)
    back = geo.affine_grid(geo.invert_delta(delta), (n, n), (n, n), cs)
    # bilinear interpolation of an affine coordinate field is exact, so the composed
    # grid must be the identity wherever the round trip stayed inside the map
    coords = np.moveaxis(fwd[0], -1, 0)[None]
    composed = np.moveaxis(sample(coords, back)[0], 0, -1)[None]
    inside = np.all(np.abs(back[0]) <= 1, axis=-1)
    ident = geo.affine_grid(np.zeros((1, 3)), (n, n), (n, n), cs)
    assert np.abs(composed[0][inside] - ident[0][inside]).max() <= 1e-9
    fully_inside = inside & np.all(np.abs(np.floor((back[0] + 1) * (n - 1) / 2) + 1) < n, axis=-1)
    out = sample(m, composed)
    assert np.abs(out[0][:, fully_inside] - m[0][:, fully_inside]).max() <= 1e-5


def test_invert_delta_roundtrip():
    rng = np.random.default_rng(7)
    d = np.column_stack([rng.uniform(-3, 3, (20, 2)), rng.uniform(-3, 3, 20)])
    np.testing.assert_allclose(geo.invert_delta(geo.invert_delta(d)), d, atol=1e-12)
    prev = np.zeros((20, 3))
    np.testing.assert_allclose(geo.integrate(geo.integrate(prev, d), geo.invert_delta(d))[:, :2], 0, atol=1e-12)
