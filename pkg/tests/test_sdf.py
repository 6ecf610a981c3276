import math

import numpy as np
import pytest

from manifold_pf import sdf
from manifold_pf.sdf import Box, HalfSpace, Point, Sphere, WorkspaceBounds


def brute_sq_edt(cells):
    """O(N^2) squared distance (voxel units) to the nearest True cell."""
    idx = np.argwhere(np.ones_like(cells, dtype=bool))
    sites = np.argwhere(cells)
    if len(sites) == 0:
        return np.full(cells.shape, np.inf)
    d2 = ((idx[:, None, :] - sites[None, :, :]) ** 2).sum(-1).min(axis=1)
    return d2.reshape(cells.shape).astype(float)


def grid_from_cells(cells, res=1.0):
    bounds = WorkspaceBounds(tuple([0.0] * cells.ndim), tuple(np.array(cells.shape) * res))
    return sdf.OccupancyGrid(bounds, res, cells)


# ------------------------------------------------------------------ oracle checks


@pytest.mark.parametrize("seed", range(40))
def test_squared_edt_matches_brute_force_2d(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 33, size=2))
    cells = rng.random(shape) < rng.uniform(0.01, 0.5)
    cells.flat[rng.integers(cells.size)] = True
    np.testing.assert_array_equal(sdf.squared_edt(cells), brute_sq_edt(cells))


@pytest.mark.parametrize("seed", range(20))
def test_squared_edt_matches_brute_force_3d(seed):
    rng = np.random.default_rng(1000 + seed)
    shape = tuple(rng.integers(1, 13, size=3))
    cells = rng.random(shape) < rng.uniform(0.01, 0.3)
    cells.flat[rng.integers(cells.size)] = True
    np.testing.assert_array_equal(sdf.squared_edt(cells), brute_sq_edt(cells))


def test_signed_field_matches_brute_force_both_sides():
    rng = np.random.default_rng(7)
    cells = rng.random((17, 23)) < 0.3
    grid = sdf.distance_transform(grid_from_cells(cells, 0.5))
    outside = np.sqrt(brute_sq_edt(cells)) * 0.5
    inside = np.sqrt(brute_sq_edt(~cells)) * 0.5
    np.testing.assert_allclose(grid.values, np.where(cells, -inside, outside), atol=1e-12)


def test_three_by_three_center_voxel():
    cells = np.zeros((3, 3), dtype=bool)
    cells[1, 1] = True
    v = sdf.distance_transform(grid_from_cells(cells)).values
    assert v[1, 1] <= 0
    for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert v[i, j] == pytest.approx(math.sqrt(2.0))
    for i, j in [(0, 1), (1, 0), (1, 2), (2, 1)]:
        assert v[i, j] == pytest.approx(1.0)


def test_two_occupied_voxels_equal_min_over_both():
    cells = np.zeros((9, 7, 5), dtype=bool)
    a, b = (1, 2, 3), (7, 5, 0)
    cells[a] = cells[b] = True
    v = sdf.distance_transform(grid_from_cells(cells)).values
    idx = np.argwhere(np.ones_like(cells))
    expect = np.minimum(np.linalg.norm(idx - a, axis=1), np.linalg.norm(idx - b, axis=1))
    free = ~cells.ravel()
    np.testing.assert_allclose(v.ravel()[free], expect[free], atol=1e-12)


def test_all_occupied_grid_is_nonpositive():
    cells = np.ones((6, 4), dtype=bool)
    grid = sdf.distance_transform(grid_from_cells(cells))
    assert np.all(grid.values <= 0)


def test_empty_grid_is_sentinel():
    bounds = WorkspaceBounds((0.0, 0.0), (1.0, 2.0))
    grid = sdf.build_sdf([], bounds, 0.1)
    assert np.all(grid.values == pytest.approx(bounds.diagonal))


def test_sign_convention_on_random_primitives():
    bounds = WorkspaceBounds((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    occ = sdf.build_occupancy([Sphere((0.2, 0.1, 0.0), 0.35), Box((-0.5, -0.4, 0.3), (0.2, 0.3, 0.1))],
                              bounds, 0.05)
    grid = sdf.distance_transform(occ)
    assert np.all(grid.values[occ.cells] <= 0)
    assert np.all(grid.values[~occ.cells] > 0)


# ------------------------------------------------------------------ occupancy


def test_no_primitives_no_cells():
    occ = sdf.build_occupancy([], WorkspaceBounds((0.0, 0.0), (1.0, 1.0)), 0.1)
    assert not occ.cells.any()


def test_small_sphere_marks_exactly_one_voxel():
    res = 0.1
    bounds = WorkspaceBounds((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    center = tuple(bounds.lo + (np.array([3, 4, 5]) + 0.5) * res)
    occ = sdf.build_occupancy([Sphere(center, 0.5 * res)], bounds, res)
    assert occ.cells.sum() == 1
    assert occ.cells[3, 4, 5]


def test_half_box_occupies_half():
    bounds = WorkspaceBounds((0.0, 0.0), (2.0, 1.0))
    occ = sdf.build_occupancy([Box((0.5, 0.5), (0.5, 0.6))], bounds, 0.05)
    frac = occ.cells.mean()
    layer = 1.0 / occ.cells.shape[0]
    assert abs(frac - 0.5) <= layer


def test_point_marks_its_voxel():
    bounds = WorkspaceBounds((0.0, 0.0), (1.0, 1.0))
    occ = sdf.build_occupancy([Point((0.33, 0.71))], bounds, 0.1)
    assert occ.cells.sum() == 1 and occ.cells[3, 7]


def test_bad_resolution_rejected():
    with pytest.raises(sdf.ConfigurationError):
        sdf.build_occupancy([], WorkspaceBounds((0.0, 0.0), (1.0, 1.0)), -0.1)


# ------------------------------------------------------------------ queries


@pytest.fixture(scope="module")
def half_space():
    bounds = WorkspaceBounds((-1.0, -1.0), (1.0, 1.0))
    return sdf.build_sdf([HalfSpace((1.0, 0.0), 0.0)], bounds, 0.02)


def test_query_at_voxel_center_returns_stored_value():
    rng = np.random.default_rng(3)
    cells = rng.random((10, 12)) < 0.2
    grid = sdf.distance_transform(grid_from_cells(cells, 0.1))
    for i, j in [(2, 3), (0, 0), (9, 11), (5, 6)]:
        p = (np.array([i, j]) + 0.5) * 0.1
        assert sdf.sample_distance(grid, p)[0] == pytest.approx(grid.values[i, j], abs=1e-12)


def test_midpoint_query_is_mean():
    rng = np.random.default_rng(4)
    cells = rng.random((8, 8, 8)) < 0.2
    grid = sdf.distance_transform(grid_from_cells(cells, 0.1))
    a = (np.array([3, 4, 2]) + 0.5) * 0.1
    b = a + np.array([0.0, 0.1, 0.0])
    mid = sdf.sample_distance(grid, 0.5 * (a + b))[0]
    assert mid == pytest.approx(0.5 * (grid.values[3, 4, 2] + grid.values[3, 5, 2]), abs=1e-12)


def test_half_space_distance(half_space):
    for d in (0.1, 0.37, 0.8):
        val, oob = sdf.sample_distance(half_space, (d, 0.05))
        assert not oob
        assert abs(val - d) <= half_space.resolution


def test_half_space_gradient(half_space):
    g, _ = sdf.sample_gradient(half_space, (0.5, 0.1))
    assert abs(g[0] - 1.0) < 0.1 and abs(g[1]) < 0.1


def test_gradient_zero_in_constant_region():
    bounds = WorkspaceBounds((0.0, 0.0), (1.0, 1.0))
    cells = np.ones((50, 50), dtype=bool)
    grid = sdf.distance_transform(sdf.OccupancyGrid(bounds, 0.02, cells))
    g, _ = sdf.sample_gradient(grid, (0.5, 0.5))
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_sphere_gradient_points_away():
    # queries stay several voxels off the surface, where the voxelized
    # sphere's stair steps no longer tilt the field
    bounds = WorkspaceBounds((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    grid = sdf.build_sdf([Sphere((0.0, 0.0, 0.0), 0.3)], bounds, 0.02)
    rng = np.random.default_rng(5)
    for _ in range(50):
        v = rng.normal(size=3)
        v *= rng.uniform(0.45, 0.9) / np.linalg.norm(v)
        g, _ = sdf.sample_gradient(grid, v)
        cos = g @ v / (np.linalg.norm(g) * np.linalg.norm(v))
        assert cos > math.cos(math.radians(10))


def test_interpolation_continuous_across_faces():
    rng = np.random.default_rng(6)
    cells = rng.random((10, 10)) < 0.3
    grid = sdf.distance_transform(grid_from_cells(cells, 0.1))
    x = 0.45  # a voxel-center line, where neighboring interpolation cells meet
    for y in rng.uniform(0.1, 0.9, size=20):
        left = sdf.sample_distance(grid, (np.nextafter(x, 0), y))[0]
        right = sdf.sample_distance(grid, (np.nextafter(x, 1), y))[0]
        assert abs(left - right) < 1e-9


@pytest.mark.parametrize("prim", [Box((-0.3, 0.1), (0.2, 0.3)), Sphere((0.2, -0.1), 0.25)])
def test_gradient_magnitude_in_free_space(prim):
    # one convex obstacle, so free space has no medial axis (where any
    # distance field has a ridge and a small central difference)
    bounds = WorkspaceBounds((-1.0, -1.0), (1.0, 1.0))
    grid = sdf.build_sdf([prim], bounds, 0.02)
    rng = np.random.default_rng(8)
    pts = rng.uniform(-0.9, 0.9, size=(2000, 2))
    d, _ = grid.distance(pts)
    far = pts[d > 2 * grid.resolution]
    g, _ = grid.gradient(far)
    mag = np.linalg.norm(g, axis=1)
    assert np.all((mag >= 0.5) & (mag <= 1.5))


def test_out_of_bounds_is_flagged_and_clamped(half_space):
    val, oob = sdf.sample_distance(half_space, (5.0, 0.0))
    assert oob
    inside, _ = sdf.sample_distance(half_space, (half_space.bounds.hi[0] - 0.01, 0.0))
    assert val == pytest.approx(inside, abs=half_space.resolution)


def test_slice_shapes():
    bounds = WorkspaceBounds((0.0, 0.0, 0.0), (0.4, 0.6, 0.8))
    grid = sdf.build_sdf([Sphere((0.2, 0.3, 0.4), 0.1)], bounds, 0.1)
    assert grid.shape == (4, 6, 8)
    assert grid.slice(0, 1).shape == (6, 8)
    assert grid.slice(2, 7).shape == (4, 6)
    with pytest.raises(IndexError):
        grid.slice(1, 6)
