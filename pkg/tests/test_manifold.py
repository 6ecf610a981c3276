import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import (OBSTACLE, RES, distance_to_set, half_space_grids, loss_gradient_errors,
                     nearest_index, point_world, two_link, two_link_ik)
from manifold_pf import kinematics as km
from manifold_pf import manifold, sdf
from manifold_pf.kinematics import ChainModel, SensorSpec
from manifold_pf.manifold import Converged, ContactModel, Failed, ProjectionSettings


@pytest.fixture(scope="module")
def world():
    return point_world()


@pytest.fixture(scope="module")
def ik():
    return two_link_ik(OBSTACLE)


def one_link_half_space(res=RES):
    # 1-link arm of length 1 over the half-space y < -0.5
    chain = ChainModel(2, [[0.0, 0.0]], None, -math.pi, math.pi)
    grid = sdf.build_sdf([sdf.HalfSpace((0.0, 1.0), -0.5)],
                         sdf.WorkspaceBounds((-1.5, -1.5), (1.5, 1.5)), res)
    return chain, [SensorSpec(0, (1.0, 0.0))], grid


# ------------------------------------------------------------------ oracles first


def test_loss_gradient_matches_finite_differences_randomized():
    errors = loss_gradient_errors(500, seed=0)
    assert len(errors) == 500
    assert errors.max() < 1e-3


def test_uniform_projection_finds_both_ik_solutions(world, ik):
    rng = np.random.default_rng(0)
    Q = manifold.sample_uniform_projection(100, [True], world, rng)
    assert len(Q) == 100
    assert distance_to_set(Q, ik).max() < 0.05
    assert set(nearest_index(Q, ik)) == {0, 1}


def test_projection_near_ik_solution_converges_to_it(ik):
    fine = point_world(res=0.005)
    rng = np.random.default_rng(1)
    for sol in ik:
        for _ in range(5):
            out = manifold.project_one(fine, sol + rng.uniform(-0.15, 0.15, 2), [True])
            assert isinstance(out, Converged)
            assert np.linalg.norm(out.q - sol) < 1e-2


def test_particle_projection_preserves_both_modes(world, ik):
    rng = np.random.default_rng(2)
    Q_prev = np.concatenate([ik[0] + rng.normal(scale=0.1, size=(20, 2)),
                             ik[1] + rng.normal(scale=0.1, size=(20, 2))])
    Q = manifold.sample_particle_projection(Q_prev, [True], world)
    assert len(Q) == 40
    assert distance_to_set(Q, ik).max() < 0.05
    np.testing.assert_array_equal(nearest_index(Q, ik), [0] * 20 + [1] * 20)


# ------------------------------------------------------------------ loss


def test_loss_of_half_space_is_squared_distance():
    chain, sensors, grid = one_link_half_space()
    for q in (-0.3, 0.0, 0.5, math.pi / 2, 2.8):
        d = math.sin(q) + 0.5  # tip height above the surface
        val = manifold.loss([q], [True], chain, sensors, grid)
        # the voxelized surface sits up to half a voxel off the true one
        assert val == pytest.approx(d * d, abs=RES * d + RES**2)


def test_loss_of_two_sensors_sums():
    chain, _, grid = one_link_half_space()
    sensors = [SensorSpec(0, (1.0, 0.0)), SensorSpec(0, (0.5, 0.0))]
    q = [math.pi / 2]  # heights 1.0 and 0.5, distances 1.5 and 1.0
    d1 = manifold.loss(q, [True, False], chain, sensors, grid)
    d2 = manifold.loss(q, [False, True], chain, sensors, grid)
    both = manifold.loss(q, [True, True], chain, sensors, grid)
    assert both == pytest.approx(d1 + d2, rel=1e-12)
    assert d1 == pytest.approx(1.5**2, abs=0.05)
    assert d2 == pytest.approx(1.0**2, abs=0.05)


def test_loss_of_empty_contact_vector_is_zero(world):
    assert manifold.loss([0.3, 0.4], [False], world.chain, world.sensors, world.sdf) == 0.0


def test_loss_of_touching_sensor_within_resolution():
    chain, sensors, grid = one_link_half_space()
    # tip exactly on the true surface y = -0.5
    assert manifold.loss([-math.pi / 6], [True], chain, sensors, grid) < RES**2


def test_loss_radius_shifts_distance():
    chain, _, grid = one_link_half_space()
    q = [0.0]
    bare = manifold.loss(q, [True], chain, [SensorSpec(0, (1.0, 0.0))], grid)
    padded = manifold.loss(q, [True], chain, [SensorSpec(0, (1.0, 0.0), 0.2)], grid)
    assert math.sqrt(bare) - math.sqrt(padded) == pytest.approx(0.2, abs=1e-9)


def test_out_of_workspace_loss_is_flagged():
    chain, sensors, grid = one_link_half_space()
    model = ContactModel(ChainModel(2, [[0.0, 0.0]], None, -4, 4, base=[1.0, 0.0]), sensors, grid)
    _, oob = model.loss([0.0], [True])
    assert oob.all()


# ------------------------------------------------------------------ gradient


def test_gradient_zero_on_manifold():
    chain, _, grid = one_link_half_space()
    q = [0.3]
    p = km.sensor_centers(chain, q, [SensorSpec(0, (1.0, 0.0))])[0]
    phi = sdf.sample_distance(grid, p)[0]
    on = [SensorSpec(0, (1.0, 0.0), phi)]
    g = manifold.loss_gradient(q, [True], chain, on, grid)
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_descent_step_moves_sensor_toward_surface():
    chain, sensors, grid = one_link_half_space()
    for q in (0.2, 1.0, 2.5):
        g = manifold.loss_gradient([q], [True], chain, sensors, grid)
        # sensor above the surface: descending lowers the tip, i.e. rotates it toward -y
        assert np.sign(g[0]) == np.sign(math.cos(q))
        before = manifold.loss([q], [True], chain, sensors, grid)
        after = manifold.loss([q - 0.01 * g[0]], [True], chain, sensors, grid)
        assert after < before


def test_inactive_sensors_do_not_change_gradient():
    chain, _, grid = one_link_half_space()
    sensors = [SensorSpec(0, (1.0, 0.0)), SensorSpec(0, (0.4, 0.0))]
    g_one = manifold.loss_gradient([0.7], [True, False], chain, sensors, grid)
    g_only = manifold.loss_gradient([0.7], [True], chain, sensors[:1], grid)
    np.testing.assert_allclose(g_one, g_only, atol=1e-15)


# ------------------------------------------------------------------ projection


def test_projection_of_manifold_point_is_identity(world):
    q = manifold.project_one(world, [0.2, 1.1], [True]).q
    out = manifold.project_one(world, q, [True])
    assert isinstance(out, Converged)
    assert out.iterations == 0
    np.testing.assert_array_equal(out.q, q)
    assert out.residual < world.tolerance


def test_projection_of_unreachable_obstacle_fails():
    far = point_world(obstacle=(2.15, 2.15))
    out = manifold.project_one(far, [0.3, 0.2], [True])
    assert isinstance(out, Failed)
    assert out.reason in ("local-minimum", "iteration-cap")
    assert out.residual > 0


def test_module_level_project(world):
    out = manifold.project([0.2, 1.1], [True], ProjectionSettings(), world.chain,
                           world.sensors, world.sdf)
    assert isinstance(out, Converged) and out.residual < (0.5 * RES) ** 2


def test_projection_rejects_empty_contact_vector(world):
    with pytest.raises(ValueError):
        world.project_batch([[0.0, 0.0]], [False])


def test_projection_loss_never_increases(world):
    rng = np.random.default_rng(3)
    for q0 in rng.uniform(-3, 3, size=(5, 2)):
        losses = []
        for j in range(0, 25):
            Q, _, _, _ = world.project_batch(q0[None], [True], max_iterations=j)
            losses.append(world.loss(Q, [True])[0][0])
        assert np.all(np.diff(losses) <= 1e-15)


def test_projection_steps_respect_joint_limits():
    limited = point_world(lower=[0.5, -math.pi], upper=[math.pi, math.pi])
    rng = np.random.default_rng(4)
    Q0 = np.column_stack([rng.uniform(0.5, math.pi, 50), rng.uniform(-math.pi, math.pi, 50)])
    Q, _, _, _ = limited.project_batch(Q0, [True])
    assert np.all(Q[:, 0] >= 0.5)


def test_projection_settings_validation():
    with pytest.raises(ValueError):
        ProjectionSettings(learning_rate=0.0)
    with pytest.raises(ValueError):
        ProjectionSettings(backtracking_factor=1.5)
    with pytest.raises(ValueError):
        ProjectionSettings(manifold_tolerance=-1.0)
    assert ProjectionSettings().resolved(0.02).manifold_tolerance == pytest.approx(1e-4)


# ------------------------------------------------------------------ samplers


def test_uniform_projection_with_unreachable_sensor_is_empty(caplog):
    # a sensor on the first link sweeps a circle of radius 0.5 that misses the obstacle
    base = point_world()
    model = ContactModel(base.chain, [SensorSpec(0, (0.5, 0.0))], base.sdf,
                         ProjectionSettings(attempt_budget=4))
    with caplog.at_level("INFO", logger="manifold_pf.manifold"):
        Q = manifold.sample_uniform_projection(10, [True], model, np.random.default_rng(5))
    assert len(Q) == 0
    assert "0 of 10" in caplog.text


def test_uniform_projection_needs_finite_limits():
    base = point_world()
    model = ContactModel(two_link(-np.inf, np.inf), base.sensors, base.sdf)
    with pytest.raises(ValueError):
        manifold.sample_uniform_projection(5, [True], model, np.random.default_rng(0))


def test_particle_projection_of_manifold_points_is_identity(world):
    Q_prev = manifold.sample_uniform_projection(20, [True], world, np.random.default_rng(6))
    Q = manifold.sample_particle_projection(Q_prev, [True], world)
    np.testing.assert_array_equal(Q, Q_prev)


def test_particle_projection_drops_failures():
    # only the elbow-down solution lies within the first joint's limits; a
    # particle pinned at the limit near the other solution cannot converge
    limited = point_world(lower=[0.5, -math.pi], upper=[math.pi, math.pi])
    Q_prev = np.array([[1.2, -1.4], [1.4, -1.7], [0.5, 1.6], [1.3, -1.5]])
    Q = manifold.sample_particle_projection(Q_prev, [True], limited)
    assert len(Q) == len(Q_prev) - 1


def test_particle_projection_rejects_empty_input(world):
    with pytest.raises(ValueError):
        manifold.sample_particle_projection(np.zeros((0, 2)), [True], world)


def test_ball_initializations_lie_in_some_ball():
    rng = np.random.default_rng(7)
    for dim, k, r in [(2, 5, 0.3), (3, 50, 0.05), (7, 250, 0.4), (4, 3, 2.0)]:
        centers = rng.normal(size=(k, dim))
        pts, parents = manifold.ball_initializations(centers, r, 2000, rng)
        assert pts.shape == (2000, dim)
        d = np.linalg.norm(pts - centers[parents], axis=1)
        assert d.max() <= r * (1 + 1e-12)


def test_ball_projection_with_vanishing_radius_matches_particle_projection(world, ik):
    rng = np.random.default_rng(8)
    Q_prev = np.concatenate([ik[0] + rng.normal(scale=0.2, size=(5, 2)),
                             ik[1] + rng.normal(scale=0.2, size=(5, 2))])
    pts, parents = manifold.ball_initializations(Q_prev, 1e-9, 30, np.random.default_rng(9))
    np.testing.assert_allclose(pts, Q_prev[parents], atol=1e-9)
    ball = manifold.sample_ball_projection(Q_prev, 1e-9, 30, [True], world,
                                           np.random.default_rng(9))
    particle = manifold.sample_particle_projection(Q_prev[parents], [True], world)
    np.testing.assert_allclose(ball, particle, atol=1e-5)


def _fraction_right(pts):
    return float(np.mean(pts[:, 0] > 0.1))


def test_ball_overlap_correction_coincident_particles():
    n = 100_000
    one = manifold.ball_initializations(np.zeros((1, 2)), 1.0, n, np.random.default_rng(10))[0]
    two = manifold.ball_initializations(np.zeros((2, 2)), 1.0, n, np.random.default_rng(11))[0]
    p1, p2 = _fraction_right(one), _fraction_right(two)
    sigma = math.sqrt(p1 * (1 - p1) / n + p2 * (1 - p2) / n)
    assert abs(p1 - p2) < 3 * sigma


@pytest.mark.parametrize("dim", [2, 4])
def test_ball_union_is_sampled_uniformly(dim):
    # two balls half overlapping; the lens fraction must match a plain
    # rejection sampler over the bounding box (dim 2 and 4 exercise both schemes)
    n = 100_000
    centers = np.zeros((2, dim))
    centers[1, 0] = 1.0
    pts = manifold.ball_initializations(centers, 1.0, n, np.random.default_rng(12))[0]

    def lens(x):
        return np.mean(np.all(np.linalg.norm(x[:, None, :] - centers[None], axis=2) <= 1.0, axis=1))

    rng = np.random.default_rng(13)
    ref = []
    while sum(len(r) for r in ref) < n:
        box = rng.uniform([-1.0] + [-1.0] * (dim - 1), [2.0] + [1.0] * (dim - 1), size=(n, dim))
        keep = np.linalg.norm(box[:, None, :] - centers[None], axis=2).min(axis=1) <= 1.0
        ref.append(box[keep])
    ref = np.concatenate(ref)[:n]
    a, b = lens(pts), lens(ref)
    sigma = math.sqrt(a * (1 - a) / n + b * (1 - b) / n)
    assert abs(a - b) < 3 * sigma


def test_ball_projection_members_and_radius_validation(world, ik):
    rng = np.random.default_rng(14)
    Q = manifold.sample_ball_projection(ik + 0.1, 0.3, 40, [True], world, rng)
    assert len(Q) == 40
    assert np.all(world.loss(Q, [True])[0] < world.tolerance)
    with pytest.raises(ValueError):
        manifold.sample_ball_projection(ik, 0.0, 5, [True], world, rng)


def test_uniform_in_ball_support_and_radial_law():
    rng = np.random.default_rng(15)
    x = manifold.uniform_in_ball(rng, np.array([1.0, -2.0, 0.5]), 0.5, 100_000)
    r = np.linalg.norm(x - [1.0, -2.0, 0.5], axis=1)
    assert r.max() <= 0.5
    # P(r < R/2) = 1/8 in three dimensions
    p = np.mean(r < 0.25)
    assert abs(p - 0.125) < 3 * math.sqrt(0.125 * 0.875 / len(r))


# ------------------------------------------------------------------ invariants


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_sampler_outputs_are_on_the_manifold(seed):
    world = point_world()
    rng = np.random.default_rng(seed)
    prev = rng.uniform(-math.pi, math.pi, size=(8, 2))
    outs = [
        manifold.sample_uniform_projection(8, [True], world, rng),
        manifold.sample_particle_projection(prev, [True], world),
        manifold.sample_ball_projection(prev, 0.2, 8, [True], world, rng),
    ]
    ik = two_link_ik(OBSTACLE)
    for Q in outs:
        if len(Q):
            assert np.all(world.loss(Q, [True])[0] < world.tolerance)
            wrapped = (Q + math.pi) % (2 * math.pi) - math.pi
            assert distance_to_set(wrapped, ik).max() < 0.05


@pytest.fixture(scope="module")
def coarse_grids():
    return half_space_grids()


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_loss_is_nonnegative(coarse_grids, seed):
    rng = np.random.default_rng(seed)
    grid = coarse_grids[(2, int(rng.integers(2)), float(rng.choice([1.0, -1.0])))]
    chain = ChainModel(2, rng.normal(scale=0.5, size=(3, 2)), None, -np.inf, np.inf)
    sensors = [SensorSpec(int(rng.integers(3)), tuple(rng.normal(scale=0.3, size=2)),
                          float(rng.uniform(0, 0.1))) for _ in range(3)]
    c = rng.random(3) < 0.5
    Q = rng.uniform(-10, 10, size=(20, 3))
    assert np.all(ContactModel(chain, sensors, grid).loss(Q, c)[0] >= 0)

