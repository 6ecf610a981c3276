"""Implicit contact manifolds.

For a contact vector ``c`` the manifold is the zero set of

    D_c(q) = sum over active sensors i of (phi(p_i(q)) - r_i)^2

and configurations are projected onto it by backtracking gradient descent.
Three samplers build particle sets on the manifold from different
initializations: uniform over the joint limits, the previous particles
themselves, or uniform over the union of balls around them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Union

import numpy as np
from scipy.spatial import cKDTree

from . import _core
from .kinematics import ChainModel, SensorSpec, pack_spheres
from .sdf import SdfGrid

log = logging.getLogger(__name__)

FAILURE_REASONS = {
    _core.LOCAL_MINIMUM: "local-minimum",
    _core.ITERATION_CAP: "iteration-cap",
    _core.OUT_OF_WORKSPACE: "out-of-workspace",
}


@dataclass(frozen=True)
class ProjectionSettings:
    learning_rate: float = 0.5
    max_iterations: int = 100
    # meters^2; None means (0.5 * resolution)^2 for the grid in use
    manifold_tolerance: float | None = None
    step_tolerance: float = 1e-6
    max_retries: int = 20
    backtracking_factor: float = 0.5
    attempt_budget: int = 50

    def __post_init__(self):
        for name in ("learning_rate", "max_iterations", "step_tolerance",
                     "max_retries", "backtracking_factor", "attempt_budget"):
            if not getattr(self, name) > 0:
                raise ValueError(f"projection setting {name} must be positive")
        if self.manifold_tolerance is not None and not self.manifold_tolerance > 0:
            raise ValueError("projection setting manifold_tolerance must be positive")
        if not self.backtracking_factor < 1:
            raise ValueError("backtracking_factor must be < 1")

    def resolved(self, resolution: float) -> "ProjectionSettings":
        if self.manifold_tolerance is not None:
            return self
        return replace(self, manifold_tolerance=(0.5 * resolution) ** 2)


@dataclass(frozen=True)
class Converged:
    q: np.ndarray
    residual: float
    iterations: int


@dataclass(frozen=True)
class Failed:
    reason: str
    residual: float
    q: np.ndarray | None = None


ProjectionOutcome = Union[Converged, Failed]


class ContactModel:
    """Robot spheres + environment SDF, packed once for the kernels.

    ``sensors`` are the contact sensors (in contact-vector order);
    ``bodies`` are extra non-sensing collision spheres.  Sensors collide too.
    """

    def __init__(self, chain: ChainModel, sensors, sdf: SdfGrid,
                 settings: ProjectionSettings | None = None, bodies=()):
        if chain.dimension != sdf.dimension:
            raise ValueError("chain and SDF dimensions differ")
        self.chain = chain
        self.sensors = list(sensors)
        self.bodies = list(bodies)
        self.sdf = sdf
        self.settings = (settings or ProjectionSettings()).resolved(sdf.resolution)
        links, local, radius = pack_spheres(self.sensors + self.bodies, chain)
        self.n_sensors = len(self.sensors)
        self.n_spheres = len(links)
        self._sphere_args = (chain.offsets, chain.axes, chain.base, links, local, radius)

    @property
    def tolerance(self) -> float:
        return self.settings.manifold_tolerance

    def _args(self):
        return self._sphere_args + self.sdf.kernel_args()

    def _mask(self, c):
        c = np.asarray(c, dtype=bool).ravel()
        if c.size != self.n_sensors:
            raise ValueError(f"contact vector has {c.size} entries, expected {self.n_sensors}")
        mask = np.zeros(self.n_spheres, dtype=np.uint8)
        mask[: self.n_sensors] = c
        return mask

    def _batch(self, Q):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if Q.shape[1] != self.chain.n_joints:
            raise ValueError(f"configurations need {self.chain.n_joints} entries")
        return np.ascontiguousarray(Q)

    def sphere_distances(self, Q):
        """Signed sphere-environment distances (B, n_spheres) and oob flags."""
        d, oob = _core.kernels.sphere_distances(*self._args(), self._batch(Q))
        return d, oob.astype(bool)

    def sensor_distances(self, Q):
        d, oob = self.sphere_distances(Q)
        return d[:, : self.n_sensors], oob[:, : self.n_sensors]

    def loss(self, Q, c):
        loss, _, oob = _core.kernels.loss_and_grad(
            *self._args(), self._batch(Q), self._mask(c), 0, 0.0)
        return loss, oob.astype(bool)

    def loss_gradient(self, Q, c):
        _, g, oob = _core.kernels.loss_and_grad(
            *self._args(), self._batch(Q), self._mask(c), 0, 0.0)
        return g, oob.astype(bool)

    def project_batch(self, Q0, c, max_iterations=None):
        """Project each row of ``Q0``; returns (Q, status, residual, iterations)."""
        s = self.settings
        mask = self._mask(c)
        if not mask.any():
            raise ValueError("cannot project onto the manifold of an empty contact vector")
        return _core.kernels.project(
            *self._args(), self._batch(Q0), self.chain.lower, self.chain.upper, mask, 0,
            s.learning_rate, s.max_iterations if max_iterations is None else max_iterations,
            s.manifold_tolerance, s.step_tolerance, s.max_retries,
            s.backtracking_factor, 0.0)

    def resolve_batch(self, Q0, margin, max_iterations=None):
        """Clip into the joint limits, then push penetrating spheres out.

        The push never leaves the limits, so the arm stops at a joint stop
        instead of being flung through it by a deep penetration.
        """
        s = self.settings
        lo, hi = self.chain.lower, self.chain.upper
        Q = np.clip(self._batch(Q0), lo, hi)
        if self.n_spheres == 0:
            return Q, np.zeros(len(Q), dtype=np.int8), np.zeros(len(Q)), np.zeros(len(Q), dtype=np.int32)
        mask = np.ones(self.n_spheres, dtype=np.uint8)
        out, status, residual, iters = _core.kernels.project(
            *self._args(), Q, lo, hi, mask, 1,
            s.learning_rate, s.max_iterations if max_iterations is None else max_iterations,
            s.manifold_tolerance, s.step_tolerance, s.max_retries,
            s.backtracking_factor, margin)
        moved = np.flatnonzero((status == _core.CONVERGED) & (iters > 0))
        if moved.size:
            out[moved], residual[moved] = self._settle(Q[moved], out[moved])
        return out, status, residual, iters

    def _settle(self, start, end, halvings=16):
        """Pull resolved configurations back toward their penetrating start.

        Gradient steps overshoot the surface; bisecting the segment from the
        start to the resolved point finds the first configuration on it with
        every sphere at distance >= -tolerance, so the arm comes to rest on
        the obstacle instead of hovering above it.
        """
        tol = self.settings.manifold_tolerance
        lo = np.zeros(len(start))
        hi = np.ones(len(start))
        step = end - start
        for _ in range(halvings):
            mid = 0.5 * (lo + hi)
            d, _ = self.sphere_distances(start + mid[:, None] * step)
            ok = d.min(axis=1) >= -tol
            hi = np.where(ok, mid, hi)
            lo = np.where(ok, lo, mid)
        Q = start + hi[:, None] * step
        d, _ = self.sphere_distances(Q)
        return Q, d.min(axis=1)


def _model(chain, sensors, sdf, settings=None):
    return ContactModel(chain, sensors, sdf, settings)


def loss(q, c, chain: ChainModel, sensors, sdf: SdfGrid) -> float:
    """Sum of squared sensor-environment distances over active sensors.

    An all-zero contact vector has loss 0.  Out-of-workspace sensor centers
    are evaluated at the clamped field; use :meth:`ContactModel.loss` to get
    the flag.
    """
    val, _ = _model(chain, sensors, sdf).loss(q, c)
    return float(val[0])


def loss_gradient(q, c, chain: ChainModel, sensors, sdf: SdfGrid) -> np.ndarray:
    g, _ = _model(chain, sensors, sdf).loss_gradient(q, c)
    return g[0]


def project(q_init, c, settings: ProjectionSettings, chain: ChainModel, sensors,
            sdf: SdfGrid) -> ProjectionOutcome:
    model = ContactModel(chain, sensors, sdf, settings)
    return project_one(model, q_init, c)


def project_one(model: ContactModel, q_init, c) -> ProjectionOutcome:
    Q, status, residual, iters = model.project_batch(np.asarray(q_init, dtype=float)[None], c)
    if status[0] == _core.CONVERGED:
        return Converged(Q[0], float(residual[0]), int(iters[0]))
    return Failed(FAILURE_REASONS[int(status[0])], float(residual[0]), Q[0])


def _check_members(model, Q, c):
    if len(Q):
        lv, _ = model.loss(Q, c)
        assert np.all(lv < model.tolerance), "sampler returned an off-manifold configuration"


def _collect(model, c, draw, n, budget):
    """Project batches from ``draw(count)`` until ``n`` converge or ``budget`` runs out."""
    found = []
    attempts = 0
    total = 0
    while total < n and attempts < budget:
        batch = min(budget - attempts, max(2 * (n - total), 16))
        Q0 = draw(batch)
        Q, status, _, _ = model.project_batch(Q0, c)
        attempts += batch
        good = Q[status == _core.CONVERGED]
        found.append(good)
        total += len(good)
    out = np.concatenate(found, axis=0)[:n] if found else np.zeros((0, model.chain.n_joints))
    return out, attempts


def sample_uniform_projection(n: int, c, model: ContactModel, rng, lower=None, upper=None):
    """Project uniform draws from the joint limits until ``n`` converge."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo = model.chain.lower if lower is None else np.asarray(lower, dtype=float)
    hi = model.chain.upper if upper is None else np.asarray(upper, dtype=float)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("uniform projection needs finite joint limits")
    budget = model.settings.attempt_budget * n
    out, attempts = _collect(model, c, lambda m: rng.uniform(lo, hi, size=(m, len(lo))), n, budget)
    if len(out) < n:
        log.info("uniform projection: %d of %d samples after %d attempts", len(out), n, attempts)
    _check_members(model, out, c)
    return out


def sample_particle_projection(Q_prev, c, model: ContactModel):
    """Project every previous configuration once; failures are dropped."""
    Q_prev = np.atleast_2d(np.asarray(Q_prev, dtype=float))
    if len(Q_prev) == 0:
        raise ValueError("previous particle set is empty")
    Q, status, _, _ = model.project_batch(Q_prev, c)
    out = Q[status == _core.CONVERGED]
    if len(out) < len(Q_prev):
        log.info("particle projection: %d of %d projections failed",
                 len(Q_prev) - len(out), len(Q_prev))
    _check_members(model, out, c)
    return out


def uniform_in_ball(rng, center, radius, count):
    """``count`` uniform draws from the n-ball (direction times radius * U^(1/n))."""
    center = np.asarray(center, dtype=float)
    dim = center.shape[-1]
    x = rng.standard_normal((count, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / dim)
    return center + x * r[:, None]


def _ball_volume(dim, radius):
    return math.pi ** (dim / 2) / math.gamma(dim / 2 + 1) * radius**dim


def ball_initializations(Q_prev, radius: float, count: int, rng):
    """Uniform draws from the union of radius-``radius`` balls around ``Q_prev``.

    Two exact rejection schemes are available and the one with the smaller
    proposal volume is used.  Scattered balls: choose a ball uniformly, draw
    a point inside it and keep it with probability 1 / (number of balls
    containing it).  Heavily overlapping balls: draw from the bounding box
    and keep points within ``radius`` of some center.  Returns (points,
    parent indices); the parent of a point is a ball that contains it.
    """
    Q_prev = np.atleast_2d(np.asarray(Q_prev, dtype=float))
    # duplicate particles (common after resampling) span the same ball
    centers, first = np.unique(Q_prev, axis=0, return_index=True)
    k, dim = centers.shape
    lo = centers.min(axis=0) - radius
    hi = centers.max(axis=0) + radius
    use_box = float(np.prod(hi - lo)) < k * _ball_volume(dim, radius)
    pts = np.empty((count, dim))
    parents = np.empty(count, dtype=np.intp)
    tree = cKDTree(centers)
    got = 0
    rate = 1.0
    while got < count:
        want = count - got
        batch = int(min(max(want / rate * 1.2, want), 50 * count))
        if use_box:
            cand = rng.uniform(lo, hi, size=(batch, dim))
            dist, idx = tree.query(cand, distance_upper_bound=radius)
            keep = np.flatnonzero(dist <= radius)
        else:
            idx = rng.integers(0, k, size=batch)
            cand = uniform_in_ball(rng, centers[idx], radius, batch)
            cover = np.maximum(tree.query_ball_point(cand, radius, return_length=True), 1)
            keep = np.flatnonzero(rng.random(batch) * cover < 1.0)
        rate = max(len(keep) / batch, 1e-3)
        keep = keep[:want]
        m = len(keep)
        pts[got:got + m] = cand[keep]
        parents[got:got + m] = first[idx[keep]]
        got += m
    return pts, parents


def sample_ball_projection(Q_prev, radius: float, n: int, c, model: ContactModel, rng):
    """Project uniform draws from the union of balls around ``Q_prev``."""
    if not radius > 0:
        raise ValueError("ball radius must be positive")
    Q_prev = np.atleast_2d(np.asarray(Q_prev, dtype=float))
    if len(Q_prev) == 0:
        raise ValueError("previous particle set is empty")
    budget = model.settings.attempt_budget * n
    out, attempts = _collect(
        model, c, lambda m: ball_initializations(Q_prev, radius, m, rng)[0], n, budget)
    if len(out) < n:
        log.info("ball projection: %d of %d samples after %d attempts", len(out), n, attempts)
    _check_members(model, out, c)
    return out
