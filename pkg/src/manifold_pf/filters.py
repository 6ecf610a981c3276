"""Conventional and manifold particle filters over encoder offsets.

The filter state is the offset ``dq`` between the true configuration and the
encoder reading, ``q = q_e + dq``.  Both filters share the transition model
(noisy integration of the commanded velocity followed by soft collision
resolution) and differ only when contact is sensed: the manifold filter then
samples from the contact manifold and weights by a kernel density estimate of
the forward-simulated previous belief.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import manifold
from .manifold import ContactModel

log = logging.getLogger(__name__)

STRATEGIES = ("uniform", "particle", "ball")
LIKELIHOOD_FLOOR = 1e-6


@dataclass
class ParticleSet:
    offsets: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.offsets = np.atleast_2d(np.asarray(self.offsets, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if len(self.offsets) < 1:
            raise ValueError("a particle set needs at least one particle")
        if len(self.weights) != len(self.offsets):
            raise ValueError("one weight per particle")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and nonnegative")

    @classmethod
    def uniform(cls, offsets):
        offsets = np.atleast_2d(offsets)
        return cls(offsets, np.full(len(offsets), 1.0 / len(offsets)))

    def __len__(self):
        return len(self.weights)

    @property
    def normalized(self) -> bool:
        return abs(self.weights.sum() - 1.0) <= 1e-9

    def copy(self):
        return ParticleSet(self.offsets.copy(), self.weights.copy())


@dataclass(frozen=True)
class Observation:
    """Encoder reading on the observed joints plus binary contact readings."""

    q_e: np.ndarray
    contact: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        q_e = np.asarray(self.q_e, dtype=float).ravel()
        c = np.asarray(self.contact, dtype=bool).ravel()
        mask = np.ones(q_e.size, dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool).ravel()
        if q_e.size != mask.sum():
            raise ValueError("q_e must cover exactly the observed joints")
        object.__setattr__(self, "q_e", q_e)
        object.__setattr__(self, "contact", c)
        object.__setattr__(self, "mask", mask)

    @property
    def in_contact(self) -> bool:
        return bool(self.contact.any())

    def full_encoder(self) -> np.ndarray:
        """Encoder vector over all joints; unobserved joints read 0."""
        q = np.zeros(self.mask.size)
        q[self.mask] = self.q_e
        return q


@dataclass(frozen=True)
class TransitionNoise:
    r_a: float
    dt: float

    def __post_init__(self):
        if self.r_a < 0 or not self.dt > 0:
            raise ValueError("need r_a >= 0 and dt > 0")


@dataclass(frozen=True)
class ObservationNoise:
    """Diagonal prior covariance of the offset and the contact likelihood scale."""

    offset_variance: tuple
    sigma_contact: float
    unobserved_radius: float = 1.0

    def __post_init__(self):
        var = np.asarray(self.offset_variance, dtype=float).ravel()
        if np.any(var <= 0):
            raise ValueError("offset variances must be positive")
        if not self.sigma_contact > 0:
            raise ValueError("sigma_contact must be positive")
        object.__setattr__(self, "offset_variance", tuple(var))


@dataclass(frozen=True)
class KdeSettings:
    rule: str = "silverman"
    floor: float = 1e-3
    fixed: tuple | None = None

    def __post_init__(self):
        if self.rule not in ("silverman", "fixed"):
            raise ValueError("bandwidth rule must be 'silverman' or 'fixed'")
        if not self.floor > 0:
            raise ValueError("bandwidth floor must be positive")
        if self.rule == "fixed" and self.fixed is None:
            raise ValueError("fixed bandwidth rule needs a bandwidth vector")


@dataclass
class FilterModel:
    """Everything a filter step needs besides the belief and the rng."""

    contact: ContactModel
    transition: TransitionNoise
    observation: ObservationNoise
    kde: KdeSettings = field(default_factory=KdeSettings)
    k: int = 250
    resample: str = "ess"
    collision_margin: float | None = None
    inactive_factor: bool = True

    def __post_init__(self):
        if self.resample not in ("ess", "always"):
            raise ValueError("resample must be 'ess' or 'always'")
        if self.collision_margin is None:
            self.collision_margin = 0.25 * self.contact.sdf.resolution


@dataclass
class StepInfo:
    branch: str = "conventional"
    transition_seconds: float = 0.0
    observation_seconds: float = 0.0
    deprivation: bool = False
    shortfall: int = 0
    fallback: bool = False
    resampled: bool = False


# ------------------------------------------------------------------ belief and models


def init_belief(prior: ObservationNoise, k: int, rng, unobserved=None) -> ParticleSet:
    """Gaussian offsets on observed joints, uniform ball on unobserved ones."""
    if k < 1:
        raise ValueError("k must be >= 1")
    std = np.sqrt(np.asarray(prior.offset_variance))
    n = std.size
    offsets = rng.standard_normal((k, n)) * std
    if unobserved is not None:
        unobserved = np.asarray(unobserved, dtype=bool)
        if unobserved.any():
            offsets[:, unobserved] = manifold.uniform_in_ball(
                rng, np.zeros(int(unobserved.sum())), prior.unobserved_radius, k)
    return ParticleSet.uniform(offsets)


def resolve_collision(Q_cand, model: ContactModel, margin: float):
    """Soft frictionless collision: push penetrating spheres back out.

    Configurations whose spheres all have distance >= -tolerance are
    returned unchanged.  Returns (configurations, resolved flags).
    """
    Q, status, _, _ = model.resolve_batch(Q_cand, margin)
    return Q, status == manifold._core.CONVERGED


def transition_sample(offsets, u, q_e_prev, q_e_next, noise: TransitionNoise,
                      world: ContactModel, rng, margin: float):
    """Offsets after one noisy, collision-resolved step of command ``u``."""
    offsets = np.atleast_2d(np.asarray(offsets, dtype=float))
    q = q_e_prev + offsets
    u_noisy = manifold.uniform_in_ball(rng, np.asarray(u, dtype=float), noise.r_a, len(q)) \
        if noise.r_a > 0 else np.broadcast_to(np.asarray(u, dtype=float), q.shape)
    q_cand = q + u_noisy * noise.dt
    q_next, _ = resolve_collision(q_cand, world, margin)
    return q_next - q_e_next


def contact_factors(c, distances, sigma_c):
    """Per-sensor likelihood factors (B, m).

    Active sensors score the signed distance symmetrically, so both gaps and
    penetration are penalized.  Inactive sensors use the distance to the
    obstacle set, which is zero inside it: a buried sensor that reads no
    contact gets the floor.
    """
    c = np.asarray(c, dtype=bool)
    s2 = 2.0 * sigma_c**2
    active = np.exp(-(distances**2) / s2)
    outside = np.maximum(distances, 0.0)
    inactive = np.maximum(1.0 - np.exp(-(outside**2) / s2), LIKELIHOOD_FLOOR)
    return np.where(c, active, inactive)


def contact_likelihood(c, Q, world: ContactModel, sigma_c) -> np.ndarray:
    """Pseudo-likelihood of contact readings ``c`` for configurations ``Q``."""
    d, _ = world.sensor_distances(Q)
    return np.prod(contact_factors(c, d, sigma_c), axis=1)


def kde_bandwidth(Q_plus: ParticleSet, settings: KdeSettings) -> np.ndarray:
    if settings.rule == "fixed":
        return np.maximum(np.asarray(settings.fixed, dtype=float), settings.floor)
    w = Q_plus.weights / Q_plus.weights.sum()
    mean = w @ Q_plus.offsets
    std = np.sqrt(np.maximum(w @ (Q_plus.offsets - mean) ** 2, 0.0))
    n_eff = 1.0 / np.sum(w**2)
    return np.maximum(1.06 * std * n_eff ** (-0.2), settings.floor)


def kde_log_weight(Q_plus: ParticleSet, X, settings: KdeSettings, bandwidth=None) -> np.ndarray:
    """Log density of each row of ``X`` under a Gaussian product-kernel KDE."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    h = kde_bandwidth(Q_plus, settings) if bandwidth is None else bandwidth
    w = Q_plus.weights / Q_plus.weights.sum()
    z = (X[:, None, :] - Q_plus.offsets[None, :, :]) / h
    log_k = -0.5 * np.sum(z * z, axis=2) - np.sum(np.log(np.sqrt(2.0 * np.pi) * h))
    with np.errstate(divide="ignore"):
        return logsumexp(log_k + np.log(w)[None, :], axis=1)


def kde_weight(Q_plus: ParticleSet, q, settings: KdeSettings):
    out = np.exp(kde_log_weight(Q_plus, q, settings))
    return float(out[0]) if np.ndim(q) == 1 else out


# ------------------------------------------------------------------ resampling and metrics


def effective_sample_size(Q: ParticleSet) -> float:
    return float(1.0 / np.sum(Q.weights**2))


def resample_systematic(Q: ParticleSet, rng, n: int | None = None) -> ParticleSet:
    """Systematic resampling: one uniform offset, ``n`` evenly spaced pointers."""
    total = Q.weights.sum()
    if not total > 0:
        raise ValueError("cannot resample a particle set whose weights are all zero")
    n = len(Q) if n is None else n
    cdf = np.cumsum(Q.weights / total)
    cdf[-1] = 1.0
    pointers = (rng.random() + np.arange(n)) / n
    idx = np.searchsorted(cdf, pointers, side="right")
    idx = np.minimum(idx, len(Q) - 1)
    return ParticleSet(Q.offsets[idx].copy(), np.full(n, 1.0 / n))


def w_rmse(Q: ParticleSet, q_true, q_e) -> float:
    """Weighted RMS distance of the particle configurations from ``q_true``."""
    err = (np.asarray(q_e) + Q.offsets) - np.asarray(q_true)
    sq = np.sum(err * err, axis=1)
    return float(np.sqrt(np.sum(Q.weights * sq) / np.sum(Q.weights)))


def _finish(offsets, weights, model: FilterModel, rng, info: StepInfo, force=False):
    total = weights.sum()
    if not total > 0 or not np.isfinite(total):
        info.deprivation = True
        log.debug("all particle weights vanished; resetting to uniform")
        weights = np.ones(len(weights))
        total = float(len(weights))
    Q = ParticleSet(offsets, weights / total)
    k = model.k
    if force or len(Q) != k or model.resample == "always" or effective_sample_size(Q) < 0.5 * k:
        Q = resample_systematic(Q, rng, k)
        info.resampled = True
    return Q


# ------------------------------------------------------------------ filter steps


def _forward(Q, u, q_e_prev, q_e_next, model, rng, info):
    t0 = time.perf_counter()
    offsets = transition_sample(Q.offsets, u, q_e_prev, q_e_next, model.transition,
                                model.contact, rng, model.collision_margin)
    info.transition_seconds += time.perf_counter() - t0
    return offsets


def _conventional_update(Q, offsets, q_e_next, z, model, rng, info):
    t0 = time.perf_counter()
    lik = contact_likelihood(z.contact, q_e_next + offsets, model.contact,
                             model.observation.sigma_contact)
    out = _finish(offsets, Q.weights * lik, model, rng, info)
    info.observation_seconds += time.perf_counter() - t0
    return out


def cpf_step(Q: ParticleSet, u, q_e_prev, z: Observation, model: FilterModel, rng):
    """Forward-simulate, weight by the contact likelihood, resample."""
    info = StepInfo()
    q_e_next = z.full_encoder()
    offsets = _forward(Q, u, q_e_prev, q_e_next, model, rng, info)
    return _conventional_update(Q, offsets, q_e_next, z, model, rng, info), info


def mpf_step(Q: ParticleSet, u, q_e_prev, z: Observation, strategy: str,
             model: FilterModel, rng):
    """Manifold particle filter step; identical to :func:`cpf_step` without contact."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if not z.in_contact:
        return cpf_step(Q, u, q_e_prev, z, model, rng)

    info = StepInfo(branch="manifold")
    q_e_next = z.full_encoder()
    plus_offsets = _forward(Q, u, q_e_prev, q_e_next, model, rng, info)
    Q_plus = ParticleSet(plus_offsets, Q.weights)

    t0 = time.perf_counter()
    world = model.contact
    k = model.k
    h = kde_bandwidth(Q_plus, model.kde)
    if strategy == "uniform":
        samples = manifold.sample_uniform_projection(k, z.contact, world, rng)
    elif strategy == "particle":
        samples = manifold.sample_particle_projection(q_e_next + plus_offsets, z.contact, world)
    else:
        tr = model.transition
        radius = (np.linalg.norm(u) + tr.r_a) * tr.dt + float(h.max())
        samples = manifold.sample_ball_projection(q_e_next + plus_offsets, radius, k,
                                                  z.contact, world, rng)
    info.shortfall = k - len(samples)

    if len(samples) == 0:
        log.info("manifold sampler returned nothing; falling back to the conventional update")
        info.fallback = True
        info.observation_seconds += time.perf_counter() - t0
        return _conventional_update(Q, plus_offsets, q_e_next, z, model, rng, info), info

    offsets = samples - q_e_next
    log_w = kde_log_weight(Q_plus, offsets, model.kde, h)
    if model.inactive_factor:
        d, _ = world.sensor_distances(samples)
        f = contact_factors(z.contact, d, model.observation.sigma_contact)
        log_w = log_w + np.sum(np.log(np.where(z.contact, 1.0, f)), axis=1)
    if np.all(np.isneginf(log_w)):
        weights = np.zeros(len(log_w))
    else:
        weights = np.exp(log_w - logsumexp(log_w))
    out = _finish(offsets, weights, model, rng, info, force=info.shortfall > 0)
    info.observation_seconds += time.perf_counter() - t0
    return out, info


class ParticleFilter:
    """Stateful wrapper: keeps the belief and the previous encoder reading."""

    def __init__(self, model: FilterModel, strategy: str | None = None, name: str | None = None):
        if strategy is not None and strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        self.model = model
        self.strategy = strategy
        self.name = name or ("cpf" if strategy is None else f"mpf-{strategy}")
        self.belief: ParticleSet | None = None
        self.q_e_prev = None
        self.deprivations = 0
        self.shortfalls = 0

    def reset(self, z0: Observation, rng, unobserved=None):
        self.belief = init_belief(self.model.observation, self.model.k, rng, unobserved)
        self.q_e_prev = z0.full_encoder()
        self.deprivations = 0
        self.shortfalls = 0
        return self.belief

    def step(self, u, z: Observation, rng) -> StepInfo:
        if self.strategy is None:
            self.belief, info = cpf_step(self.belief, u, self.q_e_prev, z, self.model, rng)
        else:
            self.belief, info = mpf_step(self.belief, u, self.q_e_prev, z, self.strategy,
                                         self.model, rng)
        self.q_e_prev = z.full_encoder()
        self.deprivations += info.deprivation
        self.shortfalls += info.shortfall > 0
        return info
