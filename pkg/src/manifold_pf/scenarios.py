"""Simulated benchmark scenarios: ground truth, trials and experiment reports.

A scenario file (YAML) describes the chain, its sensors and collision
spheres, the environment primitives, the workspace grid, an action script
and all filter parameters.  The truth simulator integrates the commanded
velocity exactly into the encoder reading while the true configuration
absorbs execution noise and soft-collision displacement.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import filters as flt
from . import manifold, sdf
from .filters import FilterModel, Observation, ParticleFilter
from .kinematics import ChainModel, SensorSpec
from .manifold import ContactModel, ProjectionSettings

log = logging.getLogger(__name__)

SCENARIO_DIR = Path(__file__).parent / "data" / "scenarios"
ESTIMATORS = ("cpf", "mpf-uniform", "mpf-particle", "mpf-ball")

resolve_collision = flt.resolve_collision


class ConfigError(ValueError):
    """A scenario file failed validation; ``errors`` lists (field path, message)."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.errors))


# ------------------------------------------------------------------ scenario


@dataclass(eq=False)
class Scenario:
    name: str
    chain: ChainModel
    sensors: list
    bodies: list
    environment: list
    bounds: sdf.WorkspaceBounds
    resolution: float
    actions: np.ndarray
    transition: flt.TransitionNoise
    observation: flt.ObservationNoise
    k: int = 250
    projection: ProjectionSettings = field(default_factory=ProjectionSettings)
    kde: flt.KdeSettings = field(default_factory=flt.KdeSettings)
    contact_threshold: float | None = None
    initial_encoder: np.ndarray | None = None
    unobserved: np.ndarray | None = None
    resample: str = "ess"
    inactive_factor: bool = True
    source: dict | None = None

    def __post_init__(self):
        n = self.chain.n_joints
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        if self.actions.size == 0:
            raise ConfigError([("script", "action script is empty")])
        if self.actions.shape[1] != n:
            raise ConfigError([("script", f"actions need {n} entries per line")])
        if self.contact_threshold is None:
            self.contact_threshold = 0.5 * self.resolution
        if self.initial_encoder is None:
            self.initial_encoder = np.zeros(n)
        self.initial_encoder = np.asarray(self.initial_encoder, dtype=float)
        mask = np.zeros(n, dtype=bool)
        if self.unobserved is not None and len(self.unobserved):
            mask[np.asarray(self.unobserved, dtype=int)] = True
        self.unobserved = mask
        self._sdf = None
        self._world = None

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_world"] = None
        return state

    @property
    def sdf(self) -> sdf.SdfGrid:
        if self._sdf is None:
            self._sdf = sdf.build_sdf(self.environment, self.bounds, self.resolution)
        return self._sdf

    @property
    def world(self) -> ContactModel:
        if self._world is None:
            self._world = ContactModel(self.chain, self.sensors, self.sdf, self.projection,
                                       bodies=self.bodies)
        return self._world

    @property
    def steps(self) -> int:
        return len(self.actions)

    def filter_model(self) -> FilterModel:
        return FilterModel(self.world, self.transition, self.observation, self.kde, self.k,
                           resample=self.resample, inactive_factor=self.inactive_factor)

    def config_hash(self) -> str:
        blob = json.dumps(self.source or {}, sort_keys=True, default=str).encode()
        h = hashlib.sha256(blob)
        h.update(self.actions.tobytes())
        return h.hexdigest()


# ------------------------------------------------------------------ loading


def _vec(x, path, errors, size=None):
    try:
        v = np.asarray(x, dtype=float).ravel()
    except (TypeError, ValueError):
        errors.append((path, "expected a numeric vector"))
        return None
    if size is not None and v.size not in (size if isinstance(size, tuple) else (size,)):
        errors.append((path, f"expected {size} entries, got {v.size}"))
        return None
    return v


def _positive(cfg, key, path, errors, default=None, allow_zero=False):
    val = cfg.get(key, default)
    if val is None:
        return None
    try:
        val = float(val)
    except (TypeError, ValueError):
        errors.append((f"{path}.{key}", "expected a number"))
        return None
    if val < 0 or (val == 0 and not allow_zero):
        errors.append((f"{path}.{key}", "must be positive" if not allow_zero else "must be >= 0"))
        return None
    return val


def evenly_spaced_sensors(chain: ChainModel, links, count, radius, start_id=0, span=(0.0, 1.0)):
    """``count`` sensors at equal arc length along the listed links.

    Link ``j`` runs from joint ``j`` to joint ``j + 1`` (or the tip frame for the
    last joint).  With total length ``L`` and ``span = (a, b)``, sensor ``i`` sits
    at arc length ``L * (a + (i + 1) * (b - a) / count)``.
    """
    n = chain.n_joints
    segs = []
    for j in links:
        vec = chain.offsets[j + 1] if j + 1 < n else chain.tip
        segs.append((j, vec, float(np.linalg.norm(vec))))
    total = sum(s[2] for s in segs)
    if total <= 0:
        raise ValueError("links have zero length")
    a, b = span
    out = []
    for i in range(count):
        s = total * (a + (i + 1) * (b - a) / count)
        for j, vec, length in segs:
            if s <= length + 1e-12 or j == segs[-1][0]:
                frac = min(s / length, 1.0) if length > 0 else 0.0
                local = vec * frac
                out.append(SensorSpec(j, tuple(local[: chain.dimension]), radius, start_id + i))
                break
            s -= length
    return out


def _spheres(items, chain, path, errors, sensing, start_id=0):
    out = []
    for i, item in enumerate(items or []):
        p = f"{path}[{i}]"
        if not isinstance(item, dict):
            errors.append((p, "expected a mapping"))
            continue
        if "count" in item:
            links = item.get("links", [])
            if not links or any(not isinstance(j, int) or not 0 <= j < chain.n_joints for j in links):
                errors.append((f"{p}.links", f"link indices must lie in 0..{chain.n_joints - 1}"))
                continue
            r = _positive(item, "radius", p, errors, 0.0, allow_zero=True)
            span = item.get("span", [0.0, 1.0])
            if len(span) != 2 or not 0.0 <= span[0] < span[1] <= 1.0:
                errors.append((f"{p}.span", "expected [a, b] with 0 <= a < b <= 1"))
                continue
            made = evenly_spaced_sensors(chain, links, int(item["count"]), r or 0.0,
                                         start_id + len(out), tuple(span))
            out.extend(SensorSpec(s.link_index, s.local_offset, s.radius, s.id, sensing) for s in made)
            continue
        link = item.get("link")
        if not isinstance(link, int) or not 0 <= link < chain.n_joints:
            errors.append((f"{p}.link", f"link index must lie in 0..{chain.n_joints - 1}"))
            continue
        off = _vec(item.get("offset", [0.0] * chain.dimension), f"{p}.offset", errors,
                   (chain.dimension, 3))
        r = _positive(item, "radius", p, errors, 0.0, allow_zero=True)
        if off is None or r is None:
            continue
        out.append(SensorSpec(link, tuple(off), r, start_id + len(out), sensing))
    return out


def _primitive(item, dim, path, errors):
    kind = item.get("type") if isinstance(item, dict) else None
    try:
        if kind == "point":
            return sdf.Point(tuple(_vec(item["center"], f"{path}.center", errors, dim)))
        if kind == "sphere":
            return sdf.Sphere(tuple(_vec(item["center"], f"{path}.center", errors, dim)),
                              float(item["radius"]))
        if kind == "box":
            return sdf.Box(tuple(_vec(item["center"], f"{path}.center", errors, dim)),
                           tuple(_vec(item["half_extents"], f"{path}.half_extents", errors, dim)))
        if kind == "half_space":
            return sdf.HalfSpace(tuple(_vec(item["normal"], f"{path}.normal", errors, dim)),
                                 float(item["offset"]))
        if kind == "bitmap":
            if dim != 2:
                errors.append((path, "bitmaps are planar only"))
                return None
            return sdf.Bitmap.from_rows(item["rows"], tuple(item["origin"]),
                                        float(item["resolution"]))
    except KeyError as exc:
        errors.append((path, f"missing field {exc.args[0]!r}"))
        return None
    except (TypeError, ValueError) as exc:
        errors.append((path, str(exc)))
        return None
    errors.append((f"{path}.type", "expected one of point, sphere, box, half_space, bitmap"))
    return None


def read_script(path) -> np.ndarray:
    """One whitespace-separated velocity vector per line; '#' starts a comment."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append([float(x) for x in line.split()])
    return np.array(rows, dtype=float)


def scenario_from_dict(cfg: dict, base_dir=".") -> Scenario:
    errors = []
    if not isinstance(cfg, dict):
        raise ConfigError([("<root>", "scenario file must be a mapping")])
    dim = cfg.get("dimension")
    if dim not in (2, 3):
        raise ConfigError([("dimension", "must be 2 or 3")])

    ch = cfg.get("chain") or {}
    offsets = ch.get("offsets")
    if not offsets:
        raise ConfigError([("chain.offsets", "at least one joint is required")])
    n = len(offsets)
    chain = None
    try:
        lower = _vec(ch.get("lower", -math.pi), "chain.lower", errors, (1, n))
        upper = _vec(ch.get("upper", math.pi), "chain.upper", errors, (1, n))
        chain = ChainModel(dim, offsets, ch.get("axes"), lower, upper,
                           base=ch.get("base", [0.0] * dim), tip=ch.get("tip", [0.0] * dim))
    except (TypeError, ValueError) as exc:
        errors.append(("chain", str(exc)))
    if chain is None:
        raise ConfigError(errors)

    sensors = _spheres(cfg.get("sensors"), chain, "sensors", errors, True)
    bodies = _spheres(cfg.get("bodies"), chain, "bodies", errors, False, start_id=len(sensors))
    if not sensors:
        errors.append(("sensors", "at least one contact sensor is required"))

    ws = cfg.get("workspace") or {}
    res = _positive(ws, "resolution", "workspace", errors, 0.02)
    bounds = None
    try:
        bounds = sdf.WorkspaceBounds(tuple(ws["min"]), tuple(ws["max"]))
        if bounds.dimension != dim:
            errors.append(("workspace", "bounds dimension differs from scenario dimension"))
    except KeyError as exc:
        errors.append((f"workspace.{exc.args[0]}", "missing"))
    except (TypeError, ValueError) as exc:
        errors.append(("workspace", str(exc)))

    env = []
    for i, item in enumerate(cfg.get("environment") or []):
        prim = _primitive(item, dim, f"environment[{i}]", errors)
        if prim is not None:
            env.append(prim)

    sc = cfg.get("script") or {}
    actions = None
    dt = _positive(sc, "dt", "script", errors, 0.1)
    if "file" in sc:
        try:
            actions = read_script(Path(base_dir) / sc["file"])
        except (OSError, ValueError) as exc:
            errors.append(("script.file", str(exc)))
    elif "actions" in sc:
        actions = _vec(sc["actions"], "script.actions", errors)
        if actions is not None:
            actions = actions.reshape(-1, n)
    else:
        errors.append(("script", "needs 'file' or 'actions'"))

    nz = cfg.get("noise") or {}
    r_a = _positive(nz, "r_a", "noise", errors, 0.05, allow_zero=True)
    var = nz.get("offset_variance", 1.0)
    var = _vec(np.broadcast_to(np.asarray(var, dtype=float), (n,)) if np.ndim(var) == 0 else var,
               "noise.offset_variance", errors, n)
    if var is not None and np.any(var <= 0):
        errors.append(("noise.offset_variance", "variances must be positive"))
    sigma_c = _positive(nz, "sigma_contact", "noise", errors, None)
    unobs_r = _positive(nz, "unobserved_radius", "noise", errors, 1.0)

    fcfg = cfg.get("filter") or {}
    k = fcfg.get("k", 250)
    if not isinstance(k, int) or k < 1:
        errors.append(("filter.k", "must be a positive integer"))
    resample = fcfg.get("resample", "ess")
    if resample not in ("ess", "always"):
        errors.append(("filter.resample", "must be 'ess' or 'always'"))
    kde = flt.KdeSettings()
    try:
        kde = flt.KdeSettings(**(fcfg.get("kde") or {}))
    except (TypeError, ValueError) as exc:
        errors.append(("filter.kde", str(exc)))
    projection = ProjectionSettings()
    try:
        projection = ProjectionSettings(**(cfg.get("projection") or {}))
    except (TypeError, ValueError) as exc:
        errors.append(("projection", str(exc)))
    delta = _positive(cfg, "contact_threshold", "<root>", errors, None)
    q_e0 = _vec(cfg.get("initial_encoder", [0.0] * n), "initial_encoder", errors, n)
    unobserved = cfg.get("unobserved") or []
    if any(not isinstance(j, int) or not 0 <= j < n for j in unobserved):
        errors.append(("unobserved", f"joint indices must lie in 0..{n - 1}"))

    if errors:
        raise ConfigError(errors)
    try:
        return Scenario(
            name=str(cfg.get("name", "scenario")),
            chain=chain, sensors=sensors, bodies=bodies, environment=env,
            bounds=bounds, resolution=res, actions=actions,
            transition=flt.TransitionNoise(r_a, dt),
            observation=flt.ObservationNoise(tuple(var), sigma_c or res, unobs_r),
            k=k, projection=projection, kde=kde, contact_threshold=delta,
            initial_encoder=q_e0, unobserved=unobserved, resample=resample,
            inactive_factor=bool(fcfg.get("inactive_factor", True)), source=cfg,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError([("<root>", str(exc))]) from exc


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists() and (SCENARIO_DIR / path).exists():
        path = SCENARIO_DIR / path
    if not path.exists() and (SCENARIO_DIR / f"{path}.yaml").exists():
        path = SCENARIO_DIR / f"{path}.yaml"
    try:
        cfg = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError([("<file>", str(exc))]) from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "<file>"
        raise ConfigError([(where, str(exc))]) from exc
    return scenario_from_dict(cfg, base_dir=path.parent)


def shipped_scenarios():
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.yaml"))


# ------------------------------------------------------------------ truth


@dataclass
class TruthState:
    q_true: np.ndarray
    q_e: np.ndarray

    @property
    def offset(self) -> np.ndarray:
        return self.q_true - self.q_e


def observe(state: TruthState, scenario: Scenario, rng=None) -> Observation:
    """Encoders on the observed joints plus thresholded contact readings."""
    d, _ = scenario.world.sensor_distances(state.q_true)
    c = d[0] <= scenario.contact_threshold
    mask = ~scenario.unobserved
    return Observation(state.q_e[mask], c, mask)


def _resolve_one(q, scenario):
    world = scenario.world
    margin = 0.25 * scenario.resolution
    Q, ok = resolve_collision(q[None], world, margin)
    if not ok[0]:
        log.debug("truth collision left unresolved penetration")
    return Q[0]


def step_truth(state: TruthState, u, scenario: Scenario, rng) -> TruthState:
    """Encoders integrate the command; the true arm gets noise and contact."""
    u = np.asarray(u, dtype=float)
    tr = scenario.transition
    q_e = state.q_e + u * tr.dt
    if tr.r_a > 0:
        u_noisy = manifold.uniform_in_ball(rng, u, tr.r_a, 1)[0]
    else:
        u_noisy = u
    q_true = _resolve_one(state.q_true + u_noisy * tr.dt, scenario)
    return TruthState(q_true, q_e)


def initial_truth(scenario: Scenario, rng) -> TruthState:
    prior = flt.init_belief(scenario.observation, 1, rng, scenario.unobserved)
    q_e = scenario.initial_encoder.copy()
    q_e[scenario.unobserved] = 0.0
    q_true = _resolve_one(q_e + prior.offsets[0], scenario)
    return TruthState(q_true, q_e)


# ------------------------------------------------------------------ trials


@dataclass
class TrialTrace:
    estimators: list
    wrmse: np.ndarray            # (T, E)
    contact: np.ndarray          # (T,) any sensor in contact
    transition_ms: np.ndarray    # (T, E)
    observation_ms: np.ndarray   # (T, E)
    deprivations: np.ndarray     # (E,)
    shortfalls: np.ndarray       # (E,)
    q_true: np.ndarray           # (T, n)

    def __len__(self):
        return len(self.contact)

    def contact_phase_wrmse(self) -> np.ndarray:
        """Per-estimator mean W-RMSE over the steps with sensed contact (nan if none)."""
        if not self.contact.any():
            return np.full(len(self.estimators), np.nan)
        return self.wrmse[self.contact].mean(axis=0)


class OracleEstimator:
    """Holds a single particle at the true offset; validates the harness."""

    name = "oracle"
    uses_truth = True

    def reset(self, z0, rng, unobserved=None, truth=None):
        self.belief = flt.ParticleSet.uniform(truth.offset[None])

    def step(self, u, z, rng, truth=None):
        self.belief = flt.ParticleSet.uniform(truth.offset[None])
        return flt.StepInfo()


def make_estimator(name: str, scenario: Scenario):
    if name == "cpf":
        return ParticleFilter(scenario.filter_model(), None, name)
    if name.startswith("mpf-") and name[4:] in flt.STRATEGIES:
        return ParticleFilter(scenario.filter_model(), name[4:], name)
    raise ValueError(f"unknown estimator {name!r}; valid: {', '.join(ESTIMATORS)}")


def run_trial(scenario: Scenario, estimators, seed: int) -> TrialTrace:
    """One trial: a truth rollout with every estimator stepped in lockstep."""
    ests = [make_estimator(e, scenario) if isinstance(e, str) else e for e in estimators]
    truth_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    # each estimator's stream is keyed by its name, so the roster does not matter
    est_rngs = [np.random.default_rng(np.random.SeedSequence(
        seed, spawn_key=(1, zlib.crc32(getattr(e, "name", str(e)).encode()))))
        for e in ests]

    state = initial_truth(scenario, truth_rng)
    z = observe(state, scenario)
    for est, rng in zip(ests, est_rngs):
        if getattr(est, "uses_truth", False):
            est.reset(z, rng, scenario.unobserved, truth=state)
        else:
            est.reset(z, rng, scenario.unobserved)

    T, E = scenario.steps, len(ests)
    wr = np.zeros((T, E))
    tr_ms = np.zeros((T, E))
    ob_ms = np.zeros((T, E))
    contact = np.zeros(T, dtype=bool)
    q_hist = np.zeros((T, scenario.chain.n_joints))
    for t, u in enumerate(scenario.actions):
        state = step_truth(state, u, scenario, truth_rng)
        z = observe(state, scenario)
        contact[t] = z.in_contact
        q_hist[t] = state.q_true
        for e, (est, rng) in enumerate(zip(ests, est_rngs)):
            if getattr(est, "uses_truth", False):
                info = est.step(u, z, rng, truth=state)
            else:
                info = est.step(u, z, rng)
            wr[t, e] = flt.w_rmse(est.belief, state.q_true, z.full_encoder())
            tr_ms[t, e] = 1e3 * info.transition_seconds
            ob_ms[t, e] = 1e3 * info.observation_seconds
    return TrialTrace(
        [getattr(e, "name", str(e)) for e in ests], wr, contact, tr_ms, ob_ms,
        np.array([getattr(e, "deprivations", 0) for e in ests]),
        np.array([getattr(e, "shortfalls", 0) for e in ests]),
        q_hist,
    )


# ------------------------------------------------------------------ experiments


def mean_ci(x, axis=0):
    """Mean and 95% normal-approximation interval; zero width for one sample."""
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    m = x.mean(axis=axis)
    if n < 2:
        return m, m.copy(), m.copy()
    half = 1.96 * x.std(axis=axis, ddof=1) / math.sqrt(n)
    return m, m - half, m + half


@dataclass
class ExperimentReport:
    scenario: str
    estimators: list
    traces: list
    mean_wrmse: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    contact_fraction: np.ndarray
    shaded: np.ndarray
    transition_ms: np.ndarray
    observation_ms: np.ndarray
    timing: dict

    def rows(self, timing=True):
        for t in range(len(self.shaded)):
            for e, name in enumerate(self.estimators):
                yield {
                    "timestep": t + 1,
                    "estimator": name,
                    "mean_wrmse": f"{self.mean_wrmse[t, e]:.9g}",
                    "ci_low": f"{self.ci_low[t, e]:.9g}",
                    "ci_high": f"{self.ci_high[t, e]:.9g}",
                    "contact_fraction": f"{self.contact_fraction[t]:.9g}",
                    "transition_ms": f"{self.transition_ms[t, e]:.6g}" if timing else "",
                    "observation_ms": f"{self.observation_ms[t, e]:.6g}" if timing else "",
                }

    def timing_table(self) -> str:
        lines = [f"{'Algorithm':<14}{'Total':>20}{'Transition':>20}{'Observation':>20}"]
        for name in self.estimators:
            row = self.timing[name]
            cells = [f"{row[k][0]:.1f} +/- {row[k][1]:.1f} ms" for k in ("total", "transition", "observation")]
            lines.append(f"{name:<14}" + "".join(f"{c:>20}" for c in cells))
        return "\n".join(lines)


def _trial_job(args):
    scenario, estimators, seed = args
    return run_trial(scenario, estimators, seed)


def run_experiment(scenario: Scenario, estimators, n_trials: int, base_seed: int = 0,
                   workers: int | None = None, progress=None) -> ExperimentReport:
    """Run ``n_trials`` seeded trials (seed = base_seed + index) and aggregate."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    estimators = list(estimators)
    for e in estimators:
        if e not in ESTIMATORS:
            raise ValueError(f"unknown estimator {e!r}; valid: {', '.join(ESTIMATORS)}")
    scenario.sdf  # build once before forking
    jobs = [(scenario, estimators, base_seed + i) for i in range(n_trials)]
    workers = workers or os.cpu_count() or 1
    if workers > 1 and n_trials > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(_trial_job, jobs))
    else:
        traces = []
        for job in jobs:
            traces.append(_trial_job(job))
            if progress is not None:
                progress(len(traces), n_trials)
    return aggregate(scenario.name, estimators, traces)


def aggregate(name, estimators, traces) -> ExperimentReport:
    W = np.stack([t.wrmse for t in traces])              # (N, T, E)
    C = np.stack([t.contact for t in traces])            # (N, T)
    TR = np.stack([t.transition_ms for t in traces])
    OB = np.stack([t.observation_ms for t in traces])
    mean, lo, hi = mean_ci(W, axis=0)
    timing = {}
    for e, est in enumerate(estimators):
        tr = TR[:, :, e][C]
        ob = OB[:, :, e][C]
        row = {}
        for key, x in (("total", tr + ob), ("transition", tr), ("observation", ob)):
            if x.size == 0:
                row[key] = (float("nan"), float("nan"))
            else:
                half = 1.96 * x.std(ddof=1) / math.sqrt(x.size) if x.size > 1 else 0.0
                row[key] = (float(x.mean()), float(half))
        row["median_total"] = float(np.median(tr + ob)) if tr.size else float("nan")
        timing[est] = row
    return ExperimentReport(
        name, estimators, traces, mean, lo, hi, C.mean(axis=0), C.any(axis=0),
        TR.mean(axis=0), OB.mean(axis=0), timing,
    )
