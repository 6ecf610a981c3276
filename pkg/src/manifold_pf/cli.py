"""Command-line front end: ``run``, ``sdf-slice`` and ``validate``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, _core
from . import scenarios as sc

log = logging.getLogger("manifold_pf")

CSV_FIELDS = ("timestep", "estimator", "mean_wrmse", "ci_low", "ci_high",
              "contact_fraction", "transition_ms", "observation_ms")


class UsageError(Exception):
    pass


def _estimators(text: str) -> list:
    names = [s.strip() for s in text.split(",") if s.strip()]
    if not names:
        raise UsageError(f"no estimators given; valid: {', '.join(sc.ESTIMATORS)}")
    bad = [n for n in names if n not in sc.ESTIMATORS]
    if bad:
        raise UsageError(f"unknown estimator {bad[0]!r}; valid: {', '.join(sc.ESTIMATORS)}")
    if len(set(names)) != len(names):
        raise UsageError("estimators may only be listed once")
    return names


def _scenario_path(name) -> Path:
    p = Path(name)
    for cand in (p, sc.SCENARIO_DIR / p, sc.SCENARIO_DIR / f"{p}.yaml"):
        if cand.exists():
            return cand.resolve()
    raise UsageError(f"scenario file not found: {name}")


def write_experiment_csv(report, path, timing=True):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(report.rows(timing=timing))


def write_trace(trace, seed, path):
    """Per-step W-RMSE of every estimator plus the contact indicator."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestep", "contact"] + list(trace.estimators))
        for t in range(len(trace)):
            w.writerow([t + 1, int(trace.contact[t])] + [f"{x:.9g}" for x in trace.wrmse[t]])


def manifest(scenario, path, estimators, trials, seed, timing):
    return {
        "scenario": str(path),
        "scenario_name": scenario.name,
        "config_hash": scenario.config_hash(),
        "estimators": list(estimators),
        "trials": trials,
        "base_seed": seed,
        "trial_seeds": [seed + i for i in range(trials)],
        "timing_columns": timing,
        "versions": {
            "manifold_pf": __version__,
            "backend": _core.BACKEND,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }


def cmd_run(args) -> int:
    if args.manifest:
        spec = json.loads(Path(args.manifest).read_text())
        scen_path = _scenario_path(spec["scenario"])
        estimators = spec["estimators"]
        trials, seed = spec["trials"], spec["base_seed"]
        timing = spec.get("timing_columns", True)
    else:
        if not args.scenario:
            raise UsageError("--scenario is required")
        scen_path = _scenario_path(args.scenario)
        estimators = _estimators(args.estimators)
        trials, seed, timing = args.trials, args.seed, not args.no_timing
    if trials < 1:
        raise UsageError("--trials must be >= 1")
    scenario = sc.load_scenario(scen_path)
    if args.manifest and scenario.config_hash() != spec["config_hash"]:
        raise UsageError("scenario file changed since the manifest was written (config hash differs)")

    out = Path(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    log.info("running %d trials of %s with %s", trials, scenario.name, ", ".join(estimators))

    def progress(done, total):
        log.info("trial %d/%d", done, total)

    report = sc.run_experiment(scenario, estimators, trials, seed, args.workers, progress)
    write_experiment_csv(report, out / "experiment.csv", timing=timing)
    for i, trace in enumerate(report.traces):
        write_trace(trace, seed + i, out / "traces" / f"trial_{seed + i:06d}.csv")
    table = report.timing_table()
    (out / "timing.txt").write_text(table + "\n")
    (out / "manifest.json").write_text(
        json.dumps(manifest(scenario, scen_path, estimators, trials, seed, timing), indent=2) + "\n")
    print(table)
    return 0


def cmd_sdf_slice(args) -> int:
    scenario = sc.load_scenario(_scenario_path(args.scenario))
    grid = scenario.sdf
    axis = args.axis if args.axis is not None else grid.dimension - 1 if grid.dimension == 3 else 2
    try:
        values = grid.slice(axis, args.index)
    except IndexError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(values):
            w.writerow([f"{x:.9g}" for x in row])
    print(f"wrote {values.shape[0]}x{values.shape[1] if values.ndim > 1 else 1} slice to {out}")
    return 0


def _num(x) -> str:
    return np.format_float_positional(float(x), precision=6, trim="0")


def _diag_text(v):
    v = np.asarray(v, dtype=float)
    if np.all(v == v[0]):
        return f"{_num(v[0])}·I"
    return "diag(" + ", ".join(_num(x) for x in v) + ")"


def parameter_table(s: sc.Scenario) -> list:
    tr, ob, pr = s.transition, s.observation, s.world.settings
    rows = [
        ("name", s.name),
        ("dimension", s.chain.dimension),
        ("joints", s.chain.n_joints),
        ("contact sensors", len(s.sensors)),
        ("body spheres", len(s.bodies)),
        ("joint limits", f"[{_diag_text(s.chain.lower)}, {_diag_text(s.chain.upper)}]"),
        ("workspace", "[" + ", ".join(map(_num, s.bounds.lo)) + "] .. ["
         + ", ".join(map(_num, s.bounds.hi)) + "]"),
        ("sdf resolution", f"{s.resolution:g} m"),
        ("obstacles", len(s.environment)),
        ("script steps", f"{s.steps} (dt = {tr.dt:g} s)"),
        ("offset covariance", _diag_text(ob.offset_variance)),
        ("motion noise r_a", f"{tr.r_a:g} rad/s"),
        ("contact scale sigma_c", f"{ob.sigma_contact:g} m"),
        ("contact threshold", f"{s.contact_threshold:g} m"),
        ("particles k", s.k),
        ("resampling", s.resample),
        ("inactive-sensor factor", "on" if s.inactive_factor else "off"),
        ("kde bandwidth", s.kde.rule),
        ("projection step", pr.learning_rate),
        ("projection iterations", pr.max_iterations),
        ("manifold tolerance", f"{pr.manifold_tolerance:g} m^2"),
        ("config hash", s.config_hash()[:16]),
    ]
    return rows


def cmd_validate(args) -> int:
    scenario = sc.load_scenario(_scenario_path(args.scenario))
    width = max(len(k) for k, _ in parameter_table(scenario))
    for key, val in parameter_table(scenario):
        print(f"{key:<{width}}  {val}")
    print("valid")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="manifold-pf", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run seeded trials and write CSVs, traces and a manifest")
    r.add_argument("--scenario", help="scenario YAML path or shipped name")
    r.add_argument("--estimators", default=",".join(sc.ESTIMATORS),
                   help="comma-separated subset of " + ", ".join(sc.ESTIMATORS))
    r.add_argument("--trials", type=int, default=10)
    r.add_argument("--seed", type=int, default=0, help="base seed; trial i uses seed + i")
    r.add_argument("--out", default="results")
    r.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: all CPUs); results do not depend on it")
    r.add_argument("--no-timing", action="store_true",
                   help="leave the timing columns empty so repeated runs are byte-identical")
    r.add_argument("--manifest", help="rerun exactly the run described by a manifest.json")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sdf-slice", help="write one axis-aligned slice of the SDF as CSV")
    s.add_argument("--scenario", required=True)
    s.add_argument("--axis", type=int, default=None, help="0, 1 or 2 (default: 2)")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sdf_slice)

    v = sub.add_parser("validate", help="check a scenario file and print its parameters")
    v.add_argument("--scenario", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except sc.ConfigError as exc:
        for path, msg in exc.errors:
            print(f"error: {path}: {msg}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
