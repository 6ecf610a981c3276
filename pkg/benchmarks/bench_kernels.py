"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times the operations that dominate a filter step (SDF build, batched
sensor distances, manifold projection) and one full 7-DOF contact step,
once per backend, and prints the median of ``--repeat`` runs.
"""

import argparse
import statistics
import time

import numpy as np

from manifold_pf import _core, sdf
from manifold_pf import filters as flt
from manifold_pf import scenarios as sc


def _median_ms(fn, repeat):
    fn()  # warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(1e3 * (time.perf_counter() - t0))
    return statistics.median(times)


def cases():
    two = sc.load_scenario("two_dof")
    seven = sc.load_scenario("seven_dof")
    rng = np.random.default_rng(0)
    bounds = sdf.WorkspaceBounds((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    prims = [sdf.Sphere(tuple(rng.uniform(-0.8, 0.8, 3)), 0.2) for _ in range(5)]
    world2 = two.world
    Q2 = rng.uniform(-np.pi, np.pi, size=(250, 2))
    c2 = np.zeros(len(two.sensors), dtype=bool)
    c2[-1] = True
    world7 = seven.world
    Q7 = rng.normal(scale=0.3, size=(250, 7))
    model7 = seven.filter_model()

    def contact_step():
        # a belief around the initial encoder, stepped with the fingertip in contact
        step_rng = np.random.default_rng(1)
        z0 = flt.Observation(seven.initial_encoder, np.zeros(len(seven.sensors), dtype=bool))
        belief = flt.init_belief(seven.observation, seven.k, step_rng)
        c = np.zeros(len(seven.sensors), dtype=bool)
        c[0] = True
        z = flt.Observation(seven.initial_encoder, c)
        flt.mpf_step(belief, seven.actions[0], z0.full_encoder(), z, "ball", model7, step_rng)

    return {
        "sdf build 100^3": lambda: sdf.build_sdf(prims, bounds, 0.02),
        "sensor distances 2-DOF x250": lambda: world2.sensor_distances(Q2),
        "sensor distances 7-DOF x250": lambda: world7.sensor_distances(Q7),
        "projection 2-DOF x250": lambda: world2.project_batch(Q2, c2),
        "mpf-ball contact step 7-DOF": contact_step,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = [b for b in ("python", "compiled") if b in _core.BACKENDS]
    results = {}
    for name in backends:
        prev = _core.use_backend(name)
        try:
            for label, fn in cases().items():
                results.setdefault(label, {})[name] = _median_ms(fn, args.repeat)
        finally:
            _core.use_backend(prev)
    print(f"{'operation':<32}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}")
    for label, row in results.items():
        cells = "".join(f"{row[b]:>14.2f}" for b in backends)
        speed = f"{row['python'] / row['compiled']:>9.1f}x" if "compiled" in row else ""
        print(f"{label:<32}{cells}{speed}")


if __name__ == "__main__":
    main()
