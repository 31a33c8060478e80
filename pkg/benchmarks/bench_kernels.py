"""Compare the compiled and pure-numpy kernels on the simulator integrator and SFCM memberships.

    python3 benchmarks/bench_kernels.py [--scenarios 64] [--repeat 3]

Prints the best wall time of each backend, the speed-up, and whether the two
outputs agree bit for bit.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from stvsa import _pykernels
from stvsa.gridgen import SimConfig, build_ieee39_topology, sample_scenario_params, scenario_stream

try:
    from stvsa import _ckernels
except ImportError:
    _ckernels = None


def integrator_args(n_scenarios: int, cfg: SimConfig):
    topo = build_ieee39_topology()
    params = [sample_scenario_params(scenario_stream(0, i), topo) for i in range(n_scenarios)]
    rng = np.random.default_rng(0)
    n = topo.node_count
    stall = rng.uniform(0, cfg.stall_gain, (n_scenarios, n))
    target = np.array([[cfg.v_ref - p.voltage_dip * np.exp(-cfg.dip_decay * h) for h in topo.hops_from(p.fault_bus)]
                       for p in params])
    fault = np.array([int(round(p.fault_duration / cfg.integrate_dt)) for p in params], dtype=np.int64)
    idx, valid = topo.padded_neighbors()
    return (np.ascontiguousarray(target), np.ascontiguousarray(stall), np.ascontiguousarray(target), fault,
            np.ascontiguousarray(idx, dtype=np.int64), np.ascontiguousarray(valid, dtype=np.uint8),
            cfg.recovery_gain, cfg.coupling, cfg.v_ref, cfg.stall_threshold, cfg.v_floor, cfg.integrate_dt,
            cfg.substeps, cfg.n_steps)


def sfcm_args(n: int, c: int = 2):
    rng = np.random.default_rng(1)
    d2 = np.ascontiguousarray(rng.uniform(0.01, 4.0, (n, c)))
    g = np.zeros((n, c))
    labeled = rng.random(n) < 0.5
    g[labeled, rng.integers(0, c, labeled.sum())] = 1.0
    return d2, np.ascontiguousarray(g), 0.5


def best_time(fn, args, repeat: int):
    best, out = float("inf"), None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t)
    return best, out


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenarios", type=int, default=64)
    ap.add_argument("--sfcm-samples", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    cases = [
        (f"integrate_trajectories ({args.scenarios} scenarios, 39 buses, 1.5 s)", "integrate_trajectories",
         integrator_args(args.scenarios, SimConfig())),
        (f"sfcm_memberships ({args.sfcm_samples} samples)", "sfcm_memberships", sfcm_args(args.sfcm_samples)),
    ]
    print(f"{'kernel':58s} {'python':>10s} {'cython':>10s} {'speed-up':>9s}  bit-equal")
    for title, name, call_args in cases:
        t_py, out_py = best_time(getattr(_pykernels, name), call_args, args.repeat)
        if _ckernels is None:
            print(f"{title:58s} {t_py:9.4f}s {'n/a':>10s} {'n/a':>9s}  n/a (extension not built)")
            continue
        t_c, out_c = best_time(getattr(_ckernels, name), call_args, args.repeat)
        print(f"{title:58s} {t_py:9.4f}s {t_c:9.4f}s {t_py / t_c:8.1f}x  {same(out_py, out_c)}")


if __name__ == "__main__":
    main()
