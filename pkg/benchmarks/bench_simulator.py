"""Compare the numba and pure-numpy closed-loop kernels.

Usage::

    python3 benchmarks/bench_simulator.py --config table1 --steps 50000 --repeats 3
"""

import argparse
import logging
import time

import numpy as np

from mmcctl import _kernels
from mmcctl.config import load_config, shipped_config_path
from mmcctl.pipeline import build_plant, run_synthesis
from mmcctl.simulator import SimConfig, run_closed_loop

logger = logging.getLogger(__name__)


def best_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="table1", help="shipped config name or YAML path")
    ap.add_argument("--steps", type=int, default=50_000)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--scenario", choices=["bilinear", "linear"], default="bilinear")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    path = shipped_config_path(args.config) if not args.config.endswith((".yaml", ".yml")) else args.config
    cfg = load_config(path)
    plant = build_plant(cfg)
    ctrl, _, _ = run_synthesis(cfg, plant)
    sim = SimConfig(scenario=args.scenario, steps=args.steps)

    def run(jit):
        return run_closed_loop(plant.model, ctrl, sim, jit=jit)

    t_np, tr_np = best_time(lambda: run(False), args.repeats)
    print(f"numpy  {args.scenario:8s} {args.steps:7d} steps  {t_np:8.3f} s  {args.steps / t_np:12.0f} steps/s")
    if not _kernels.HAVE_NUMBA:
        print("numba not installed; skipping the compiled kernel")
        return 0

    t0 = time.perf_counter()
    run(True)  # first call pays compilation (or cache load)
    t_compile = time.perf_counter() - t0
    t_jit, tr_jit = best_time(lambda: run(True), args.repeats)
    print(f"numba  {args.scenario:8s} {args.steps:7d} steps  {t_jit:8.3f} s  {args.steps / t_jit:12.0f} steps/s"
          f"  (first call {t_compile:.2f} s)")
    print(f"speedup {t_np / t_jit:.1f}x")
    diff = float(np.max(np.abs(tr_np.x - tr_jit.x)) / max(np.max(np.abs(tr_np.x)), 1e-300))
    print(f"max relative state difference {diff:.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
