"""Compare the compiled and pure-Python kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--trials N] [--json PATH]

Reports, per backend: right-hand-side evaluations per second, the wall time
of the bundled voltage-dip scenario, and the time per Monte Carlo trial. The
trajectories of both backends are compared sample by sample.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from adnsim.dynamics import Scenario, Simulation, load_scenario
from adnsim.kernels import available_backends
from adnsim.montecarlo import FaultModel, sample_fault, trial_rng
from adnsim.survival import check_survival, load_curve


def _best(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_rhs(backend: str, n_eval: int) -> float:
    sim = Simulation(load_scenario("scenario_fig4.json"), backend=backend)
    model = sim._model(0.5)
    x = sim.x.copy()
    model.rhs(x)
    t0 = time.perf_counter()
    for _ in range(n_eval):
        model.rhs(x)
    return n_eval / (time.perf_counter() - t0)


def bench_scenario(backend: str, repeat: int):
    scen = load_scenario("scenario_fig4.json")
    out = {}

    def run():
        out["traj"] = Simulation(scen, backend=backend).run_until().trajectory()

    return _best(run, repeat), out["traj"]


def bench_trials(backend: str, n: int) -> float:
    scen0 = load_scenario("scenario_fig4.json")
    curve = load_curve()
    t0 = time.perf_counter()
    for i in range(n):
        fault = sample_fault(trial_rng(0, i), FaultModel(), "MV-03", 0.5)
        scen = Scenario(scen0.grid, "pq", faults=(fault,), t_end=fault.t_on + curve.horizon)
        check_survival(Simulation(scen, backend=backend).run_until().trajectory(), fault, curve)
    return (time.perf_counter() - t0) / n


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--rhs-evals", type=int, default=2000)
    ap.add_argument("--json", help="also write the results to this file")
    args = ap.parse_args(argv)

    results, trajs = {}, {}
    for be in available_backends():
        t_scen, trajs[be] = bench_scenario(be, args.repeat)
        results[be] = {
            "rhs_per_s": bench_rhs(be, args.rhs_evals),
            "scenario_s": t_scen,
            "trial_s": bench_trials(be, args.trials),
            "steps": trajs[be].stats["steps"],
        }
    print(f"{'backend':<10}{'rhs/s':>12}{'scenario s':>13}{'trial s':>10}{'steps':>8}")
    for be, r in results.items():
        print(f"{be:<10}{r['rhs_per_s']:>12.0f}{r['scenario_s']:>13.4f}{r['trial_s']:>10.4f}{r['steps']:>8d}")
    if "compiled" in results:
        py, c = results["python"], results["compiled"]
        print(f"speed-up: rhs x{c['rhs_per_s'] / py['rhs_per_s']:.1f}, "
              f"scenario x{py['scenario_s'] / c['scenario_s']:.1f}, trial x{py['trial_s'] / c['trial_s']:.1f}")
        a, b = trajs["python"], trajs["compiled"]
        same_grid = a.times.shape == b.times.shape and np.array_equal(a.times, b.times)
        diff = float(np.max(np.abs(a.voltages - b.voltages))) if same_grid else float("nan")
        print(f"max |u_python - u_compiled| over the scenario: {diff:.2e} pu")
        results["max_voltage_difference_pu"] = diff
    else:
        print("compiled backend not built; only the Python fallback was measured")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
