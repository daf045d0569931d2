"""Command-line entry point: ``adnsim <subcommand> ...``.

Exit codes: 0 success, 1 analysis failure (non-convergence, failed
simulation, validation outside tolerance), 2 usage or input error.
The default output directory comes from ``ADNSIM_OUTPUT_DIR`` (else the
working directory).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .dynamics import (SimulationError, load_scenario, read_csv_rows, simulate, write_config_comment,
                       write_trajectory_csv)
from .montecarlo import (FaultModel, envelope_study, single_node_survivability, write_envelope_csv,
                         write_summary_json, write_trials_csv)
from .network import GridError, LoadModel, bundled_path, load_grid
from .powerflow import PowerFlowError, solve_power_flow, transformer_mv_flow
from .survival import check_survival, load_curve
from . import svg

EXIT_OK, EXIT_ANALYSIS, EXIT_USAGE = 0, 1, 2
OUTPUT_ENV = "ADNSIM_OUTPUT_DIR"


class UsageError(Exception):
    """Bad input detected after argument parsing (exit code 2)."""


class AnalysisFailure(Exception):
    """The analysis ran but did not succeed (exit code 1)."""


@dataclass
class RunConfig:
    """Effective configuration of one invocation.

    ``workers`` and ``out_dir`` are kept out of :meth:`embedded` because they
    do not influence results; outputs stay byte-identical across them.
    """

    subcommand: str
    out_dir: Path
    grid: str | None = None
    scenario: str | None = None
    curve: str | None = None
    reference: str | None = None
    seed: int = 0
    samples: int | None = None
    load_model: str | None = None
    workers: int | None = None
    plot: bool = False
    extra: dict[str, Any] = field(default_factory=dict)

    def embedded(self) -> dict[str, Any]:
        doc = {"subcommand": self.subcommand, "adnsim_version": __version__}
        for key in ("grid", "scenario", "curve", "reference", "samples", "load_model"):
            val = getattr(self, key)
            if val is not None:
                doc[key] = val
        if self.subcommand.startswith("survive"):
            doc["seed"] = self.seed
        doc.update(self.extra)
        return doc


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _existing(path: str | None, what: str, bundled: str | None = None) -> str | None:
    """Return the path if it exists, the bundled file of the same name, or raise UsageError."""
    if path is None:
        return None
    p = Path(path)
    if p.exists():
        return str(p)
    if bundled and p.name == bundled and bundled_path(bundled).exists():
        return str(bundled_path(bundled))
    if bundled is None and not p.parent.parts and bundled_path(p.name).exists():
        return str(bundled_path(p.name))
    raise UsageError(f"{what} file not found: {path}")


def _load_grid(cfg: RunConfig):
    return load_grid(cfg.grid or bundled_path("cigre12.json"))


def _load_curve(cfg: RunConfig):
    return load_curve(cfg.curve)


def _out(cfg: RunConfig, name: str) -> Path:
    return cfg.out_dir / name


def _load_models(value: str) -> list[LoadModel]:
    if value == "both":
        return [LoadModel.CONSTANT_PQ, LoadModel.CONSTANT_Z]
    return [LoadModel.parse(value)]


def _fault_model(args) -> FaultModel:
    return FaultModel(r_on_lo=args.r_min, r_on_hi=args.r_max)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_powerflow(cfg: RunConfig, args) -> int:
    grid = _load_grid(cfg)
    if args.tap is not None:
        grid = grid.with_tap(args.tap)
    try:
        sol = solve_power_flow(grid, cfg.load_model)
    except PowerFlowError as exc:
        raise AnalysisFailure(f"power flow did not converge: {exc}") from exc
    p, q = transformer_mv_flow(sol)
    s = sol.injections() * grid.s_base
    path = _out(cfg, "powerflow_buses.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_config_comment(fh, cfg.embedded())
        fh.write("bus_id,v_mag_pu,v_angle_deg,p_inj_mw,q_inj_mvar\n")
        for i, b in enumerate(grid.bus_ids):
            v = sol.voltages[i]
            # full precision so a self-validation reports zero deviation
            fh.write(f"{b},{float(abs(v))!r},{math.degrees(math.atan2(v.imag, v.real))!r},"
                     f"{s[i].real:.9f},{s[i].imag:.9f}\n")
    print(f"converged in {sol.iterations} iterations, residual {sol.residual_norm:.3e} pu")
    print(f"P_meas = {p:.3f} MW, Q_meas = {q:.3f} Mvar")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    scen = load_scenario(cfg.scenario)
    if cfg.load_model is not None:
        from dataclasses import replace
        scen = replace(scen, load_model=LoadModel.parse(cfg.load_model))
    try:
        traj = simulate(scen, backend=args.backend)
    except (PowerFlowError, SimulationError) as exc:
        raise AnalysisFailure(str(exc)) from exc
    path = write_trajectory_csv(traj, _out(cfg, "trajectory.csv"), cfg.embedded())
    curve = _load_curve(cfg)
    verdicts = []
    for f in scen.faults:
        res = check_survival(traj, f, curve)
        verdicts.append({"bus": f.bus, "r_on_ohm": f.r_on, "t_on": f.t_on, "duration": f.duration,
                         "verdict": res.verdict.value,
                         "violation": None if res.violation is None else vars(res.violation)})
        print(f"fault at {f.bus} ({f.r_on} ohm, t_on={f.t_on} s, {f.duration * 1e3:.1f} ms): {res.verdict.value}")
    summary = {"config": cfg.embedded(), "status": traj.status, "failure_time": traj.failure_time,
               "samples": len(traj.times), "t_end": scen.t_end, "faults": verdicts,
               "curve": curve.to_list()}
    write_summary_json(summary, _out(cfg, "simulate_summary.json"))
    print(f"wrote {path} ({len(traj.times)} samples)")
    if cfg.plot:
        mv = [b for b in traj.bus_ids if not b.upper().startswith("HV")]
        plot = svg.line_chart(traj.times, {b: traj.v_mag[:, traj.bus_ids.index(b)] for b in mv},
                              _out(cfg, "voltages.svg"), title="bus voltage magnitudes",
                              xlabel="t / s", ylabel="|u| / pu")
        _embed_svg_config(plot, cfg)
        print(f"wrote {plot}")
    if not traj.completed:
        print(f"simulation failed at t = {traj.failure_time}", file=sys.stderr)
        return EXIT_ANALYSIS
    return EXIT_OK


def _node_estimate(cfg: RunConfig, args, grid, bus: str, load_model: LoadModel, curve):
    return single_node_survivability(grid, bus, cfg.samples, _fault_model(args), load_model, curve,
                                     master_seed=cfg.seed, t_on=args.t_on, workers=cfg.workers)


def cmd_survive_node(cfg: RunConfig, args) -> int:
    grid = _load_grid(cfg)
    grid.index(args.bus)
    curve = _load_curve(cfg)
    lm = LoadModel.parse(cfg.load_model)
    est = _node_estimate(cfg, args, grid, args.bus, lm, curve)
    stem = f"survive_node_{args.bus}_{lm.value}"
    write_trials_csv(est.results, _out(cfg, stem + "_trials.csv"), cfg.embedded())
    summary = {"config": cfg.embedded(), "curve": curve.to_list(), **est.summary(),
               "N": est.trials, "ci": est.ci_half_width}
    path = write_summary_json(summary, _out(cfg, stem + ".json"))
    print(f"mu({args.bus} | {lm.value}) = {est.mu:.4f} +- {est.ci_half_width:.4f} (N = {est.trials})")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_survive_all(cfg: RunConfig, args) -> int:
    grid = _load_grid(cfg)
    curve = _load_curve(cfg)
    buses = args.buses or list(grid.mv_buses)
    for b in buses:
        grid.index(b)
    models = _load_models(cfg.load_model)
    rows = []
    for lm in models:
        for b in buses:
            est = _node_estimate(cfg, args, grid, b, lm, curve)
            rows.append(est)
            write_trials_csv(est.results, _out(cfg, f"survive_all_{b}_{lm.value}_trials.csv"), cfg.embedded())
            print(f"mu({b} | {lm.value}) = {est.mu:.4f} +- {est.ci_half_width:.4f}")
    path = _out(cfg, "survive_all.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_config_comment(fh, cfg.embedded())
        fh.write("bus,load_model,trials,survivors,mu,ci_half_width\n")
        for e in rows:
            fh.write(f"{e.bus},{e.load_model},{e.trials},{e.survivors},{e.mu!r},{e.ci_half_width!r}\n")
    write_summary_json({"config": cfg.embedded(), "curve": curve.to_list(),
                        "results": [e.summary() for e in rows]}, _out(cfg, "survive_all.json"))
    groups = {lm.value: [e.mu for e in rows if e.load_model == lm.value] for lm in models}
    errors = {lm.value: [e.ci_half_width for e in rows if e.load_model == lm.value] for lm in models}
    plot = svg.bar_chart(buses, groups, _out(cfg, "survive_all.svg"), errors=errors,
                         title="single-node survivability", ylabel="mu")
    _embed_svg_config(plot, cfg)
    print(f"wrote {path} and {plot}")
    return EXIT_OK


def cmd_survive_envelope(cfg: RunConfig, args) -> int:
    grid = _load_grid(cfg)
    curve = _load_curve(cfg)
    lm = LoadModel.parse(cfg.load_model)
    env = envelope_study(grid, args.bus, cfg.samples, args.p_range, args.q_range, args.filter_threshold,
                         args.cell_size, args.stride, args.min_count, _fault_model(args), lm, curve,
                         master_seed=cfg.seed, t_step=args.t_step, t_on=args.t_on,
                         filter_q=not args.filter_p_only, workers=cfg.workers)
    stem = f"envelope_{args.bus}_{lm.value}"
    write_envelope_csv(env, _out(cfg, stem + ".csv"), cfg.embedded())
    write_trials_csv(env.samples, _out(cfg, stem + "_trials.csv"), cfg.embedded())
    included = sum(r.included for r in env.samples)
    summary = {"config": cfg.embedded(), "curve": curve.to_list(), "base_p_mw": env.base[0],
               "base_q_mvar": env.base[1], "samples": len(env.samples), "included": included,
               "cells": len(env.cells), "reported_cells": len(env.reported), "min_count": env.min_count}
    write_summary_json(summary, _out(cfg, stem + ".json"))
    cells = [{"x": c.p_center - env.base[0], "y": c.q_center - env.base[1], "mu": c.mu} for c in env.cells]
    plot = svg.heatmap(cells, _out(cfg, stem + ".svg"), cell_w=env.stride, cell_h=env.stride,
                       xlim=(env.p_bounds[0] - env.base[0], env.p_bounds[1] - env.base[0]),
                       ylim=(env.q_bounds[0] - env.base[1], env.q_bounds[1] - env.base[1]),
                       title=f"survivability, fault at {args.bus} ({lm.value} loads)",
                       xlabel="delta P_ref / MW", ylabel="delta Q_ref / Mvar")
    _embed_svg_config(plot, cfg)
    print(f"{included}/{len(env.samples)} samples pass the filter; "
          f"{len(env.reported)}/{len(env.cells)} cells have >= {env.min_count} samples")
    print(f"wrote {_out(cfg, stem + '.csv')} and {plot}")
    return EXIT_OK


def cmd_validate(cfg: RunConfig, args) -> int:
    grid = _load_grid(cfg)
    try:
        ref = read_csv_rows(cfg.reference)
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read reference {cfg.reference}: {exc}") from exc
    need = {"bus_id", "v_mag_pu", "v_angle_deg"}
    if not ref or not need <= set(ref[0]):
        raise UsageError(f"reference {cfg.reference} needs columns {', '.join(sorted(need))}")
    ref_ids = [r["bus_id"] for r in ref]
    if sorted(ref_ids) != sorted(grid.bus_ids) or len(set(ref_ids)) != len(ref_ids):
        missing = sorted(set(grid.bus_ids) - set(ref_ids))
        extra = sorted(set(ref_ids) - set(grid.bus_ids))
        raise UsageError(f"bus sets differ (missing in reference: {missing}, unknown: {extra})")
    try:
        sol = solve_power_flow(grid, cfg.load_model)
    except PowerFlowError as exc:
        raise AnalysisFailure(f"power flow did not converge: {exc}") from exc
    path = _out(cfg, "validation.csv")
    failures = 0
    worst_mag = worst_ang = 0.0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_config_comment(fh, cfg.embedded())
        fh.write("bus_id,v_mag_pu,v_mag_ref,dev_mag_pu,v_angle_deg,v_angle_ref,dev_angle_deg,pass\n")
        for r in ref:
            v = sol.voltage(r["bus_id"])
            mag, ang = abs(v), math.degrees(math.atan2(v.imag, v.real))
            try:
                mref, aref = float(r["v_mag_pu"]), float(r["v_angle_deg"])
            except ValueError as exc:
                raise UsageError(f"non-numeric reference value for {r['bus_id']}: {exc}") from exc
            dm, da = abs(mag - mref), abs(ang - aref)
            ok = dm <= args.tol_mag and da <= args.tol_ang
            failures += not ok
            worst_mag, worst_ang = max(worst_mag, dm), max(worst_ang, da)
            fh.write(f"{r['bus_id']},{mag:.12f},{mref!r},{dm:.3e},{ang:.12f},{aref!r},{da:.3e},{int(ok)}\n")
    print(f"max |dV| = {worst_mag:.3e} pu (tol {args.tol_mag:g}), "
          f"max |d angle| = {worst_ang:.3e} deg (tol {args.tol_ang:g})")
    print(f"{len(ref) - failures}/{len(ref)} buses within tolerance; wrote {path}")
    return EXIT_OK if failures == 0 else EXIT_ANALYSIS


def _embed_svg_config(path: Path, cfg: RunConfig) -> None:
    """Insert the effective configuration as an SVG ``<metadata>`` element."""
    import xml.etree.ElementTree as ET
    ET.register_namespace("", svg.SVG_NS)
    tree = ET.parse(path)
    meta = ET.Element(f"{{{svg.SVG_NS}}}metadata")
    meta.text = json.dumps(cfg.embedded(), sort_keys=True, default=str)
    tree.getroot().insert(0, meta)
    tree.write(path, encoding="utf-8", xml_declaration=True)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or the working directory)")
    common.add_argument("--grid", help="grid JSON (default: bundled CIGRE 12-bus grid)")
    common.add_argument("--curve", help="limiting curve JSON (default: bundled curve)")

    mc = argparse.ArgumentParser(add_help=False)
    mc.add_argument("--seed", type=int, default=0, help="master seed")
    mc.add_argument("--workers", type=_positive_int, default=None,
                    help="worker processes (default: available cores; results do not depend on it)")
    mc.add_argument("--t-on", type=_nonneg_float, default=None, help="fault onset time in s")
    mc.add_argument("--r-min", type=_nonneg_float, default=3.0, help="smallest fault resistance in ohm")
    mc.add_argument("--r-max", type=_nonneg_float, default=10.0, help="largest fault resistance in ohm")

    lm_choices = ["pq", "z", "constant_pq", "constant_impedance"]
    p = argparse.ArgumentParser(prog="adnsim", description="Distribution-grid RMS simulation and "
                                "fault ride-through survivability studies.")
    p.add_argument("--version", action="version", version=f"adnsim {__version__}")
    sub = p.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    sp = sub.add_parser("powerflow", parents=[common], help="steady-state power flow")
    sp.add_argument("grid_file", nargs="?", help="grid JSON (same as --grid)")
    sp.add_argument("--load-model", choices=lm_choices, default="pq")
    sp.add_argument("--tap", type=int, default=None, help="override the transformer tap position")

    sp = sub.add_parser("simulate", parents=[common], help="time-domain simulation of a scenario")
    sp.add_argument("scenario", nargs="?", default="scenario_fig4.json",
                    help="scenario JSON (default: bundled scenario_fig4.json)")
    sp.add_argument("--load-model", choices=lm_choices, default=None, help="override the scenario load model")
    sp.add_argument("--backend", choices=["compiled", "python"], default=None, help="kernel backend")
    sp.add_argument("--plot", action="store_true", help="also write an SVG voltage chart")

    sp = sub.add_parser("survive-node", parents=[common, mc], help="single-node survivability")
    sp.add_argument("--bus", required=True)
    sp.add_argument("--samples", type=_positive_int, default=1000)
    sp.add_argument("--load-model", choices=lm_choices, default="pq")

    sp = sub.add_parser("survive-all", parents=[common, mc], help="single-node survivability at every MV bus")
    sp.add_argument("--samples", type=_positive_int, default=200)
    sp.add_argument("--load-model", choices=lm_choices + ["both"], default="both")
    sp.add_argument("--buses", nargs="+", default=None, help="subset of buses (default: all MV buses)")

    sp = sub.add_parser("survive-envelope", parents=[common, mc], help="survivability over set points")
    sp.add_argument("--bus", default="MV-03")
    sp.add_argument("--samples", type=_positive_int, default=10_000)
    sp.add_argument("--load-model", choices=lm_choices, default="pq")
    sp.add_argument("--p-range", type=_nonneg_float, default=15.0, help="half-width of the P box in MW")
    sp.add_argument("--q-range", type=_nonneg_float, default=10.0, help="half-width of the Q box in Mvar")
    sp.add_argument("--cell-size", type=float, default=0.5, help="cell edge in MW / Mvar")
    sp.add_argument("--stride", type=float, default=None, help="cell centre spacing (default: cell size / 2)")
    sp.add_argument("--min-count", type=_positive_int, default=100, help="samples needed to report a cell")
    sp.add_argument("--filter-threshold", type=float, default=0.05, help="relative control-error filter")
    sp.add_argument("--filter-p-only", action="store_true", help="apply the filter to P only")
    sp.add_argument("--t-step", type=_nonneg_float, default=0.25, help="set-point step time in s")

    sp = sub.add_parser("validate", parents=[common], help="compare bus voltages with a reference CSV")
    sp.add_argument("reference", help="CSV with columns bus_id, v_mag_pu, v_angle_deg")
    sp.add_argument("--load-model", choices=lm_choices, default="pq")
    sp.add_argument("--tol-mag", type=float, default=1e-4, help="magnitude tolerance in pu")
    sp.add_argument("--tol-ang", type=float, default=1e-3, help="angle tolerance in degrees")
    return p


_COMMANDS = {
    "powerflow": cmd_powerflow,
    "simulate": cmd_simulate,
    "survive-node": cmd_survive_node,
    "survive-all": cmd_survive_all,
    "survive-envelope": cmd_survive_envelope,
    "validate": cmd_validate,
}


def _config(args) -> RunConfig:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory not writable: {out}")
    grid = getattr(args, "grid_file", None) or args.grid
    cfg = RunConfig(subcommand=args.subcommand, out_dir=out,
                    grid=_existing(grid, "grid", "cigre12.json"),
                    curve=_existing(args.curve, "curve", "frt_curve.json"),
                    seed=getattr(args, "seed", 0), samples=getattr(args, "samples", None),
                    workers=getattr(args, "workers", None), plot=getattr(args, "plot", False))
    if getattr(args, "load_model", None) and args.load_model != "both":
        cfg.load_model = LoadModel.parse(args.load_model).value
    elif getattr(args, "load_model", None) == "both":
        cfg.load_model = "both"
    if args.subcommand == "simulate":
        cfg.scenario = _existing(args.scenario, "scenario")
    if args.subcommand == "validate":
        cfg.reference = _existing(args.reference, "reference")
    if args.subcommand.startswith("survive"):
        if args.t_on is None:
            args.t_on = 1.25 if args.subcommand == "survive-envelope" else 0.5
        if not args.r_max > args.r_min:
            raise UsageError("--r-max must exceed --r-min")
        cfg.extra.update({"t_on": args.t_on, "r_min_ohm": args.r_min, "r_max_ohm": args.r_max})
    if args.subcommand == "powerflow" and args.tap is not None:
        cfg.extra["tap"] = args.tap
    if args.subcommand in ("survive-node", "survive-envelope"):
        cfg.extra["bus"] = args.bus
    if args.subcommand == "survive-all":
        cfg.extra["buses"] = args.buses
    if args.subcommand == "survive-envelope":
        if not args.cell_size > 0 or (args.stride is not None and not args.stride > 0):
            raise UsageError("--cell-size and --stride must be positive")
        cfg.extra.update({k: getattr(args, k) for k in ("p_range", "q_range", "cell_size", "stride", "min_count",
                                                        "filter_threshold", "filter_p_only", "t_step")})
    if args.subcommand == "validate":
        cfg.extra.update({"tol_mag": args.tol_mag, "tol_ang": args.tol_ang})
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    try:
        cfg = _config(args)
        return _COMMANDS[args.subcommand](cfg, args)
    except (UsageError, FileNotFoundError, GridError, json.JSONDecodeError) as exc:
        print(f"adnsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as exc:
        print(f"adnsim: error: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AnalysisFailure as exc:
        print(f"adnsim: analysis failed: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
