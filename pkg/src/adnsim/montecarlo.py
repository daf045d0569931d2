"""Monte Carlo survivability studies.

Every trial draws from its own generator derived from ``(master_seed, trial
index)``, so results do not depend on the number of workers or on scheduling.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .control import ControlParams, ReferenceSchedule
from .dynamics import Scenario, Simulation, SolverSettings, write_config_comment
from .network import FaultSpec, Grid, LoadModel
from .powerflow import solve_power_flow, transformer_mv_flow
from .survival import LimitingCurve, check_survival, load_curve


@dataclass(frozen=True)
class FaultModel:
    """Random fault ensemble: truncated normal duration, uniform resistance."""

    duration_mean: float = 0.150  # s
    duration_std: float = 0.010
    r_on_lo: float = 3.0  # Ω
    r_on_hi: float = 10.0
    trunc_sigmas: float = 5.0
    duration_floor: float = 1e-3

    def __post_init__(self):
        if not self.duration_std > 0:
            raise ValueError("duration_std must be positive")
        if not 0 < self.r_on_lo < self.r_on_hi:
            raise ValueError("need 0 < r_on_lo < r_on_hi")
        if not self.trunc_sigmas > 0:
            raise ValueError("trunc_sigmas must be positive")

    @property
    def duration_bounds(self) -> tuple[float, float]:
        lo = self.duration_mean - self.trunc_sigmas * self.duration_std
        hi = self.duration_mean + self.trunc_sigmas * self.duration_std
        return max(lo, self.duration_floor), max(hi, self.duration_floor)


def trial_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent generator for trial ``index`` of a study seeded with ``master_seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(index,))))


def sample_fault(rng: np.random.Generator, model: FaultModel, bus: str, t_on: float = 0.5) -> FaultSpec:
    """Draw one fault at ``bus``; the duration is redrawn until it falls inside the truncation window."""
    lo = model.duration_mean - model.trunc_sigmas * model.duration_std
    hi = model.duration_mean + model.trunc_sigmas * model.duration_std
    while True:
        d = rng.normal(model.duration_mean, model.duration_std)
        if lo <= d <= hi:
            break
    d = max(d, model.duration_floor)
    r = rng.uniform(model.r_on_lo, model.r_on_hi)
    return FaultSpec(bus, float(r), float(t_on), float(d))


@dataclass(frozen=True)
class TrialResult:
    index: int
    bus: str
    r_on: float
    duration: float
    survived: bool
    verdict: str
    included: bool = True
    p_ref: float | None = None
    q_ref: float | None = None
    p_meas: float | None = None  # just before fault onset (envelope only)
    q_meas: float | None = None
    failure_bus: str | None = None
    failure_t: float | None = None
    status: str = "completed"


@dataclass(frozen=True)
class SurvivabilityEstimate:
    bus: str
    survivors: int
    trials: int
    load_model: str
    master_seed: int
    results: tuple[TrialResult, ...] = field(default=(), repr=False)

    @property
    def mu(self) -> float:
        return self.survivors / self.trials

    @property
    def ci_half_width(self) -> float:
        return confidence_half_width(self.trials)

    def summary(self) -> dict:
        return {"bus": self.bus, "survivors": self.survivors, "trials": self.trials, "mu": self.mu,
                "ci_half_width": self.ci_half_width, "load_model": self.load_model,
                "master_seed": self.master_seed}


def confidence_half_width(n: int) -> float:
    """Worst-case Bernoulli bound 1 / (2 sqrt(N))."""
    if n < 1:
        raise ValueError("N must be at least 1")
    return 1.0 / (2.0 * math.sqrt(n))


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))


def _map(func: Callable, tasks: Sequence, workers: int | None) -> list:
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    chunk = max(1, len(tasks) // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, tasks, chunksize=chunk))


# ---------------------------------------------------------------------------
# Single-node survivability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _NodeTask:
    index: int
    grid: Grid
    bus: str
    fault_model: FaultModel
    load_model: LoadModel
    curve: LimitingCurve
    params: ControlParams
    master_seed: int
    t_on: float
    solver: SolverSettings
    monitored: tuple[str, ...] | None


def _verdict_fields(res) -> dict:
    v = res.violation
    return {"survived": res.survived, "verdict": res.verdict.value,
            "failure_bus": v.bus if v else None, "failure_t": v.t if v else None}


def _node_trial(task: _NodeTask) -> TrialResult:
    fault = sample_fault(trial_rng(task.master_seed, task.index), task.fault_model, task.bus, task.t_on)
    scen = Scenario(task.grid, task.load_model, task.params, faults=(fault,),
                    t_end=fault.t_on + task.curve.horizon, solver=task.solver)
    traj = Simulation(scen).run_until().trajectory()
    res = check_survival(traj, fault, task.curve, task.monitored)
    return TrialResult(task.index, task.bus, fault.r_on, fault.duration, status=traj.status,
                       **_verdict_fields(res))


def single_node_survivability(grid: Grid, bus: str, n: int, fault_model: FaultModel | None = None,
                              load_model: LoadModel | str = LoadModel.CONSTANT_PQ,
                              curve: LimitingCurve | None = None, params: ControlParams | None = None,
                              master_seed: int = 0, *, t_on: float = 0.5, workers: int | None = 1,
                              solver: SolverSettings | None = None,
                              monitored: Iterable[str] | None = None) -> SurvivabilityEstimate:
    """Fraction of ``n`` random faults at ``bus`` that the grid rides through.

    Each trial starts from the steady state of the base operating point and
    applies a sampled fault at ``t_on``. Numerically failed or undecidable
    trials count as not surviving.

    Raises:
        PowerFlowError: if the base operating point has no solution.
    """
    if n < 1:
        raise ValueError("N must be at least 1")
    grid.index(bus)
    load_model = LoadModel.parse(load_model)
    solve_power_flow(grid, load_model)  # fail early on an unsolvable base case
    task_args = dict(grid=grid, bus=bus, fault_model=fault_model or FaultModel(), load_model=load_model,
                     curve=curve or load_curve(), params=params or ControlParams(), master_seed=master_seed,
                     t_on=t_on, solver=solver or SolverSettings(),
                     monitored=tuple(monitored) if monitored is not None else None)
    results = _map(_node_trial, [_NodeTask(i, **task_args) for i in range(n)], workers)
    survivors = sum(r.survived for r in results)
    return SurvivabilityEstimate(bus, survivors, n, load_model.value, master_seed, tuple(results))


# ---------------------------------------------------------------------------
# Operating-point envelope
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    p_center: float
    q_center: float
    count: int
    survivors: int
    min_count: int

    @property
    def sufficient(self) -> bool:
        return self.count >= self.min_count

    @property
    def mu(self) -> float | None:
        return self.survivors / self.count if self.sufficient and self.count else None


@dataclass(frozen=True)
class EnvelopeMap:
    cells: tuple[Cell, ...]
    p_bounds: tuple[float, float]
    q_bounds: tuple[float, float]
    cell_size: float
    stride: float
    min_count: int
    base: tuple[float, float] = (0.0, 0.0)
    samples: tuple[TrialResult, ...] = field(default=(), repr=False)

    @property
    def reported(self) -> list[Cell]:
        return [c for c in self.cells if c.sufficient]


def _lattice(lo: float, hi: float, origin: float, stride: float) -> np.ndarray:
    k0 = math.ceil((lo - origin) / stride - 1e-9)
    k1 = math.floor((hi - origin) / stride + 1e-9)
    return origin + stride * np.arange(k0, k1 + 1)


def cluster_cells(samples: Sequence[Mapping], cell_size: float, stride: float, min_count: int, *,
                  p_bounds: tuple[float, float] | None = None, q_bounds: tuple[float, float] | None = None,
                  origin: tuple[float, float] = (0.0, 0.0)) -> list[Cell]:
    """Aggregate verdicts into square cells centred on a lattice.

    A cell centred at ``c`` holds the samples with ``c - size/2 <= p < c + size/2``
    (same for ``q``). Lattice points are ``origin + k * stride``; with bounds
    given every lattice point inside them becomes a cell, otherwise only the
    cells that contain samples are returned.

    Args:
        samples: mappings with keys ``p``, ``q`` and ``survived``.
    """
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    if not 0 < stride <= cell_size:
        raise ValueError("stride must satisfy 0 < stride <= cell_size")
    half = cell_size / 2
    p = np.array([s["p"] for s in samples], dtype=float)
    q = np.array([s["q"] for s in samples], dtype=float)
    ok = np.array([bool(s["survived"]) for s in samples], dtype=bool)

    def members(vals, centers):
        # (n_samples, n_centers) membership on one axis
        return (vals[:, None] >= centers[None, :] - half) & (vals[:, None] < centers[None, :] + half)

    if p_bounds is not None and q_bounds is not None:
        pc = _lattice(p_bounds[0], p_bounds[1], origin[0], stride)
        qc = _lattice(q_bounds[0], q_bounds[1], origin[1], stride)
    elif len(p):
        pc = _lattice(p.min() - half, p.max() + half, origin[0], stride)
        qc = _lattice(q.min() - half, q.max() + half, origin[1], stride)
    else:
        return []
    mp = members(p, pc).astype(np.int64)
    mq = members(q, qc).astype(np.int64)
    counts = mp.T @ mq
    surv = (mp * ok[:, None]).T @ mq
    cells = []
    for i, cp in enumerate(pc):
        for j, cq in enumerate(qc):
            if p_bounds is None and counts[i, j] == 0:
                continue
            cells.append(Cell(float(cp), float(cq), int(counts[i, j]), int(surv[i, j]), int(min_count)))
    return cells


@dataclass(frozen=True)
class _EnvTask:
    index: int
    grid: Grid
    bus: str
    base: tuple[float, float]
    p_range: float
    q_range: float
    filter_threshold: float
    filter_q: bool
    fault_model: FaultModel
    load_model: LoadModel
    curve: LimitingCurve
    params: ControlParams
    master_seed: int
    t_step: float
    t_on: float
    solver: SolverSettings
    monitored: tuple[str, ...] | None


def _env_trial(task: _EnvTask) -> TrialResult:
    rng = trial_rng(task.master_seed, task.index)
    # fault first: the same seed gives the same faults as the single-node study
    fault = sample_fault(rng, task.fault_model, task.bus, task.t_on)
    p_ref = task.base[0] + rng.uniform(-task.p_range, task.p_range)
    q_ref = task.base[1] + rng.uniform(-task.q_range, task.q_range)
    refs = ReferenceSchedule(((task.t_step, p_ref, q_ref),), task.base[0], task.base[1])
    scen = Scenario(task.grid, task.load_model, task.params, refs, (fault,),
                    t_end=fault.t_on + task.curve.horizon, solver=task.solver)
    sim = Simulation(scen).run_until(fault.t_on)
    common = dict(index=task.index, bus=task.bus, r_on=fault.r_on, duration=fault.duration,
                  p_ref=float(p_ref), q_ref=float(q_ref))
    if sim.status != "completed":
        return TrialResult(**common, survived=False, verdict="failed", included=False, status=sim.status)
    p_meas, q_meas = sim.last_measurement()
    included = abs(p_ref - p_meas) < task.filter_threshold * abs(p_meas)
    if task.filter_q:
        included = included and abs(q_ref - q_meas) < task.filter_threshold * abs(q_meas)
    common.update(p_meas=float(p_meas), q_meas=float(q_meas))
    if not included:
        return TrialResult(**common, survived=False, verdict="excluded", included=False)
    traj = sim.run_until().trajectory()
    res = check_survival(traj, fault, task.curve, task.monitored)
    return TrialResult(**common, included=True, status=traj.status, **_verdict_fields(res))


def envelope_study(grid: Grid, fault_bus: str = "MV-03", n_samples: int = 10_000, p_range: float = 15.0,
                   q_range: float = 10.0, filter_threshold: float = 0.05, cell_size: float = 0.5,
                   stride: float | None = None, min_count: int = 100, fault_model: FaultModel | None = None,
                   load_model: LoadModel | str = LoadModel.CONSTANT_PQ, curve: LimitingCurve | None = None,
                   params: ControlParams | None = None, master_seed: int = 0, *, t_step: float = 0.25,
                   t_on: float = 1.25, filter_q: bool = True, workers: int | None = 1,
                   solver: SolverSettings | None = None,
                   monitored: Iterable[str] | None = None) -> EnvelopeMap:
    """Survivability over random interconnection set points.

    Each sample steps the references at ``t_step`` from the base flow to a
    uniform draw from ``base ± range``. Just before the fault at ``t_on`` the
    relative control error is checked. Samples whose error is at or above
    ``filter_threshold`` are excluded from all cells.

    Args:
        p_range, q_range: half-widths of the sampling box in MW / Mvar.
        stride: lattice spacing of cell centres; half the cell size by default.
        filter_q: also require the reactive error to pass the threshold.
    """
    if not filter_threshold > 0:
        raise ValueError("filter_threshold must be positive")
    if p_range < 0 or q_range < 0:
        raise ValueError("ranges must be non-negative")
    if not t_step < t_on:
        raise ValueError("the reference step must precede the fault")
    grid.index(fault_bus)
    load_model = LoadModel.parse(load_model)
    base = transformer_mv_flow(solve_power_flow(grid, load_model))
    stride = cell_size / 2 if stride is None else stride
    task_args = dict(grid=grid, bus=fault_bus, base=base, p_range=float(p_range), q_range=float(q_range),
                     filter_threshold=filter_threshold, filter_q=filter_q,
                     fault_model=fault_model or FaultModel(), load_model=load_model, curve=curve or load_curve(),
                     params=params or ControlParams(), master_seed=master_seed, t_step=t_step, t_on=t_on,
                     solver=solver or SolverSettings(),
                     monitored=tuple(monitored) if monitored is not None else None)
    results = _map(_env_trial, [_EnvTask(i, **task_args) for i in range(n_samples)], workers)
    p_bounds = (base[0] - p_range, base[0] + p_range)
    q_bounds = (base[1] - q_range, base[1] + q_range)
    kept = [{"p": r.p_ref, "q": r.q_ref, "survived": r.survived} for r in results if r.included]
    cells = cluster_cells(kept, cell_size, stride, min_count, p_bounds=p_bounds, q_bounds=q_bounds, origin=base)
    return EnvelopeMap(tuple(cells), p_bounds, q_bounds, cell_size, stride, min_count, base, tuple(results))


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

TRIAL_COLUMNS = ["trial_index", "bus", "p_ref", "q_ref", "p_meas", "q_meas", "r_on_ohm", "duration_ms", "included", "survived",
                 "verdict", "status", "failure_bus", "failure_t"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_trials_csv(results: Iterable[TrialResult], path: str | Path, config: Mapping | None = None) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_config_comment(fh, config)
        w = csv.writer(fh)
        w.writerow(TRIAL_COLUMNS)
        for r in results:
            w.writerow([_fmt(v) for v in (r.index, r.bus, r.p_ref, r.q_ref, r.p_meas, r.q_meas, r.r_on,
                                          r.duration * 1e3, r.included, r.survived, r.verdict, r.status,
                                          r.failure_bus, r.failure_t)])
    return path


def write_envelope_csv(env: EnvelopeMap, path: str | Path, config: Mapping | None = None) -> Path:
    """One row per lattice cell; ``mu`` reads ``insufficient`` below ``min_count``."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_config_comment(fh, config)
        w = csv.writer(fh)
        w.writerow(["cell_p_center", "cell_q_center", "count", "survivors", "mu"])
        for c in env.cells:
            w.writerow([f"{c.p_center:.6f}", f"{c.q_center:.6f}", c.count, c.survivors,
                        "insufficient" if c.mu is None else repr(c.mu)])
    return path


def write_summary_json(payload: Mapping, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(o):
    if hasattr(o, "to_dict"):
        return o.to_dict()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
