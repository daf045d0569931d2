"""RMS time-domain simulation of the controlled distribution grid.

The model is a semi-explicit DAE: five differential states per DG and an
algebraic network equation ``Y u = i_dg + i_load(u)`` that is solved inside
every right-hand-side evaluation. Between discrete events (reference steps,
fault onset and clearing) the ODE is integrated by a linearly implicit
Rosenbrock method with adaptive steps; at each event the integration stops
exactly at the event time, the network/reference context is swapped and the
integration restarts.

``t_conv = 0`` is realised as a 0.1 ms current lag: an algebraic current
source would put the non-smooth limiter inside the network equations.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .control import ControlParams, DGState, ReferenceSchedule, params_vector
from .network import (FaultSpec, Grid, LoadModel, assemble_ybus, branch_stamp, bundled_path, load_grid,
                      load_powers)
from .powerflow import PowerFlowSolution, solve_power_flow, transformer_mv_flow


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverSettings:
    rtol: float = 1e-6
    atol: float = 1e-8
    sample_dt: float = 1e-3
    max_step: float = 0.05
    first_step: float = 1e-4
    jac_age_max: int = 8

    @classmethod
    def from_dict(cls, doc: Mapping | None) -> "SolverSettings":
        doc = dict(doc or {})
        known = {"rtol", "atol", "sample_dt", "max_step", "first_step", "jac_age_max"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown solver setting(s): {', '.join(sorted(unknown))}")
        if "jac_age_max" in doc:
            doc["jac_age_max"] = int(doc["jac_age_max"])
        return cls(**doc)


@dataclass(frozen=True)
class Scenario:
    grid: Grid
    load_model: LoadModel = LoadModel.CONSTANT_PQ
    params: ControlParams = field(default_factory=ControlParams)
    references: ReferenceSchedule = field(default_factory=ReferenceSchedule)
    faults: tuple[FaultSpec, ...] = ()
    t_end: float = 1.0
    solver: SolverSettings = field(default_factory=SolverSettings)
    dg_injections: Mapping[str, complex] | None = None

    def __post_init__(self):
        object.__setattr__(self, "load_model", LoadModel.parse(self.load_model))
        object.__setattr__(self, "faults", tuple(self.faults))
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        for f in self.faults:
            if f.t_on < 0 or f.t_off > self.t_end:
                raise ValueError(f"fault window [{f.t_on}, {f.t_off}] outside [0, {self.t_end}]")


@dataclass
class DynamicState:
    """All DG states at one instant; arrays ordered like ``grid.dg_buses``."""

    chi_p: np.ndarray
    chi_q: np.ndarray
    theta_pll: np.ndarray
    i_d: np.ndarray
    i_q: np.ndarray
    t: float = 0.0

    def to_vector(self) -> np.ndarray:
        return np.column_stack([self.chi_p, self.chi_q, self.theta_pll, self.i_d, self.i_q]).ravel()

    @classmethod
    def from_vector(cls, x: np.ndarray, t: float = 0.0) -> "DynamicState":
        xs = np.asarray(x, dtype=float).reshape(-1, 5)
        return cls(*(xs[:, i].copy() for i in range(5)), t=t)

    def dg(self, j: int) -> DGState:
        return DGState(self.chi_p[j], self.chi_q[j], self.theta_pll[j], self.i_d[j], self.i_q[j])


@dataclass
class Trajectory:
    """Sampled simulation output.

    Times are non-decreasing: every interior event time appears twice, first
    with the state/voltages just before the event, then just after.
    """

    times: np.ndarray
    states: np.ndarray  # (K, 5 * n_dg)
    voltages: np.ndarray  # (K, n_bus) complex pu
    p_meas: np.ndarray  # MW
    q_meas: np.ndarray  # Mvar
    bus_ids: list[str]
    dg_buses: list[str]
    status: str = "completed"
    failure_time: float | None = None
    event_times: list[float] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def completed(self) -> bool:
        return self.status == "completed"

    @property
    def v_mag(self) -> np.ndarray:
        return np.abs(self.voltages)

    @property
    def v_angle_deg(self) -> np.ndarray:
        return np.degrees(np.angle(self.voltages))

    def bus_voltage(self, bus_id: str) -> np.ndarray:
        return self.voltages[:, self.bus_ids.index(bus_id)]

    def state(self, i: int) -> DynamicState:
        return DynamicState.from_vector(self.states[i], float(self.times[i]))

    @property
    def chi_p(self) -> np.ndarray:
        return self.states[:, 0::5]

    @property
    def chi_q(self) -> np.ndarray:
        return self.states[:, 1::5]

    def index_before(self, t: float) -> int:
        """Index of the last sample at or before ``t`` that precedes any event at ``t``."""
        hits = np.nonzero(self.times <= t)[0]
        if not len(hits):
            raise ValueError(f"no sample at or before t={t}")
        i = int(hits[-1])
        # duplicated event time: take the left limit
        if i > 0 and self.times[i - 1] == self.times[i]:
            i -= 1
        return i


# ---------------------------------------------------------------------------
# Initialisation and network solve
# ---------------------------------------------------------------------------


def initialize_state(grid: Grid, pf: PowerFlowSolution, params: ControlParams,
                     dg_injections: Mapping[str, complex] | None = None) -> DynamicState:
    """Steady-state DG states consistent with a converged power flow.

    ``dg_injections`` must be the DG outputs (MW + j Mvar) the power flow was
    solved with; zero if omitted.
    """
    if not pf.residual_norm < 1e-6:
        raise SimulationError("power flow not converged")
    dg_injections = dg_injections or {}
    k = len(grid.dg_buses)
    out = [np.zeros(k) for _ in range(5)]
    for j, bus in enumerate(grid.dg_buses):
        v = pf.voltage(bus)
        s = complex(dg_injections.get(bus, 0.0))
        ud = max(abs(v), params.u_floor)
        out[0][j] = min(max(s.real, params.p_min), params.p_max)
        out[1][j] = min(max(s.imag, params.q_min), params.q_max)
        out[2][j] = math.atan2(v.imag, v.real)
        out[3][j] = s.real / grid.s_base / ud
        out[4][j] = -s.imag / grid.s_base / ud
    return DynamicState(*out, t=0.0)


def solve_network(ybus: np.ndarray, dg_currents: Mapping[int, complex], pq_loads: np.ndarray,
                  slack_index: int, slack_voltage: complex, *, u0: np.ndarray | None = None,
                  tol: float = 1e-10, max_iter: int = 30) -> np.ndarray:
    """Bus voltages satisfying ``Y u = i_dg - conj(S_load / u)`` with the slack fixed.

    Args:
        ybus: full admittance matrix (impedance loads and faults already stamped).
        dg_currents: injected current per bus index (system pu).
        pq_loads: constant-power consumption per bus (pu).
        u0: warm start (flat start if omitted).

    Raises:
        kernels.NetworkFailure: if Newton does not reach ``tol`` within ``max_iter``.
    """
    n = ybus.shape[0]
    idx = np.array([i for i in range(n) if i != slack_index])
    m = len(idx)
    ymm = ybus[np.ix_(idx, idx)]
    ys = ybus[idx, slack_index] * slack_voltage
    s = np.asarray(pq_loads, dtype=complex)[idx]
    inj = np.zeros(n, dtype=complex)
    for i, c in dg_currents.items():
        inj[i] += c
    b = inj[idx] - ys
    u = np.ones(m, dtype=complex) if u0 is None else np.asarray(u0, dtype=complex)[idx].copy()
    g, bb = ymm.real, ymm.imag
    jlin = np.block([[g, -bb], [bb, g]])
    for _ in range(max_iter + 1):
        r = ymm @ u + np.conj(s) / np.conj(u) - b
        if np.max(np.abs(r)) < tol:
            full = np.empty(n, dtype=complex)
            full[idx] = u
            full[slack_index] = slack_voltage
            return full
        w = -np.conj(s) / np.conj(u) ** 2
        jac = jlin.copy()
        ar = np.arange(m)
        jac[ar, ar] += w.real
        jac[ar, ar + m] += w.imag
        jac[ar + m, ar] += w.imag
        jac[ar + m, ar + m] -= w.real
        try:
            dz = np.linalg.solve(jac, -np.r_[r.real, r.imag])
        except np.linalg.LinAlgError:
            break
        u = u + dz[:m] + 1j * dz[m:]
        if not np.all(np.isfinite(u)) or np.any(np.abs(u) < 1e-6):
            break
    raise kernels.NetworkFailure("network solve did not converge")


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


def _segment_model(grid: Grid, load_model: LoadModel, faults: Sequence[FaultSpec], params_vec: np.ndarray,
                   p_ref: float, q_ref: float, model_cls):
    ybus = assemble_ybus(grid, load_model, faults)
    s = grid.slack_index
    idx = [i for i in range(grid.n_bus) if i != s]
    pos = {bus_i: k for k, bus_i in enumerate(idx)}
    ymm = ybus[np.ix_(idx, idx)]
    ys = ybus[idx, s] * grid.slack_voltage
    if load_model is LoadModel.CONSTANT_PQ:
        s_load = load_powers(grid)[idx]
    else:
        s_load = np.zeros(len(idx), dtype=complex)
    dg_idx = np.array([pos[grid.index(b)] for b in grid.dg_buses], dtype=np.intc)
    tr = grid.transformer
    if tr is None:
        raise SimulationError("dynamic simulation needs a transformer as the measurement point")
    stamp = branch_stamp(grid, tr)
    mf = pos.get(grid.index(tr.from_bus), -1)
    mt = pos.get(grid.index(tr.to_bus), -1)
    meas = (mf, mt, complex(stamp[1, 0]), complex(stamp[1, 1]))
    return model_cls(ymm, ys, s_load, dg_idx, meas, grid.slack_voltage, params_vec, p_ref, q_ref)


class Simulation:
    """Stateful simulation of one scenario; ``run_until`` may be called repeatedly.

    Stopping at an event time leaves the event unapplied, so a caller can
    inspect the pre-event state (the envelope study filters on it) before
    continuing.
    """

    def __init__(self, scenario: Scenario, backend: str | None = None,
                 pf: PowerFlowSolution | None = None):
        self.scenario = scenario
        grid = scenario.grid
        if grid.transformer is None:
            raise SimulationError("dynamic simulation needs a transformer as the measurement point")
        self.grid = grid
        self.model_cls = kernels.model_class(backend)
        self.backend = backend or kernels.BACKEND
        if pf is None:
            pf = solve_power_flow(grid, scenario.load_model, scenario.dg_injections)
        self.pf = pf
        self.x = initialize_state(grid, pf, scenario.params, scenario.dg_injections).to_vector()
        p0, q0 = transformer_mv_flow(pf)
        self.base_flow = (p0, q0)
        self.refs = scenario.references.with_base(p0, q0)
        self._pvec = params_vector(scenario.params, grid.s_base)

        t_end = scenario.t_end
        events = set(t for t in self.refs.event_times if 0 < t < t_end)
        for f in scenario.faults:
            for t in (f.t_on, f.t_off):
                if 0 < t < t_end:
                    events.add(t)
        self.event_times = sorted(events)
        self.bounds = [0.0, *self.event_times, t_end]
        self.seg = 0
        self.t = 0.0
        self._u = pf.voltages[[i for i in range(grid.n_bus) if i != grid.slack_index]].copy()
        self._models: dict = {}
        self._chunks: list = []
        self.status = "completed"
        self.failure_time: float | None = None
        self.stats = {"steps": 0, "rejected": 0, "jacobians": 0}
        dt = scenario.solver.sample_dt
        n_grid = int(math.floor(t_end / dt + 1e-9))
        grid_t = np.arange(n_grid + 1) * dt
        self._grid_t = grid_t[grid_t < t_end - 1e-12]

    def _model(self, t_mid: float):
        active = tuple(f for f in self.scenario.faults if f.t_on <= t_mid < f.t_off)
        refs = self.refs.at(t_mid)
        key = (active, refs)
        model = self._models.get(key)
        if model is None:
            model = _segment_model(self.grid, self.scenario.load_model, active, self._pvec,
                                   refs[0], refs[1], self.model_cls)
            self._models[key] = model
        return model

    def _start_voltages(self, model, t_prev: float, a: float, b: float) -> None:
        """Warm start for a new segment; falls back to a homotopy in the admittance.

        Newton from the pre-event voltages can miss a deep but existing
        post-event solution, so the network is morphed from the old to the new
        Y-bus in small steps. If that fails too the integrator reports the failure.
        """
        try:
            model.solve_network(self.x, self._u)
            return
        except kernels.NetworkFailure:
            pass
        grid = self.grid
        y_old = self._ybus(0.5 * (t_prev + a))
        y_new = self._ybus(0.5 * (a + b))
        s = grid.slack_index
        idx = [i for i in range(grid.n_bus) if i != s]
        xs = self.x.reshape(-1, 5)
        cur = (xs[:, 3] + 1j * xs[:, 4]) * np.exp(1j * xs[:, 2])
        currents: dict[int, complex] = {}
        for bus, c in zip(grid.dg_buses, cur):
            currents[grid.index(bus)] = currents.get(grid.index(bus), 0) + c
        loads = load_powers(grid) if self.scenario.load_model is LoadModel.CONSTANT_PQ else np.zeros(grid.n_bus)
        u = np.empty(grid.n_bus, dtype=complex)
        u[idx] = self._u
        u[s] = grid.slack_voltage
        try:
            for lam in np.linspace(0.0, 1.0, 41)[1:]:
                u = solve_network((1 - lam) * y_old + lam * y_new, currents, loads, s, grid.slack_voltage,
                                  u0=u, max_iter=50)
        except kernels.NetworkFailure:
            return
        model.set_voltages(u[idx])

    def _ybus(self, t_mid: float) -> np.ndarray:
        active = tuple(f for f in self.scenario.faults if f.t_on <= t_mid < f.t_off)
        return assemble_ybus(self.grid, self.scenario.load_model, active)

    def run_until(self, t_stop: float | None = None) -> "Simulation":
        if t_stop is None:
            t_stop = self.scenario.t_end
        if not any(abs(t_stop - b) < 1e-12 for b in self.bounds):
            raise ValueError(f"run_until target {t_stop} is not an event time or t_end")
        sol = self.scenario.solver
        n_state = len(self.x)
        while self.status == "completed" and self.seg < len(self.bounds) - 1 and self.bounds[self.seg] < t_stop - 1e-12:
            a, b = self.bounds[self.seg], self.bounds[self.seg + 1]
            interior = self._grid_t[(self._grid_t > a + 1e-12) & (self._grid_t < b - 1e-12)]
            ts = np.concatenate(([a], interior, [b]))
            out_x = np.zeros((len(ts), n_state))
            out_u = np.zeros((len(ts), len(self._u)), dtype=complex)
            out_m = np.zeros((len(ts), 2))
            model = self._model(0.5 * (a + b))
            model.set_voltages(self._u)
            if self.seg > 0:
                self._start_voltages(model, self.bounds[self.seg - 1], a, b)
            status, t_reached, filled, steps, rej, njac, _h = model.integrate(
                self.x, a, b, ts, out_x, out_u, out_m, sol.rtol, sol.atol, sol.max_step,
                sol.first_step, sol.jac_age_max)
            self.stats["steps"] += steps
            self.stats["rejected"] += rej
            self.stats["jacobians"] += njac
            self._chunks.append((ts[:filled], out_x[:filled], out_u[:filled], out_m[:filled]))
            if status != kernels.OK:
                self.status = "numerical_failure"
                self.failure_time = float(t_reached)
                break
            self._u = out_u[filled - 1].copy()
            self.seg += 1
            self.t = b
        return self

    def state(self) -> DynamicState:
        return DynamicState.from_vector(self.x, self.t)

    def last_measurement(self) -> tuple[float, float]:
        for ts, _, _, m in reversed(self._chunks):
            if len(ts):
                return float(m[-1, 0]), float(m[-1, 1])
        return self.base_flow

    def trajectory(self) -> Trajectory:
        grid = self.grid
        s = grid.slack_index
        idx = [i for i in range(grid.n_bus) if i != s]
        chunks = [c for c in self._chunks if len(c[0])]
        if chunks:
            times = np.concatenate([c[0] for c in chunks])
            states = np.concatenate([c[1] for c in chunks])
            um = np.concatenate([c[2] for c in chunks])
            meas = np.concatenate([c[3] for c in chunks])
        else:
            times = np.zeros(0)
            states = np.zeros((0, len(self.x)))
            um = np.zeros((0, len(idx)), dtype=complex)
            meas = np.zeros((0, 2))
        volts = np.empty((len(times), grid.n_bus), dtype=complex)
        volts[:, idx] = um
        volts[:, s] = grid.slack_voltage
        return Trajectory(times, states, volts, meas[:, 0].copy(), meas[:, 1].copy(), grid.bus_ids,
                          list(grid.dg_buses), self.status, self.failure_time, list(self.event_times),
                          dict(self.stats, backend=self.backend))


def simulate(scenario: Scenario, backend: str | None = None) -> Trajectory:
    """Run a scenario to ``t_end`` and return the sampled trajectory."""
    return Simulation(scenario, backend).run_until().trajectory()


def rhs_at_initial_state(scenario: Scenario, backend: str | None = None) -> np.ndarray:
    """Derivative vector at t = 0 of a freshly initialised scenario."""
    sim = Simulation(scenario, backend)
    model = sim._model(0.0)
    model.set_voltages(sim._u)
    return np.asarray(model.rhs(sim.x.copy()))


def with_solver(scenario: Scenario, **changes) -> Scenario:
    return replace(scenario, solver=replace(scenario.solver, **changes))


# ---------------------------------------------------------------------------
# Scenario files and trajectory output
# ---------------------------------------------------------------------------


def scenario_from_dict(doc: Mapping, base_dir: Path | None = None) -> Scenario:
    """Build a :class:`Scenario` from its JSON document.

    ``grid`` is a path (relative to ``base_dir``), a bundled file name, or an
    inline grid object; it defaults to the bundled CIGRE grid.
    """
    known = {"grid", "load_model", "control", "references", "faults", "t_end", "solver", "dg_injections"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown scenario key(s): {', '.join(sorted(unknown))}")
    grid_ref = doc.get("grid", "cigre12.json")
    if isinstance(grid_ref, Mapping):
        grid = load_grid(grid_ref)
    else:
        path = Path(grid_ref)
        if not path.is_absolute() and base_dir is not None and (base_dir / path).exists():
            path = base_dir / path
        elif not path.exists() and bundled_path(str(grid_ref)).exists():
            path = bundled_path(str(grid_ref))
        grid = load_grid(path)
    refs = ReferenceSchedule(tuple((r["t"], r["p_mw"], r["q_mvar"]) for r in doc.get("references", [])))
    faults = tuple(FaultSpec(f["bus"], float(f["r_on_ohm"]), float(f["t_on"]), float(f["duration"]))
                   for f in doc.get("faults", []))
    for f in faults:
        grid.index(f.bus)
    dg = doc.get("dg_injections")
    if dg is not None:
        dg = {b: complex(v[0], v[1]) for b, v in dg.items()}
    return Scenario(
        grid=grid,
        load_model=LoadModel.parse(doc.get("load_model", "pq")),
        params=ControlParams.from_dict(doc.get("control")),
        references=refs,
        faults=faults,
        t_end=float(doc.get("t_end", 1.0)),
        solver=SolverSettings.from_dict(doc.get("solver")),
        dg_injections=dg,
    )


def load_scenario(path: str | Path) -> Scenario:
    """Read a scenario JSON file; bundled scenario names are accepted too."""
    path = Path(path)
    if not path.exists():
        if bundled_path(path.name).exists():
            path = bundled_path(path.name)
        else:
            raise FileNotFoundError(f"scenario file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return scenario_from_dict(doc, path.parent)


def write_config_comment(fh, config: Mapping | None) -> None:
    if config:
        fh.write("# config: " + json.dumps(config, sort_keys=True, default=str) + "\n")


def read_csv_rows(path: str | Path) -> list[dict[str, str]]:
    """Rows of a CSV file as dicts, skipping ``#`` comment lines."""
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def write_trajectory_csv(traj: Trajectory, path: str | Path, config: Mapping | None = None) -> Path:
    """Time, |u| and angle per bus, transformer flow and DG integrator states.

    A non-empty ``config`` is written as a leading ``# config: {json}`` line.
    """
    path = Path(path)
    header = ["time_s"]
    for b in traj.bus_ids:
        header += [f"v_mag_{b}", f"v_angle_deg_{b}"]
    header += ["p_meas_mw", "q_meas_mvar"]
    for b in traj.dg_buses:
        header += [f"chi_p_{b}", f"chi_q_{b}"]
    vm, va = traj.v_mag, traj.v_angle_deg
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_config_comment(fh, config)
        w = csv.writer(fh)
        w.writerow(header)
        for i, t in enumerate(traj.times):
            row = [f"{t:.6f}"]
            for j in range(len(traj.bus_ids)):
                row += [f"{vm[i, j]:.9f}", f"{va[i, j]:.6f}"]
            row += [f"{traj.p_meas[i]:.6f}", f"{traj.q_meas[i]:.6f}"]
            for j in range(len(traj.dg_buses)):
                row += [f"{traj.states[i, 5 * j]:.9f}", f"{traj.states[i, 5 * j + 1]:.9f}"]
            w.writerow(row)
    return path
