"""Newton-Raphson AC power flow in polar coordinates.

All non-slack buses are PQ buses. Injections are positive into the network;
loads enter with a negative sign (ConstantPQ) or through the admittance matrix
(ConstantImpedance).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .network import (
    Branch,
    Grid,
    GridError,
    LoadModel,
    Transformer,
    assemble_ybus,
    branch_stamp,
    load_powers,
)


class PowerFlowError(RuntimeError):
    """Newton-Raphson did not converge or hit a singular Jacobian."""

    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class PowerFlowSolution:
    grid: Grid
    load_model: LoadModel
    voltages: np.ndarray  # complex pu, bus order of grid.buses
    iterations: int
    residual_norm: float
    ybus: np.ndarray

    def voltage(self, bus_id: str) -> complex:
        return complex(self.voltages[self.grid.index(bus_id)])

    def as_dict(self) -> dict[str, complex]:
        return {bid: complex(v) for bid, v in zip(self.grid.bus_ids, self.voltages)}

    def injections(self) -> np.ndarray:
        """Net complex power injected into the network at each bus (pu)."""
        v = self.voltages
        return v * np.conj(self.ybus @ v)


@dataclass(frozen=True)
class BranchFlow:
    """Power entering the element at each terminal (MW, Mvar)."""

    p_from: float
    q_from: float
    p_to: float
    q_to: float

    @property
    def p_loss(self) -> float:
        return self.p_from + self.p_to


def specified_injections(grid: Grid, load_model: LoadModel | str,
                         dg_injections: Mapping[str, complex] | None = None) -> np.ndarray:
    """Specified complex injection per bus in pu (DG output minus PQ loads)."""
    load_model = LoadModel.parse(load_model)
    s = np.zeros(grid.n_bus, dtype=complex)
    if load_model is LoadModel.CONSTANT_PQ:
        s -= load_powers(grid)
    for bid, val in (dg_injections or {}).items():
        s[grid.index(bid)] += complex(val) / grid.s_base
    return s


def power_mismatch(grid: Grid, voltages: np.ndarray, load_model: LoadModel | str = "pq",
                   dg_injections: Mapping[str, complex] | None = None,
                   ybus: np.ndarray | None = None) -> np.ndarray:
    """Specified minus network-implied complex injection per bus (pu).

    The slack entry is set to zero; it is not part of the solved set.
    """
    if ybus is None:
        ybus = assemble_ybus(grid, load_model)
    v = np.asarray(voltages, dtype=complex)
    mis = specified_injections(grid, load_model, dg_injections) - v * np.conj(ybus @ v)
    mis[grid.slack_index] = 0.0
    return mis


def _dsbus_dv(ybus: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of network injections S = V conj(Y V) w.r.t. angle and magnitude."""
    ibus = ybus @ v
    vnorm = v / np.abs(v)
    diag_v = np.diag(v)
    ds_dvm = diag_v @ np.conj(ybus @ np.diag(vnorm)) + np.diag(np.conj(ibus) * vnorm)
    ds_dva = 1j * diag_v @ np.conj(np.diag(ibus) - ybus @ diag_v)
    return ds_dva, ds_dvm


def mismatch_jacobian(grid: Grid, voltages: np.ndarray, ybus: np.ndarray) -> np.ndarray:
    """Jacobian of the stacked real mismatch [ΔP; ΔQ] w.r.t. [θ; |V|] on non-slack buses."""
    pq = _pq_index(grid)
    ds_dva, ds_dvm = _dsbus_dv(ybus, np.asarray(voltages, dtype=complex))
    # mismatch = spec - S(V), so the sign flips
    j11 = -ds_dva[np.ix_(pq, pq)].real
    j12 = -ds_dvm[np.ix_(pq, pq)].real
    j21 = -ds_dva[np.ix_(pq, pq)].imag
    j22 = -ds_dvm[np.ix_(pq, pq)].imag
    return np.block([[j11, j12], [j21, j22]])


def _pq_index(grid: Grid) -> np.ndarray:
    return np.array([i for i in range(grid.n_bus) if i != grid.slack_index], dtype=int)


def solve_power_flow(grid: Grid, load_model: LoadModel | str = LoadModel.CONSTANT_PQ,
                     dg_injections: Mapping[str, complex] | None = None, *,
                     tol: float = 1e-8, max_iter: int = 50,
                     v0: np.ndarray | None = None) -> PowerFlowSolution:
    """Solve the AC power flow by Newton-Raphson.

    Args:
        grid: network description.
        load_model: ``"pq"`` or ``"z"``.
        dg_injections: DG output per bus in MW + j Mvar.
        tol: convergence threshold on the largest active/reactive mismatch (pu).
        max_iter: maximum number of Newton updates.
        v0: warm start; flat start (slack voltage at slack, 1∠0 elsewhere) if omitted.

    Raises:
        PowerFlowError: on non-convergence or a singular Jacobian.
    """
    load_model = LoadModel.parse(load_model)
    ybus = assemble_ybus(grid, load_model)
    pq = _pq_index(grid)
    n = len(pq)
    spec = specified_injections(grid, load_model, dg_injections)

    if v0 is None:
        v = np.ones(grid.n_bus, dtype=complex)
    else:
        v = np.array(v0, dtype=complex)
    v[grid.slack_index] = grid.slack_voltage
    va = np.angle(v)
    vm = np.abs(v)

    def residual(v):
        mis = spec - v * np.conj(ybus @ v)
        return np.r_[mis[pq].real, mis[pq].imag]

    f = residual(v)
    norm = float(np.max(np.abs(f))) if n else 0.0
    it = 0
    while norm >= tol:
        if it >= max_iter:
            raise PowerFlowError(
                f"power flow did not converge in {max_iter} iterations (residual {norm:.3e} pu)",
                residual=norm, iterations=it)
        jac = mismatch_jacobian(grid, v, ybus)
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError("singular power flow Jacobian", residual=norm, iterations=it) from exc
        va[pq] += dx[:n]
        vm[pq] += dx[n:]
        v = vm * np.exp(1j * va)
        v[grid.slack_index] = grid.slack_voltage
        f = residual(v)
        norm = float(np.max(np.abs(f)))
        it += 1
        if not np.isfinite(norm):
            raise PowerFlowError("power flow diverged", residual=norm, iterations=it)
    return PowerFlowSolution(grid, load_model, v, it, norm, ybus)


def branch_flow(solution: PowerFlowSolution, element: str | Branch | Transformer) -> BranchFlow:
    """Terminal flows of a line or the transformer from the solved voltages."""
    grid = solution.grid
    if isinstance(element, str):
        element = grid.branch(element)
    elif element is None or element not in grid.elements:
        raise GridError(f"unknown branch {getattr(element, 'id', element)!r}")
    stamp = branch_stamp(grid, element)
    v = np.array([solution.voltage(element.from_bus), solution.voltage(element.to_bus)])
    s = v * np.conj(stamp @ v) * grid.s_base
    return BranchFlow(float(s[0].real), float(s[0].imag), float(s[1].real), float(s[1].imag))


def transformer_mv_flow(solution: PowerFlowSolution) -> tuple[float, float]:
    """Power delivered by the transformer into the MV bus (P_meas, Q_meas) in MW, Mvar."""
    if solution.grid.transformer is None:
        raise GridError("grid has no transformer to measure at")
    flow = branch_flow(solution, solution.grid.transformer)
    return -flow.p_to, -flow.q_to
