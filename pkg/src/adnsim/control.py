"""Interconnection power-flow tracking, DG converter model and fault ride-through.

Every DG runs two clamped integrators driven by the same global error at the
HV/MV transformer, a first-order PLL and a current source with a first-order
lag toward the limited current command.

Conventions: complex power S = u * conj(i); in the PLL frame u ≈ u_d, so
P = u_d * i_d and Q = -u_d * i_q. Converter currents are in system pu;
the FRT block and the current limit work in pu of the DG rating.

The functions here accept numpy arrays as well as scalars.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class ControlParams:
    k_i_p: float = 1.0  # 1/s on pu error
    k_i_q: float = 1.0
    p_min: float = 0.0  # MW
    p_max: float = 1.0
    q_min: float = -1.0  # Mvar
    q_max: float = 1.0
    u_ref: float = 1.0  # pu
    u_dead: float = 0.1
    k_frt: float = 2.0  # pu current / pu voltage
    i_max: float = 1.0  # pu of DG rating
    freeze_band: float = 0.1
    t_pll: float = 0.02  # s
    t_conv: float = 0.01  # s; 0 selects the fast-lag limit, see dynamics
    u_floor: float = 0.1
    s_rated: float = 1.0  # MVA per DG

    def __post_init__(self):
        for name in ("k_i_p", "k_i_q", "k_frt", "t_pll", "t_conv", "freeze_band"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise ValueError("DG limits must satisfy min <= max")
        if not self.u_dead > 0:
            raise ValueError("u_dead must be positive")
        if not self.i_max > 0:
            raise ValueError("i_max must be positive")
        if not self.t_pll > 0:
            raise ValueError("t_pll must be positive")
        if not self.s_rated > 0 or not self.u_floor > 0:
            raise ValueError("s_rated and u_floor must be positive")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any] | None) -> "ControlParams":
        doc = dict(doc or {})
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown control parameter(s): {', '.join(sorted(unknown))}")
        return cls(**{k: float(v) for k, v in doc.items()})

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class DGState:
    """Differential states of one DG (or arrays over all DGs)."""

    chi_p: Any  # MW
    chi_q: Any  # Mvar
    theta_pll: Any  # rad
    i_d: Any  # system pu
    i_q: Any


@dataclass(frozen=True)
class ReferenceSchedule:
    """Piecewise-constant P_ref(t), Q_ref(t).

    ``steps`` holds ``(t, p_mw, q_mvar)`` with strictly increasing times; before
    the first step the base values apply. A base of ``None`` means "the
    measured base-case flow", filled in by :meth:`with_base`.
    """

    steps: tuple[tuple[float, float, float], ...] = ()
    p_base: float | None = None
    q_base: float | None = None

    def __post_init__(self):
        times = [s[0] for s in self.steps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("reference step times must be strictly increasing")
        object.__setattr__(self, "steps", tuple((float(t), float(p), float(q)) for t, p, q in self.steps))

    def with_base(self, p_base: float, q_base: float) -> "ReferenceSchedule":
        return ReferenceSchedule(
            self.steps,
            p_base if self.p_base is None else self.p_base,
            q_base if self.q_base is None else self.q_base,
        )

    def at(self, t: float) -> tuple[float, float]:
        p, q = self.p_base, self.q_base
        for ts, ps, qs in self.steps:
            if t >= ts:
                p, q = ps, qs
            else:
                break
        if p is None or q is None:
            raise ValueError("reference schedule has no base value")
        return p, q

    @property
    def event_times(self) -> list[float]:
        return [s[0] for s in self.steps]


def global_error(p_meas: float, q_meas: float, refs: ReferenceSchedule, t: float) -> tuple[float, float]:
    """ΔP = P_ref(t) - P_meas, ΔQ = Q_ref(t) - Q_meas (MW, Mvar)."""
    p_ref, q_ref = refs.at(t)
    return p_ref - p_meas, q_ref - q_meas


def integrator_rate(chi, delta, frozen, k_i, lo, hi, s_base: float = 100.0):
    """Rate of a clamped (conditionally integrating) set-point integrator.

    ``delta`` is the pu error in the direction of increasing ``chi``; the
    result is in MW/s or Mvar/s. The rate is blocked only while ``chi`` sits
    exactly on a limit. Values past a limit keep integrating so the rate stays
    smooth inside a step; the integrator projects them back onto the limit
    afterwards.
    """
    rate = k_i * np.asarray(delta, dtype=float) * s_base
    blocked = (np.asarray(chi) == hi) & (rate > 0) | (np.asarray(chi) == lo) & (rate < 0)
    out = np.where(blocked | np.asarray(frozen, dtype=bool), 0.0, rate)
    return float(out) if np.ndim(out) == 0 else out


def frt_flag_and_injection(u_mag, params: ControlParams):
    """Error flag and additional reactive current I_q+ (pu of DG rating).

    Positive I_q+ for under-voltage, negative for over-voltage, zero inside
    the dead band; continuous at both band edges.
    """
    u = np.asarray(u_mag, dtype=float)
    dev = u - params.u_ref
    under = dev < -params.u_dead
    over = dev > params.u_dead
    iq = np.where(under, -params.k_frt * (dev + params.u_dead),
                  np.where(over, -params.k_frt * (dev - params.u_dead), 0.0))
    e = under | over
    if np.ndim(iq) == 0:
        return int(e), float(iq)
    return e.astype(int), iq


def limit_currents(i_d, i_q, e, i_max):
    """Clamp the current to the circle of radius ``i_max``.

    The priority axis (``i_q`` when ``e`` is set, ``i_d`` otherwise) is
    clamped first; the other axis gets what remains. Signs are preserved.
    """
    i_d = np.asarray(i_d, dtype=float)
    i_q = np.asarray(i_q, dtype=float)
    e = np.asarray(e, dtype=bool)
    prio = np.where(e, i_q, i_d)
    other = np.where(e, i_d, i_q)
    prio = np.clip(prio, -i_max, i_max)
    room = np.sqrt(np.maximum(i_max * i_max - prio * prio, 0.0))
    other = np.clip(other, -room, room)
    d = np.where(e, other, prio)
    q = np.where(e, prio, other)
    if d.ndim == 0:
        return float(d), float(q)
    return d, q


def current_reference(p_r1, q_r1, u_dq, s_base: float = 100.0, u_floor: float = 0.1):
    """dq current references (system pu) from DG power set points in MW, Mvar."""
    u_d = np.maximum(np.real(u_dq), u_floor)
    i_d = np.asarray(p_r1, dtype=float) / s_base / u_d
    i_q = -np.asarray(q_r1, dtype=float) / s_base / u_d
    if np.ndim(i_d) == 0:
        return float(i_d), float(i_q)
    return i_d, i_q


def wrap_angle(a):
    return np.mod(np.asarray(a) + math.pi, 2 * math.pi) - math.pi


def dg_dynamics(state: DGState, pcc_voltage, delta_p, delta_q, frozen: bool,
                params: ControlParams, s_base: float = 100.0):
    """Time derivatives of the DG states and the injected network current.

    Args:
        state: DG states (scalars or arrays over DGs).
        pcc_voltage: complex pu voltage at each DG's bus.
        delta_p, delta_q: global errors P_ref - P_meas, Q_ref - Q_meas (MW, Mvar).
        frozen: True if any bus violates the safe voltage band.

    Returns:
        ``(DGState of derivatives, complex injected current in system pu)``.
    """
    u = np.asarray(pcc_voltage, dtype=complex)
    theta = np.asarray(state.theta_pll, dtype=float)
    d_theta = wrap_angle(np.angle(u) - theta) / params.t_pll

    # more import than requested -> generate more
    d_chi_p = integrator_rate(state.chi_p, -np.asarray(delta_p) / s_base, frozen,
                              params.k_i_p, params.p_min, params.p_max, s_base)
    d_chi_q = integrator_rate(state.chi_q, -np.asarray(delta_q) / s_base, frozen,
                              params.k_i_q, params.q_min, params.q_max, s_base)

    p_r1 = np.clip(state.chi_p, params.p_min, params.p_max)
    q_r1 = np.clip(state.chi_q, params.q_min, params.q_max)
    u_dq = u * np.exp(-1j * theta)
    i_d_ref, i_q_ref = current_reference(p_r1, q_r1, u_dq, s_base, params.u_floor)

    scale = s_base / params.s_rated
    e, iq_plus = frt_flag_and_injection(np.abs(u), params)
    # Q = -u_d i_q, so positive I_q+ lowers i_q
    i_d_cmd, i_q_cmd = limit_currents(np.asarray(i_d_ref) * scale, np.asarray(i_q_ref) * scale - iq_plus,
                                      e, params.i_max)
    i_d_cmd = np.asarray(i_d_cmd) / scale
    i_q_cmd = np.asarray(i_q_cmd) / scale

    t_conv = params.t_conv if params.t_conv > 0 else FAST_LAG
    d_id = (i_d_cmd - np.asarray(state.i_d)) / t_conv
    d_iq = (i_q_cmd - np.asarray(state.i_q)) / t_conv
    current = (np.asarray(state.i_d) + 1j * np.asarray(state.i_q)) * np.exp(1j * theta)
    return DGState(d_chi_p, d_chi_q, d_theta, d_id, d_iq), current


# lag used when t_conv = 0 is requested; see dynamics module docs
FAST_LAG = 1e-4


def params_vector(params: ControlParams, s_base: float) -> np.ndarray:
    """Flat parameter vector consumed by the compiled kernels (fixed order)."""
    return np.array([
        s_base, params.k_i_p, params.k_i_q, params.p_min, params.p_max, params.q_min, params.q_max,
        params.u_ref, params.u_dead, params.k_frt, params.i_max, params.freeze_band, params.t_pll,
        params.t_conv if params.t_conv > 0 else FAST_LAG, params.u_floor, params.s_rated,
    ], dtype=float)


PARAM_FIELDS: Sequence[str] = (
    "s_base", "k_i_p", "k_i_q", "p_min", "p_max", "q_min", "q_max", "u_ref", "u_dead", "k_frt",
    "i_max", "freeze_band", "t_pll", "t_conv", "u_floor", "s_rated",
)
