"""Low-voltage ride-through check of simulated trajectories."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dynamics import Trajectory
from .network import FaultSpec, bundled_path


@dataclass(frozen=True)
class LimitingCurve:
    """Piecewise-linear minimum voltage versus time since fault onset.

    Outside the breakpoint range the first/last value is held.
    """

    breakpoints: tuple[tuple[float, float], ...]

    def __post_init__(self):
        bp = tuple((float(t), float(v)) for t, v in self.breakpoints)
        if not bp:
            raise ValueError("limiting curve needs at least one breakpoint")
        taus = [t for t, _ in bp]
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError("curve times must be strictly increasing")
        if taus[0] < 0:
            raise ValueError("curve times must be non-negative")
        if any(not 0.0 <= v <= 1.0 for _, v in bp):
            raise ValueError("curve voltages must lie in [0, 1] pu")
        object.__setattr__(self, "breakpoints", bp)

    @property
    def taus(self) -> np.ndarray:
        return np.array([t for t, _ in self.breakpoints])

    @property
    def v_mins(self) -> np.ndarray:
        return np.array([v for _, v in self.breakpoints])

    @property
    def horizon(self) -> float:
        return self.breakpoints[-1][0]

    def to_list(self) -> list[dict]:
        return [{"tau_s": t, "v_min_pu": v} for t, v in self.breakpoints]


def load_curve(source: str | Path | Sequence | None = None) -> LimitingCurve:
    """Curve from a JSON file (list of ``{tau_s, v_min_pu}``), a parsed list, or the bundled default."""
    if source is None:
        source = bundled_path("frt_curve.json")
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise FileNotFoundError(f"curve file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            source = json.load(fh)
    return LimitingCurve(tuple((p["tau_s"], p["v_min_pu"]) for p in source))


def evaluate_limiting_curve(curve: LimitingCurve, tau):
    """Minimum admissible voltage at ``tau`` seconds after fault onset."""
    if np.any(np.asarray(tau) < 0):
        raise ValueError("tau must be non-negative")
    out = np.interp(tau, curve.taus, curve.v_mins)
    return float(out) if np.ndim(out) == 0 else out


class Verdict(str, Enum):
    SURVIVED = "survived"
    FAILED = "failed"
    UNDECIDABLE = "undecidable"


@dataclass(frozen=True)
class Violation:
    bus: str
    t: float
    v: float
    v_min: float


@dataclass(frozen=True)
class SurvivalResult:
    verdict: Verdict
    violation: Violation | None = None
    reason: str = ""

    @property
    def survived(self) -> bool:
        return self.verdict is Verdict.SURVIVED

    def __bool__(self) -> bool:
        return self.survived


def check_survival(traj: Trajectory, fault: FaultSpec, curve: LimitingCurve,
                   monitored: Iterable[str] | None = None) -> SurvivalResult:
    """Ride-through verdict of one trajectory.

    Survival requires a completed simulation and every monitored bus staying at
    or above the curve for all samples from fault onset to the end of the
    evaluation horizon ``t_on + curve.horizon``. A trajectory that stops early
    without failing is undecidable. Only under-voltage counts.

    Args:
        monitored: bus ids to check; all MV buses (every bus except the slack
            and HV level) by default.
    """
    if not traj.completed:
        return SurvivalResult(Verdict.FAILED, reason=f"numerical failure at t={traj.failure_time}")
    t_stop = fault.t_on + curve.horizon
    if len(traj.times) == 0 or traj.times[-1] < t_stop - 1e-9:
        return SurvivalResult(Verdict.UNDECIDABLE, reason="trajectory shorter than curve horizon")
    if monitored is None:
        cols = [i for i, b in enumerate(traj.bus_ids) if not b.upper().startswith("HV")]
    else:
        cols = [traj.bus_ids.index(b) for b in monitored]
    mask = (traj.times >= fault.t_on) & (traj.times <= t_stop + 1e-12)
    # at the onset instant only the post-event sample counts
    first = np.argmax(mask)
    if mask[first] and first + 1 < len(traj.times) and traj.times[first + 1] == traj.times[first]:
        mask[first] = False
    idx = np.nonzero(mask)[0]
    if not len(idx):
        return SurvivalResult(Verdict.UNDECIDABLE, reason="no samples after fault onset")
    vmin = evaluate_limiting_curve(curve, traj.times[idx] - fault.t_on)
    vm = np.abs(traj.voltages[np.ix_(idx, cols)])
    bad = vm < vmin[:, None]
    if not bad.any():
        return SurvivalResult(Verdict.SURVIVED)
    row = int(np.argmax(bad.any(axis=1)))
    col = int(np.argmax(bad[row]))
    return SurvivalResult(
        Verdict.FAILED,
        Violation(traj.bus_ids[cols[col]], float(traj.times[idx[row]]), float(vm[row, col]), float(vmin[row])),
        reason="limiting curve violated",
    )
