"""Static grid description, per-unit conversion and bus admittance assembly.

Units in the grid file:
- Impedance: Ω (lines), pu on own rating (transformer)
- Susceptance: µS (total line charging)
- Power: MW, Mvar
- Voltage: kV (bases), pu (slack set point)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np


class GridError(ValueError):
    """Raised when a grid document is malformed or violates an invariant."""


class LoadModel(str, Enum):
    """Static load representation used by power flow and dynamics."""

    CONSTANT_PQ = "pq"
    CONSTANT_Z = "z"

    @classmethod
    def parse(cls, value: "LoadModel | str") -> "LoadModel":
        if isinstance(value, LoadModel):
            return value
        key = str(value).strip().lower()
        aliases = {"pq": cls.CONSTANT_PQ, "constantpq": cls.CONSTANT_PQ, "power": cls.CONSTANT_PQ,
                   "z": cls.CONSTANT_Z, "constantimpedance": cls.CONSTANT_Z, "impedance": cls.CONSTANT_Z}
        try:
            return aliases[key.replace("_", "").replace("-", "")]
        except KeyError:
            raise ValueError(f"unknown load model {value!r}; expected 'pq' or 'z'") from None


# ---------------------------------------------------------------------------
# Per-unit helpers
# ---------------------------------------------------------------------------


def impedance_base(v_base_kv: float, s_base_mva: float) -> float:
    """Impedance base in Ω for a voltage level."""
    return v_base_kv**2 / s_base_mva


def to_per_unit(value: complex | float, kind: str, s_base_mva: float, v_base_kv: float = 1.0):
    """Convert a physical quantity to per unit.

    ``kind`` is one of ``"power"`` (MW/Mvar/MVA), ``"voltage"`` (kV),
    ``"impedance"`` (Ω) or ``"admittance"`` (S).
    """
    if kind == "power":
        return value / s_base_mva
    if kind == "voltage":
        return value / v_base_kv
    if kind == "impedance":
        return value / impedance_base(v_base_kv, s_base_mva)
    if kind == "admittance":
        return value * impedance_base(v_base_kv, s_base_mva)
    raise ValueError(f"unknown quantity kind {kind!r}")


def from_per_unit(value: complex | float, kind: str, s_base_mva: float, v_base_kv: float = 1.0):
    """Inverse of :func:`to_per_unit`."""
    if kind == "power":
        return value * s_base_mva
    if kind == "voltage":
        return value * v_base_kv
    if kind == "impedance":
        return value * impedance_base(v_base_kv, s_base_mva)
    if kind == "admittance":
        return value / impedance_base(v_base_kv, s_base_mva)
    raise ValueError(f"unknown quantity kind {kind!r}")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bus:
    id: str
    level: str = "mv"


@dataclass(frozen=True)
class Branch:
    """Pi-equivalent line or cable; ``b_shunt`` is the total charging susceptance."""

    id: str
    from_bus: str
    to_bus: str
    r: float  # Ω
    x: float  # Ω
    b_shunt: float = 0.0  # S
    in_service: bool = True


@dataclass(frozen=True)
class Transformer:
    """Two-winding transformer with an off-nominal tap on the MV side.

    The MV open-circuit voltage is ``(1 + (tap_position - tap_neutral) * tap_step) * u_hv``.
    """

    id: str
    from_bus: str  # HV side
    to_bus: str  # MV side
    r: float  # pu on own rating
    x: float  # pu on own rating
    rating: float  # MVA
    tap_position: int = 0
    tap_neutral: int = 0
    tap_min: int = -16
    tap_max: int = 16
    tap_step: float = 0.0  # pu ratio change per step
    phase_shift: float = 0.0  # degrees

    @property
    def ratio(self) -> float:
        return 1.0 + (self.tap_position - self.tap_neutral) * self.tap_step


@dataclass(frozen=True)
class LoadSpec:
    p_nom: float  # MW
    q_nom: float  # Mvar


@dataclass(frozen=True)
class FaultSpec:
    """One short-circuit through a resistance to ground.

    Attributes:
        bus: faulted bus id.
        r_on: fault resistance in Ω.
        t_on: onset time in s.
        duration: time until clearing in s.
    """

    bus: str
    r_on: float
    t_on: float = 0.0
    duration: float = 0.15

    def __post_init__(self):
        if not self.r_on > 0:
            raise ValueError(f"fault resistance must be positive, got {self.r_on}")
        if not self.duration > 0:
            raise ValueError(f"fault duration must be positive, got {self.duration}")

    @property
    def t_off(self) -> float:
        return self.t_on + self.duration


@dataclass(frozen=True)
class Grid:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    transformer: Transformer | None
    loads: Mapping[str, LoadSpec]
    dg_buses: tuple[str, ...]
    slack_bus: str
    s_base: float = 100.0
    v_base_hv: float = 110.0
    v_base_mv: float = 20.0
    slack_voltage: complex = 1.0 + 0.0j
    name: str = ""
    _index: Mapping[str, int] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {b.id: i for i, b in enumerate(self.buses)})
        _validate(self)

    @property
    def bus_ids(self) -> list[str]:
        return [b.id for b in self.buses]

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def index(self, bus_id: str) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise GridError(f"unknown bus {bus_id!r}") from None

    @property
    def slack_index(self) -> int:
        return self.index(self.slack_bus)

    @property
    def mv_buses(self) -> list[str]:
        return [b.id for b in self.buses if b.level == "mv"]

    def v_base(self, bus_id: str) -> float:
        level = self.buses[self.index(bus_id)].level
        return self.v_base_hv if level == "hv" else self.v_base_mv

    def z_base(self, bus_id: str) -> float:
        return impedance_base(self.v_base(bus_id), self.s_base)

    def branch(self, branch_id: str) -> Branch | Transformer:
        if self.transformer is not None and branch_id == self.transformer.id:
            return self.transformer
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise GridError(f"unknown branch {branch_id!r}")

    @property
    def elements(self) -> tuple[Branch | Transformer, ...]:
        """All branches plus the transformer (if any)."""
        return self.branches + ((self.transformer,) if self.transformer is not None else ())

    def with_tap(self, tap_position: int) -> "Grid":
        from dataclasses import replace

        if self.transformer is None:
            raise GridError("grid has no transformer")
        return replace(self, transformer=replace(self.transformer, tap_position=tap_position))

    def without_loads(self) -> "Grid":
        from dataclasses import replace

        return replace(self, loads={})


def _validate(grid: Grid) -> None:
    ids = [b.id for b in grid.buses]
    seen: set[str] = set()
    for bid in ids:
        if bid in seen:
            raise GridError(f"duplicate bus id {bid!r}")
        seen.add(bid)
    if grid.slack_bus not in seen:
        raise GridError(f"slack bus {grid.slack_bus!r} is not a declared bus")
    for br in grid.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in seen:
                raise GridError(f"branch {br.id!r} references unknown bus {end!r}")
        if not (np.isfinite(br.r) and np.isfinite(br.x) and np.isfinite(br.b_shunt)):
            raise GridError(f"branch {br.id!r} has non-finite parameters")
        if br.r < 0:
            raise GridError(f"branch {br.id!r} has negative resistance")
        if br.r == 0 and br.x == 0:
            raise GridError(f"branch {br.id!r} has zero impedance")
    tr = grid.transformer
    if tr is not None:
        for end in (tr.from_bus, tr.to_bus):
            if end not in seen:
                raise GridError(f"transformer {tr.id!r} references unknown bus {end!r}")
        if tr.phase_shift != 0:
            raise GridError("transformer phase shift must be 0")
        if not tr.tap_min <= tr.tap_position <= tr.tap_max:
            raise GridError(f"tap position {tr.tap_position} outside [{tr.tap_min}, {tr.tap_max}]")
        if tr.r < 0 or (tr.r == 0 and tr.x == 0):
            raise GridError(f"transformer {tr.id!r} has invalid impedance")
    _validate_loads_and_dg(grid, seen)


def _validate_loads_and_dg(grid: Grid, seen: set[str]) -> None:
    for bid, load in grid.loads.items():
        if bid not in seen:
            raise GridError(f"load references unknown bus {bid!r}")
        if load.p_nom < 0:
            raise GridError(f"load at {bid!r} has negative active power")
    for bid in grid.dg_buses:
        if bid not in seen:
            raise GridError(f"DG references unknown bus {bid!r}")
        if bid == grid.slack_bus:
            raise GridError("a DG cannot sit on the slack bus")


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _require(doc: Mapping[str, Any], key: str, where: str):
    if key not in doc:
        raise GridError(f"{where}: missing field {key!r}")
    return doc[key]


def grid_from_dict(doc: Mapping[str, Any]) -> Grid:
    """Build a :class:`Grid` from the parsed JSON document."""
    if not isinstance(doc, Mapping):
        raise GridError("grid document must be a JSON object")
    bases = doc.get("bases", {})
    s_base = float(bases.get("s_mva", 100.0))
    v_hv = float(bases.get("v_hv_kv", 110.0))
    v_mv = float(bases.get("v_mv_kv", 20.0))

    buses = []
    for i, b in enumerate(_require(doc, "buses", "grid")):
        if isinstance(b, str):
            buses.append(Bus(b))
        else:
            level = b.get("level", "mv")
            if level not in ("hv", "mv"):
                raise GridError(f"bus {b.get('id')!r}: level must be 'hv' or 'mv'")
            buses.append(Bus(str(_require(b, "id", f"buses[{i}]")), level))

    branches = []
    for i, br in enumerate(doc.get("branches", [])):
        where = f"branch {br.get('id', i)!r}"
        branches.append(Branch(
            id=str(br.get("id", f"branch-{i}")),
            from_bus=str(_require(br, "from", where)),
            to_bus=str(_require(br, "to", where)),
            r=float(_require(br, "r_ohm", where)),
            x=float(_require(br, "x_ohm", where)),
            b_shunt=float(br.get("b_us", 0.0)) * 1e-6,
            in_service=bool(br.get("in_service", True)),
        ))

    t = doc.get("transformer")
    where = "transformer"
    transformer = None if t is None else Transformer(
        id=str(t.get("id", "TR")),
        from_bus=str(_require(t, "from", where)),
        to_bus=str(_require(t, "to", where)),
        r=float(_require(t, "r_pu", where)),
        x=float(_require(t, "x_pu", where)),
        rating=float(_require(t, "rating_mva", where)),
        tap_position=int(t.get("tap_position", 0)),
        tap_neutral=int(t.get("tap_neutral", 0)),
        tap_min=int(t.get("tap_min", -16)),
        tap_max=int(t.get("tap_max", 16)),
        tap_step=float(t.get("tap_step_percent", 0.0)) / 100.0,
        phase_shift=float(t.get("phase_shift_deg", 0.0)),
    )

    loads: dict[str, LoadSpec] = {}
    raw_loads = doc.get("loads", [])
    if isinstance(raw_loads, Mapping):
        raw_loads = [dict(v, bus=k) for k, v in raw_loads.items()]
    for i, ld in enumerate(raw_loads):
        where = f"loads[{i}]"
        bus = str(_require(ld, "bus", where))
        p = float(_require(ld, "p_mw", where))
        q = float(_require(ld, "q_mvar", where))
        prev = loads.get(bus, LoadSpec(0.0, 0.0))
        loads[bus] = LoadSpec(prev.p_nom + p, prev.q_nom + q)

    slack = _require(doc, "slack", "grid")
    if isinstance(slack, str):
        slack_bus, v_set = slack, 1.0 + 0.0j
    else:
        slack_bus = str(_require(slack, "bus", "slack"))
        v_set = float(slack.get("v_pu", 1.0)) * np.exp(1j * np.deg2rad(float(slack.get("angle_deg", 0.0))))

    return Grid(
        buses=tuple(buses),
        branches=tuple(branches),
        transformer=transformer,
        loads=loads,
        dg_buses=tuple(str(b) for b in doc.get("dg", [])),
        slack_bus=slack_bus,
        s_base=s_base,
        v_base_hv=v_hv,
        v_base_mv=v_mv,
        slack_voltage=complex(v_set),
        name=str(doc.get("name", "")),
    )


def load_grid(source: str | Path | Mapping[str, Any]) -> Grid:
    """Load a grid from a JSON file path, a JSON string, or an already parsed dict."""
    if isinstance(source, Mapping):
        return grid_from_dict(source)
    text: str
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        path = Path(source)
        if not path.exists():
            raise FileNotFoundError(f"grid file not found: {path}")
        text = path.read_text()
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GridError(f"grid document is not valid JSON: {exc}") from exc
    return grid_from_dict(doc)


def bundled_path(name: str) -> Path:
    """Path of a data file shipped with the package (``cigre12.json``, ...)."""
    return Path(str(resources.files("adnsim") / "data" / name))


def cigre12() -> Grid:
    return load_grid(bundled_path("cigre12.json"))


# ---------------------------------------------------------------------------
# Admittance assembly
# ---------------------------------------------------------------------------


def branch_stamp(grid: Grid, element: Branch | Transformer) -> np.ndarray:
    """2x2 admittance stamp ``[[y_ff, y_ft], [y_tf, y_tt]]`` in system pu."""
    if isinstance(element, Transformer):
        z = complex(element.r, element.x) * grid.s_base / element.rating
        y = 1.0 / z
        # ideal a:1 on the HV side with a = 1/ratio
        a = 1.0 / element.ratio
        return np.array([[y / a**2, -y / a], [-y / a, y]], dtype=complex)
    if not element.in_service:
        return np.zeros((2, 2), dtype=complex)
    zb = grid.z_base(element.from_bus)
    z = complex(element.r, element.x) / zb
    if z == 0:
        raise GridError(f"branch {element.id!r} has zero impedance")
    y = 1.0 / z
    ysh = 0.5j * element.b_shunt * zb
    return np.array([[y + ysh, -y], [-y, y + ysh]], dtype=complex)


def load_admittances(grid: Grid) -> np.ndarray:
    """Shunt admittance per bus representing loads as constant impedances at 1 pu."""
    y = np.zeros(grid.n_bus, dtype=complex)
    for bid, load in grid.loads.items():
        y[grid.index(bid)] += complex(load.p_nom, -load.q_nom) / grid.s_base
    return y


def fault_admittances(grid: Grid, faults: Iterable[FaultSpec]) -> np.ndarray:
    y = np.zeros(grid.n_bus, dtype=complex)
    for f in faults:
        if not f.r_on > 0:
            raise ValueError("fault resistance must be positive")
        y[grid.index(f.bus)] += 1.0 / (f.r_on / impedance_base(grid.v_base_mv, grid.s_base))
    return y


def assemble_ybus(grid: Grid, load_model: LoadModel | str = LoadModel.CONSTANT_PQ,
                  faults: Sequence[FaultSpec] = ()) -> np.ndarray:
    """Dense bus admittance matrix in per unit, bus order as in ``grid.buses``.

    Constant-impedance loads and active faults enter as shunts on the diagonal.
    """
    load_model = LoadModel.parse(load_model)
    n = grid.n_bus
    ybus = np.zeros((n, n), dtype=complex)
    for element in grid.elements:
        if isinstance(element, Branch) and not element.in_service:
            continue
        i, j = grid.index(element.from_bus), grid.index(element.to_bus)
        stamp = branch_stamp(grid, element)
        ybus[i, i] += stamp[0, 0]
        ybus[i, j] += stamp[0, 1]
        ybus[j, i] += stamp[1, 0]
        ybus[j, j] += stamp[1, 1]
    if load_model is LoadModel.CONSTANT_Z:
        ybus[np.diag_indices(n)] += load_admittances(grid)
    if faults:
        ybus[np.diag_indices(n)] += fault_admittances(grid, faults)
    return ybus


def load_powers(grid: Grid) -> np.ndarray:
    """Complex nominal load consumption per bus in pu."""
    s = np.zeros(grid.n_bus, dtype=complex)
    for bid, load in grid.loads.items():
        s[grid.index(bid)] += complex(load.p_nom, load.q_nom) / grid.s_base
    return s
