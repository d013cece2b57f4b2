"""Grid case model, MATPOWER case parsing and canonical JSON storage.

All electrical quantities are stored in per-unit on the case MVA base and all
angles in radians.  Buses are re-indexed to ``0..N-1`` in file order; the
original MATPOWER bus numbers survive in :attr:`GridCase.external_ids`.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

SCHEMA = "gridcase/1"


class CaseError(ValueError):
    """Base class for case parsing and validation failures."""


class MissingSection(CaseError):
    pass


class MalformedNumber(CaseError):
    pass


class SchemaMismatch(CaseError):
    pass


class InvariantViolation(CaseError):
    pass


class MultipleSlack(InvariantViolation):
    pass


class DanglingBranch(InvariantViolation):
    pass


class BusType(str, enum.Enum):
    PQ = "PQ"
    PV = "PV"
    SLACK = "Slack"


_MATPOWER_BUS_TYPES = {1: BusType.PQ, 2: BusType.PV, 3: BusType.SLACK}


@dataclass(frozen=True)
class Bus:
    id: int
    bus_type: BusType
    p_load: float
    q_load: float
    gs: float = 0.0
    bs: float = 0.0
    vm_setpoint: float = 1.0
    va_setpoint: float = 0.0
    base_kv: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    status: bool = True


@dataclass(frozen=True)
class Generator:
    bus: int
    p_gen: float
    q_gen: float = 0.0
    vm_set: float = 1.0


@dataclass(frozen=True)
class GridCase:
    """A validated power network in per-unit.

    Construction enforces the structural invariants (one slack bus, at least
    one PQ bus, contiguous bus ids, valid branch endpoints, positive taps and
    voltage setpoints), so every downstream consumer can rely on them.
    """

    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...] = ()
    external_ids: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        if not self.external_ids:
            object.__setattr__(self, "external_ids", tuple(range(1, len(self.buses) + 1)))
        else:
            object.__setattr__(self, "external_ids", tuple(int(i) for i in self.external_ids))
        self._validate()

    def _validate(self) -> None:
        n = len(self.buses)
        if self.base_mva <= 0:
            raise InvariantViolation(f"base_mva must be positive, got {self.base_mva}")
        if [b.id for b in self.buses] != list(range(n)):
            raise InvariantViolation("bus ids must be the contiguous range 0..N-1 in order")
        if len(self.external_ids) != n or len(set(self.external_ids)) != n:
            raise InvariantViolation("external_ids must be unique, one per bus")
        n_slack = sum(b.bus_type is BusType.SLACK for b in self.buses)
        if n_slack > 1:
            raise MultipleSlack(f"{n_slack} slack buses; exactly one is required")
        if n_slack == 0:
            raise InvariantViolation("no slack bus")
        if not any(b.bus_type is BusType.PQ for b in self.buses):
            raise InvariantViolation("at least one PQ bus is required")
        for b in self.buses:
            if b.bus_type is not BusType.PQ and not b.vm_setpoint > 0:
                raise InvariantViolation(f"bus {b.id}: vm_setpoint must be > 0")
        for k, br in enumerate(self.branches):
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                raise DanglingBranch(f"branch {k} references a bus outside 0..{n - 1}")
            if not br.tap > 0:
                raise InvariantViolation(f"branch {k}: tap must be > 0")
        for g in self.generators:
            if not 0 <= g.bus < n:
                raise DanglingBranch(f"generator at unknown bus {g.bus}")

    # -- convenience views -------------------------------------------------

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.bus_type is BusType.SLACK)

    def indices(self, bus_type: BusType) -> np.ndarray:
        return np.array([b.id for b in self.buses if b.bus_type is bus_type], dtype=np.int64)

    @property
    def pq(self) -> np.ndarray:
        return self.indices(BusType.PQ)

    @property
    def pv(self) -> np.ndarray:
        return self.indices(BusType.PV)

    def in_service(self) -> np.ndarray:
        return np.array([k for k, br in enumerate(self.branches) if br.status], dtype=np.int64)

    def injections(self) -> tuple[np.ndarray, np.ndarray]:
        """Net specified injections (generation minus load), per-unit."""
        p = np.array([-b.p_load for b in self.buses], dtype=float)
        q = np.array([-b.q_load for b in self.buses], dtype=float)
        for g in self.generators:
            p[g.bus] += g.p_gen
            q[g.bus] += g.q_gen
        return p, q

    def setpoints(self) -> tuple[np.ndarray, np.ndarray]:
        vm = np.array([b.vm_setpoint for b in self.buses], dtype=float)
        va = np.array([b.va_setpoint for b in self.buses], dtype=float)
        return vm, va

    def with_branches(self, branches) -> "GridCase":
        return replace(self, branches=tuple(branches))

    def with_buses(self, buses) -> "GridCase":
        return replace(self, buses=tuple(buses))

    def drop_branches(self, idx) -> "GridCase":
        idx = set(int(i) for i in idx)
        return self.with_branches(
            replace(br, status=False) if k in idx else br for k, br in enumerate(self.branches)
        )


# -- MATPOWER ---------------------------------------------------------------

_SCALAR_RE = r"mpc\.{name}\s*=\s*([^;\n]+);"
_MATRIX_RE = r"mpc\.{name}\s*=\s*\[(.*?)\]\s*;?"


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _number(tok: str) -> float:
    try:
        return float(tok)
    except ValueError:
        if tok.lower() in ("inf", "+inf", "-inf", "nan"):
            return float(tok)
        raise MalformedNumber(f"cannot parse number {tok!r}") from None


def _matrix(text: str, name: str) -> np.ndarray:
    m = re.search(_MATRIX_RE.format(name=name), text, re.S)
    if m is None:
        raise MissingSection(f"mpc.{name} not found")
    rows = []
    for chunk in re.split(r"[;\n]", m.group(1)):
        toks = chunk.replace(",", " ").split()
        if toks:
            rows.append([_number(t) for t in toks])
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise MalformedNumber(f"mpc.{name}: ragged rows")
    return np.array(rows, dtype=float)


def parse_matpower(text: str, name: str | None = None) -> GridCase:
    """Parse the bus/gen/branch subset of a MATPOWER version-2 case file."""
    text = _strip_comments(text)
    m = re.search(_SCALAR_RE.format(name="baseMVA"), text)
    if m is None:
        raise MissingSection("mpc.baseMVA not found")
    base = _number(m.group(1).strip())
    bus = _matrix(text, "bus")
    gen = _matrix(text, "gen")
    branch = _matrix(text, "branch")
    if name is None:
        fm = re.search(r"function\s+\w+\s*=\s*(\w+)", text)
        name = fm.group(1) if fm else "case"

    if bus.shape[1] < 13 or (len(gen) and gen.shape[1] < 8) or branch.shape[1] < 11:
        raise MalformedNumber("bus/gen/branch matrices have too few columns")

    ext = [int(v) for v in bus[:, 0]]
    index = {e: i for i, e in enumerate(ext)}
    if len(index) != len(ext):
        raise InvariantViolation("duplicate bus numbers")
    types = []
    for code in bus[:, 1].astype(int):
        if code == 4:  # isolated bus: kept as PQ with zero injection
            code = 1
        if code not in _MATPOWER_BUS_TYPES:
            raise InvariantViolation(f"unknown bus type {code}")
        types.append(_MATPOWER_BUS_TYPES[code])
    if sum(t is BusType.SLACK for t in types) > 1:
        raise MultipleSlack("more than one type-3 bus")

    gens: list[Generator] = []
    vg: dict[int, float] = {}
    for row in gen:
        if row[7] <= 0:
            continue
        ext_bus = int(row[0])
        if ext_bus not in index:
            raise DanglingBranch(f"generator at unknown bus {ext_bus}")
        i = index[ext_bus]
        gens.append(Generator(i, row[1] / base, row[2] / base, float(row[5])))
        vg.setdefault(i, float(row[5]))

    buses = []
    for i, row in enumerate(bus):
        t = types[i]
        if t is BusType.PV and i not in vg:
            t = BusType.PQ  # a PV bus without an online generator regulates nothing
        vm = vg.get(i, float(row[7])) if t is not BusType.PQ else float(row[7])
        buses.append(
            Bus(
                id=i,
                bus_type=t,
                p_load=row[2] / base,
                q_load=row[3] / base,
                gs=row[4] / base,
                bs=row[5] / base,
                vm_setpoint=vm,
                va_setpoint=math.radians(row[8]),
                base_kv=float(row[9]),
            )
        )

    branches = []
    for row in branch:
        f, t = int(row[0]), int(row[1])
        if f not in index or t not in index:
            raise DanglingBranch(f"branch {f}-{t} references an unknown bus")
        branches.append(
            Branch(
                from_bus=index[f],
                to_bus=index[t],
                r=float(row[2]),
                x=float(row[3]),
                b_charging=float(row[4]),
                tap=float(row[8]) if row[8] != 0 else 1.0,
                shift=math.radians(row[9]),
                status=bool(row[10] > 0),
            )
        )
    return GridCase(name, float(base), tuple(buses), tuple(branches), tuple(gens), tuple(ext))


def load_matpower(path: str | Path) -> GridCase:
    path = Path(path)
    return parse_matpower(path.read_text(), name=path.stem)


def builtin_case(name: str) -> GridCase:
    """Load one of the bundled MATPOWER cases (``case9``, ``case39``, ``case118``)."""
    text = resources.files("gridflow").joinpath("data", f"{name}.m").read_text()
    return parse_matpower(text, name=name)


# -- JSON -------------------------------------------------------------------


def case_to_dict(case: GridCase) -> dict:
    return {
        "schema": SCHEMA,
        "name": case.name,
        "base_mva": case.base_mva,
        "external_ids": list(case.external_ids),
        "buses": [
            {
                "id": b.id,
                "type": b.bus_type.value,
                "p_load": b.p_load,
                "q_load": b.q_load,
                "gs": b.gs,
                "bs": b.bs,
                "vm_setpoint": b.vm_setpoint,
                "va_setpoint": b.va_setpoint,
                "base_kv": b.base_kv,
            }
            for b in case.buses
        ],
        "branches": [
            {
                "from": br.from_bus,
                "to": br.to_bus,
                "r": br.r,
                "x": br.x,
                "b_charging": br.b_charging,
                "tap": br.tap,
                "shift": br.shift,
                "status": br.status,
            }
            for br in case.branches
        ],
        "generators": [
            {"bus": g.bus, "p_gen": g.p_gen, "q_gen": g.q_gen, "vm_set": g.vm_set}
            for g in case.generators
        ],
    }


def case_from_dict(d: dict) -> GridCase:
    if d.get("schema") != SCHEMA:
        raise SchemaMismatch(f"expected schema {SCHEMA!r}, got {d.get('schema')!r}")
    try:
        buses = tuple(
            Bus(
                id=int(b["id"]),
                bus_type=BusType(b["type"]),
                p_load=float(b["p_load"]),
                q_load=float(b["q_load"]),
                gs=float(b["gs"]),
                bs=float(b["bs"]),
                vm_setpoint=float(b["vm_setpoint"]),
                va_setpoint=float(b["va_setpoint"]),
                base_kv=float(b["base_kv"]),
            )
            for b in d["buses"]
        )
        branches = tuple(
            Branch(
                int(br["from"]),
                int(br["to"]),
                float(br["r"]),
                float(br["x"]),
                float(br["b_charging"]),
                float(br["tap"]),
                float(br["shift"]),
                bool(br["status"]),
            )
            for br in d["branches"]
        )
        gens = tuple(
            Generator(int(g["bus"]), float(g["p_gen"]), float(g["q_gen"]), float(g["vm_set"]))
            for g in d["generators"]
        )
        return GridCase(
            str(d["name"]), float(d["base_mva"]), buses, branches, gens, tuple(d["external_ids"])
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CaseError):
            raise
        raise SchemaMismatch(f"malformed gridcase document: {exc}") from exc


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def to_json(case: GridCase) -> str:
    return dumps_canonical(case_to_dict(case))


def from_json(text: str) -> GridCase:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"not JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise SchemaMismatch("gridcase document must be a JSON object")
    return case_from_dict(d)


def load_case(path: str | Path) -> GridCase:
    """Load a case from ``.json`` (gridcase/1) or ``.m`` (MATPOWER)."""
    path = Path(path)
    if path.suffix == ".m":
        return load_matpower(path)
    return from_json(path.read_text(encoding="utf-8"))
