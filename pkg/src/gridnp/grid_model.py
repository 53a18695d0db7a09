"""Grid case data, bus admittance assembly and N-1 topology enumeration.

Cases are immutable dataclasses in per-unit on ``base_mva``. Two input
formats are understood: the versioned JSON schema (canonical) and the
MATPOWER ``.m`` tabular format used by the public IEEE test cases.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

SCHEMA_VERSION = 1
BUS_KINDS = ("slack", "pv", "pq")


class CaseError(ValueError):
    """Base class for case parsing problems."""


class CaseSyntaxError(CaseError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class CaseValidationError(CaseError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    p_load: float = 0.0
    q_load: float = 0.0
    v_setpoint: Optional[float] = None
    v_min: float = 0.9
    v_max: float = 1.1
    gs: float = 0.0
    bs: float = 0.0
    base_kv: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0
    tap: float = 1.0
    status: bool = True
    rate_a: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    pg: float
    qg: float = 0.0
    p_max: float = 0.0
    status: bool = True


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    name: str = ""

    def __post_init__(self):
        validate_case(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def bus_index(self) -> dict[int, int]:
        """Map from bus id to row position."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def slack(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == "slack")

    @property
    def pv(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.kind == "pv"], dtype=np.intp)

    @property
    def pq(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.kind == "pq"], dtype=np.intp)

    @property
    def load_buses(self) -> np.ndarray:
        return np.array(
            [i for i, b in enumerate(self.buses) if b.p_load != 0.0 or b.q_load != 0.0],
            dtype=np.intp,
        )

    def fingerprint(self) -> str:
        """Stable SHA-256 of the canonical JSON form."""
        return hashlib.sha256(to_json(self).encode()).hexdigest()


@dataclass(frozen=True)
class Topology:
    id: int
    status_vector: tuple[bool, ...]
    outage: Optional[int] = None

    def __post_init__(self):
        off = [i for i, s in enumerate(self.status_vector) if not s]
        if len(off) > 1:
            raise ValueError("an N-1 topology has at most one branch out of service")
        if off and self.outage != off[0]:
            raise ValueError("outage index disagrees with status vector")
        if not off and self.outage is not None:
            raise ValueError("outage index given but status vector is all in service")

    def describe(self, case: NetworkCase) -> str:
        if self.outage is None:
            return "Base case (no line outage)"
        br = case.branches[self.outage]
        return f"Line from bus {br.from_bus} to bus {br.to_bus}"


def base_topology(case: NetworkCase, topology_id: int = 1) -> Topology:
    return Topology(topology_id, tuple(True for _ in case.branches))


def outage_topology(case: NetworkCase, branch: int, topology_id: int) -> Topology:
    status = [True] * case.n_branch
    status[branch] = False
    return Topology(topology_id, tuple(status), outage=branch)


# --------------------------------------------------------------------- validation

def validate_case(case: NetworkCase) -> None:
    if not case.base_mva > 0:
        raise CaseValidationError(f"base_mva must be positive, got {case.base_mva}")
    ids = [b.id for b in case.buses]
    if not ids:
        raise CaseValidationError("case has no buses")
    seen = set()
    for i in ids:
        if i in seen:
            raise CaseValidationError(f"duplicate bus id {i}")
        seen.add(i)
    n_slack = sum(b.kind == "slack" for b in case.buses)
    if n_slack != 1:
        raise CaseValidationError(f"expected exactly one slack bus, found {n_slack}")
    for b in case.buses:
        if b.kind not in BUS_KINDS:
            raise CaseValidationError(f"bus {b.id}: unknown kind {b.kind!r}")
        if not b.v_min < b.v_max:
            raise CaseValidationError(f"bus {b.id}: v_min must be below v_max")
        if b.kind in ("slack", "pv"):
            if b.v_setpoint is None:
                raise CaseValidationError(f"bus {b.id}: {b.kind} bus needs v_setpoint")
            if not b.v_min <= b.v_setpoint <= b.v_max:
                raise CaseValidationError(f"bus {b.id}: v_setpoint outside [v_min, v_max]")
    for k, br in enumerate(case.branches):
        for end in (br.from_bus, br.to_bus):
            if end not in seen:
                raise CaseValidationError(f"branch {k} references unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {k} connects bus {br.from_bus} to itself")
        if br.r == 0.0 and br.x == 0.0:
            raise CaseValidationError(f"branch {k} has zero impedance")
        if not br.tap > 0:
            raise CaseValidationError(f"branch {k}: tap must be positive")
    for g in case.generators:
        if g.bus not in seen:
            raise CaseValidationError(f"generator references unknown bus {g.bus}")


# --------------------------------------------------------------------- JSON format

def _case_from_dict(doc: dict, name: str = "") -> NetworkCase:
    if not isinstance(doc, dict):
        raise CaseValidationError("case document must be a JSON object")
    missing = {"version", "base_mva", "buses", "branches", "generators"} - doc.keys()
    if missing:
        raise CaseValidationError(f"missing top-level keys: {sorted(missing)}")
    if doc["version"] != SCHEMA_VERSION:
        raise CaseValidationError(f"unsupported schema version {doc['version']}")
    try:
        buses = tuple(Bus(**b) for b in doc["buses"])
        branches = tuple(Branch(**b) for b in doc["branches"])
        gens = tuple(Generator(**g) for g in doc["generators"])
    except TypeError as exc:
        raise CaseValidationError(str(exc)) from None
    return NetworkCase(float(doc["base_mva"]), buses, branches, gens, name=doc.get("name", name))


def parse_case(text: str, name: str = "") -> NetworkCase:
    """Parse a case from its JSON document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    return _case_from_dict(doc, name)


def to_json(case: NetworkCase) -> str:
    doc = {
        "version": SCHEMA_VERSION,
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [dataclasses.asdict(b) for b in case.buses],
        "branches": [dataclasses.asdict(b) for b in case.branches],
        "generators": [dataclasses.asdict(g) for g in case.generators],
    }
    return json.dumps(doc, indent=1)


# --------------------------------------------------------------------- MATPOWER format

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)\s*;")


def _parse_matrix(body: str) -> np.ndarray:
    rows = []
    for chunk in body.split(";"):
        chunk = re.sub(r"%.*", "", chunk).strip()
        if chunk:
            rows.append([float(v) for v in chunk.split()])
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise CaseSyntaxError("ragged matrix rows")
    return np.array(rows)


def import_matpower(text: str, name: str = "") -> NetworkCase:
    """Read MATPOWER version-2 bus/gen/branch matrices.

    Quantities in MW/MVAr are converted to per-unit. A PV bus without an
    in-service generator becomes PQ; the generator ``Vg`` column supplies the
    voltage setpoint.
    """
    stripped = "\n".join(re.sub(r"%.*", "", ln) for ln in text.splitlines())
    base = _SCALAR_RE.search(stripped)
    if base is None:
        raise CaseSyntaxError("mpc.baseMVA not found")
    mats = {m.group(1): m.group(2) for m in _MATRIX_RE.finditer(stripped)}
    for key in ("bus", "gen", "branch"):
        if key not in mats:
            raise CaseSyntaxError(f"mpc.{key} matrix not found")
    base_mva = float(base.group(1))
    bus = _parse_matrix(mats["bus"])
    gen = _parse_matrix(mats["gen"])
    branch = _parse_matrix(mats["branch"])

    gens = []
    vg: dict[int, float] = {}
    for row in gen:
        on = row[7] > 0
        gens.append(Generator(int(row[0]), row[1] / base_mva, row[2] / base_mva,
                              row[8] / base_mva, bool(on)))
        if on:
            vg.setdefault(int(row[0]), float(row[5]))

    kind_of = {1: "pq", 2: "pv", 3: "slack"}
    buses = []
    for row in bus:
        bid, btype = int(row[0]), int(row[1])
        if btype not in kind_of:
            raise CaseValidationError(f"bus {bid}: unsupported bus type {btype}")
        kind = kind_of[btype]
        if kind == "pv" and bid not in vg:
            kind = "pq"
        setpoint = vg.get(bid, float(row[7])) if kind != "pq" else None
        buses.append(Bus(bid, kind, row[2] / base_mva, row[3] / base_mva, setpoint,
                         v_min=float(row[12]), v_max=float(row[11]),
                         gs=row[4] / base_mva, bs=row[5] / base_mva, base_kv=float(row[9])))

    branches = []
    for k, row in enumerate(branch):
        if row[9] != 0.0:
            raise CaseValidationError(f"branch {k}: phase shifters are not supported")
        branches.append(Branch(int(row[0]), int(row[1]), float(row[2]), float(row[3]),
                               float(row[4]), float(row[8]) or 1.0, bool(row[10] > 0),
                               float(row[5])))
    return NetworkCase(base_mva, tuple(buses), tuple(branches), tuple(gens), name=name)


BUNDLED = {"case9": "case9.m", "case118": "case118.m", "case9.json": "case9.json"}


def load_case(path_or_name: str | Path) -> NetworkCase:
    """Load a bundled case by name or a case file by path (``.json`` or ``.m``)."""
    key = str(path_or_name)
    if key in BUNDLED:
        res = resources.files("gridnp.data").joinpath(BUNDLED[key])
        text = res.read_text()
        fname = BUNDLED[key]
    else:
        p = Path(key)
        if not p.exists():
            raise FileNotFoundError(f"case file not found: {p}")
        text = p.read_text()
        fname = p.name
    stem = fname.split(".")[0]
    if fname.endswith(".m"):
        return import_matpower(text, name=stem)
    return parse_case(text, name=stem)


# --------------------------------------------------------------------- admittance

@dataclass(frozen=True)
class AdmittanceMatrix:
    """Bus admittance in coordinate form ordered by (row, col).

    The diagonal is always stored, even when zero, so Jacobian kernels can
    rely on a fixed sparsity pattern.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    _csr: sp.csr_matrix = field(repr=False, compare=False, default=None)

    def tocsr(self) -> sp.csr_matrix:
        return self._csr

    def toarray(self) -> np.ndarray:
        if self.n > 200:
            raise ValueError("dense conversion is limited to N <= 200")
        return self._csr.toarray()

    def __getitem__(self, kl) -> complex:
        k, l = kl
        return complex(self._csr[k, l])


def branch_stamp(branch: Branch) -> tuple[complex, complex, complex, complex]:
    """Return (Yff, Yft, Ytf, Ytt) of the branch pi-model."""
    ys = 1.0 / complex(branch.r, branch.x)
    ytt = ys + 0.5j * branch.b_shunt
    tap = branch.tap
    return ytt / tap**2, -ys / tap, -ys / tap, ytt


def build_admittance(case: NetworkCase, topo: Topology) -> AdmittanceMatrix:
    if len(topo.status_vector) != case.n_branch:
        raise ValueError("status vector length does not match branch count")
    idx = case.bus_index
    n = case.n_bus
    rows: list[int] = list(range(n))
    cols: list[int] = list(range(n))
    vals: list[complex] = [complex(b.gs, b.bs) for b in case.buses]
    for br, on in zip(case.branches, topo.status_vector):
        if not (on and br.status):
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        yff, yft, ytf, ytt = branch_stamp(br)
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [yff, yft, ytf, ytt]
    csr = sp.csr_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n))
    csr.sum_duplicates()
    csr.sort_indices()
    coo = csr.tocoo()
    return AdmittanceMatrix(n, coo.row.astype(np.intp), coo.col.astype(np.intp),
                            coo.data.copy(), csr)


# --------------------------------------------------------------------- connectivity

def _components(n: int, edges: Iterable[tuple[int, int]]) -> np.ndarray:
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    return np.array([find(i) for i in range(n)])


def is_connected(case: NetworkCase, topo: Topology) -> bool:
    idx = case.bus_index
    edges = (
        (idx[br.from_bus], idx[br.to_bus])
        for br, on in zip(case.branches, topo.status_vector)
        if on and br.status
    )
    return len(set(_components(case.n_bus, edges))) == 1


def enumerate_n1(case: NetworkCase) -> list[Topology]:
    """Base case first, then every single-branch outage that islands no bus."""
    topologies = [base_topology(case)]
    for k, br in enumerate(case.branches):
        if not br.status:
            continue
        topo = outage_topology(case, k, len(topologies) + 1)
        if is_connected(case, topo):
            topologies.append(topo)
    return topologies


def topology_by_id(topologies: Sequence[Topology], topology_id: int) -> Topology:
    for t in topologies:
        if t.id == topology_id:
            return t
    raise KeyError(f"unknown topology id {topology_id}")
