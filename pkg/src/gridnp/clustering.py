"""Grouping N-1 topologies by contingency severity, plus PCA diagnostics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .grid_model import NetworkCase, Topology, build_admittance
from .powerflow import InjectionVector, NewtonSolver, PowerFlowError, SolverOptions
from .scenario import default_study

# outage topologies grouped as in the reference 9-bus study; the base
# topology is added to cluster 1 when a mapping leaves it out
REFERENCE_CLUSTERS = {2: 1, 4: 1, 5: 1, 3: 2, 6: 2, 7: 3}


class ClusteringError(ValueError):
    pass


# --------------------------------------------------------------------- PCA

@dataclass(frozen=True)
class PCAResult:
    scores: np.ndarray
    direction: np.ndarray
    mean: np.ndarray
    variance: float
    share: float  # leading eigenvalue over total variance
    iterations: int


def pca_first_component(xi: np.ndarray, tol: float = 1e-10, max_iter: int = 10000) -> PCAResult:
    """Leading principal component by power iteration on the sample covariance."""
    x = np.asarray(xi, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ClusteringError("PCA needs a 2-D array with at least two rows")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    total = float(np.trace(cov))
    if not total > 0.0:
        raise ClusteringError("data has zero variance")
    # the covariance column of the most variable feature is never orthogonal
    # to the leading eigenvector unless the spectrum is degenerate
    w = cov[:, int(np.argmax(np.diag(cov)))].copy()
    w /= np.linalg.norm(w)
    it = 0
    for it in range(1, max_iter + 1):
        nxt = cov @ w
        nrm = np.linalg.norm(nxt)
        if nrm == 0.0:
            break
        nxt /= nrm
        if nxt @ w < 0:
            nxt = -nxt
        done = np.linalg.norm(nxt - w) < tol
        w = nxt
        if done:
            break
    lead = w[np.flatnonzero(np.abs(w) > 1e-12)[0]]
    if lead < 0:
        w = -w
    lam = float(w @ cov @ w)
    return PCAResult(xc @ w, w, mean, lam, lam / total, it)


# --------------------------------------------------------------------- severity

@dataclass
class SeverityEntry:
    topology_id: int
    voltages: np.ndarray  # per-bus magnitude at the reference load, NaN if unsolved
    deviation: float  # max |V - V_base|, inf when the solve failed
    converged: bool
    rank: int = 0


@dataclass
class SeverityReport:
    entries: list[SeverityEntry]
    base_id: int

    def by_id(self) -> dict[int, SeverityEntry]:
        return {e.topology_id: e for e in self.entries}

    def ranked(self) -> list[SeverityEntry]:
        return sorted(self.entries, key=lambda e: e.rank)

    def to_dict(self) -> dict:
        return {
            "base_id": self.base_id,
            "topologies": [
                {"topology_id": e.topology_id, "rank": e.rank, "converged": e.converged,
                 "deviation": e.deviation if np.isfinite(e.deviation) else None,
                 "voltages": [None if np.isnan(v) else float(v) for v in e.voltages]}
                for e in self.ranked()
            ],
        }

    def to_markdown(self, case: Optional[NetworkCase] = None) -> str:
        lines = ["| rank | topology | worst deviation (p.u.) |", "|---:|---:|---:|"]
        for e in self.ranked():
            dev = f"{e.deviation:.5f}" if np.isfinite(e.deviation) else "no convergence"
            lines.append(f"| {e.rank} | {e.topology_id} | {dev} |")
        return "\n".join(lines) + "\n"


def _solve_voltages(case: NetworkCase, topo: Topology, inj: InjectionVector,
                    opts: SolverOptions) -> Optional[np.ndarray]:
    try:
        sol = NewtonSolver(case, build_admittance(case, topo)).solve(inj, opts)
    except PowerFlowError:
        return None
    return sol.v_mag if sol.converged else None


def severity_rank(case: NetworkCase, topologies: Sequence[Topology],
                  reference: Optional[InjectionVector] = None,
                  opts: Optional[SolverOptions] = None) -> SeverityReport:
    """Rank topologies by worst-bus voltage deviation from the intact network.

    ``reference`` defaults to the study's mean load. A topology that fails to
    converge gets infinite deviation and therefore the top rank.
    """
    if not topologies:
        raise ClusteringError("no topologies to rank")
    if reference is None:
        study = default_study(case)
        reference = study.injection(study.mean_features())
    opts = opts or SolverOptions()
    base = [t for t in topologies if t.outage is None]
    if len(base) != 1:
        raise ClusteringError("exactly one intact (base) topology is required")
    v_base = _solve_voltages(case, base[0], reference, opts)
    if v_base is None:
        raise ClusteringError("base topology does not converge at the reference load")
    entries = []
    for topo in sorted(topologies, key=lambda t: t.id):
        v = _solve_voltages(case, topo, reference, opts)
        if v is None:
            entries.append(SeverityEntry(topo.id, np.full(case.n_bus, np.nan), np.inf, False))
        else:
            entries.append(SeverityEntry(topo.id, v, float(np.max(np.abs(v - v_base))), True))
    # ties broken by id so the ranking ignores input order
    for r, e in enumerate(sorted(entries, key=lambda e: (-e.deviation, e.topology_id)), start=1):
        e.rank = r
    return SeverityReport(entries, base[0].id)


# --------------------------------------------------------------------- assignment

@dataclass
class ClusterAssignment:
    mapping: dict[int, int]
    method: str
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ("manual", "severity"):
            raise ClusteringError(f"unknown clustering method {self.method!r}")
        self.mapping = {int(k): int(v) for k, v in self.mapping.items()}

    @property
    def clusters(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for tid, cid in sorted(self.mapping.items()):
            out.setdefault(cid, []).append(tid)
        return dict(sorted(out.items()))

    def to_json(self) -> str:
        doc = {"method": self.method, "mapping": {str(k): v for k, v in sorted(self.mapping.items())},
               "parameters": self.parameters}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ClusterAssignment":
        doc = json.loads(text)
        return cls({int(k): int(v) for k, v in doc["mapping"].items()}, doc["method"],
                   doc.get("parameters", {}))


def assign_manual(mapping: Mapping[int, int], topology_ids: Sequence[int],
                  base_id: Optional[int] = 1, base_cluster: int = 1) -> ClusterAssignment:
    """Reproduce a given mapping; the base topology defaults to ``base_cluster``."""
    full = {int(k): int(v) for k, v in mapping.items()}
    if base_id is not None and base_id in topology_ids and base_id not in full:
        full[base_id] = base_cluster
    missing = sorted(set(topology_ids) - set(full))
    if missing:
        raise ClusteringError(f"topologies without a cluster: {missing}")
    unknown = sorted(set(full) - set(topology_ids))
    if unknown:
        raise ClusteringError(f"mapping names unknown topologies: {unknown}")
    return ClusterAssignment(full, "manual", {"manual": {str(k): v for k, v in sorted(mapping.items())}})


def assign_severity(report: SeverityReport, thresholds: Sequence[float]) -> ClusterAssignment:
    """Band topologies by deviation; band = number of thresholds at or below it.

    Occupied bands are renumbered 1..m from least to most severe.
    """
    cuts = sorted(float(t) for t in thresholds)
    if not cuts:
        raise ClusteringError("severity mode needs at least one threshold")
    band = {e.topology_id: int(np.searchsorted(cuts, e.deviation, side="right")) for e in report.entries}
    order = {b: i + 1 for i, b in enumerate(sorted(set(band.values())))}
    return ClusterAssignment({t: order[b] for t, b in band.items()}, "severity", {"thresholds": cuts})


def assign_clusters(config: Mapping, topology_ids: Sequence[int],
                    report: Optional[SeverityReport] = None, base_id: Optional[int] = 1) -> ClusterAssignment:
    """Dispatch on a cluster config ``{method, thresholds | manual}``."""
    method = config.get("method")
    if method == "manual":
        if "manual" not in config:
            raise ClusteringError("manual config needs a 'manual' mapping")
        return assign_manual({int(k): v for k, v in config["manual"].items()}, topology_ids, base_id,
                             int(config.get("base_cluster", 1)))
    if method == "severity":
        if report is None:
            raise ClusteringError("severity mode needs a severity report")
        got = assign_severity(report, config.get("thresholds", []))
        missing = sorted(set(topology_ids) - set(got.mapping))
        if missing:
            raise ClusteringError(f"topologies without a cluster: {missing}")
        got.mapping = {t: c for t, c in got.mapping.items() if t in set(topology_ids)}
        return got
    raise ClusteringError(f"unknown clustering method {method!r}")


def reference_config() -> dict:
    return {"method": "manual", "manual": {str(k): v for k, v in REFERENCE_CLUSTERS.items()}}


def load_cluster_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ClusteringError(f"cluster config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ClusteringError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or "method" not in doc:
        raise ClusteringError(f"{path}: expected an object with a 'method' key")
    return doc
