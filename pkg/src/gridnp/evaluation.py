"""Error metrics, per-topology reports and the Case 1 / Case 2 experiment runner."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .clustering import ClusterAssignment, assign_clusters, reference_config
from .np_model import NPConfig, NPModel, TrainHistory, predict, sample_context, save_checkpoint, train
from .scenario import Dataset


class EvaluationError(ValueError):
    pass


# --------------------------------------------------------------------- metrics

def l1_relative(v_hat, v_mcs) -> float:
    """100 * ||v_hat - v_mcs||_1 / ||v_mcs||_1."""
    a = np.asarray(v_hat, dtype=float)
    b = np.asarray(v_mcs, dtype=float)
    if a.shape != b.shape:
        raise EvaluationError(f"shape mismatch {a.shape} vs {b.shape}")
    den = np.abs(b).sum()
    if den == 0.0:
        raise EvaluationError("reference vector is all zero")
    return float(100.0 * np.abs(a - b).sum() / den)


def l1_per_scenario(v_hat, v_mcs) -> np.ndarray:
    """Row-wise %L1 for (scenarios, buses) arrays."""
    a = np.atleast_2d(np.asarray(v_hat, dtype=float))
    b = np.atleast_2d(np.asarray(v_mcs, dtype=float))
    if a.shape != b.shape:
        raise EvaluationError(f"shape mismatch {a.shape} vs {b.shape}")
    den = np.abs(b).sum(axis=1)
    if np.any(den == 0.0):
        raise EvaluationError("reference row is all zero")
    return 100.0 * np.abs(a - b).sum(axis=1) / den


def _pair(v_hat, v):
    a = np.atleast_2d(np.asarray(v_hat, dtype=float))
    b = np.atleast_2d(np.asarray(v, dtype=float))
    if a.shape != b.shape:
        raise EvaluationError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise EvaluationError("empty input")
    return a, b


def rmse(v_hat, v) -> float:
    """Mean over buses (rows) of the per-bus RMS error across scenarios (columns)."""
    a, b = _pair(v_hat, v)
    return float(np.mean(np.sqrt(np.mean((a - b) ** 2, axis=1))))


def mae(v_hat, v) -> float:
    """Mean absolute error over buses (rows) and scenarios (columns)."""
    a, b = _pair(v_hat, v)
    return float(np.mean(np.abs(a - b)))


# --------------------------------------------------------------------- report

@dataclass
class EvalRow:
    topology_id: int
    cluster: int
    mae: float
    rmse: float
    l1: float  # mean over scenarios of per-scenario %L1
    n: int
    l1_values: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if min(self.mae, self.rmse, self.l1) < 0:
            raise EvaluationError("metrics must be nonnegative")
        # per-bus RMS >= per-bus mean |e|, averaged over buses
        if self.mae > self.rmse * (1 + 1e-12) + 1e-15:
            raise EvaluationError(f"MAE {self.mae} exceeds RMSE {self.rmse}")


@dataclass
class EvalReport:
    case_id: str
    seed: int
    rows: list[EvalRow]
    minutes: dict[int, float]  # training wall clock per cluster
    meta: dict = field(default_factory=dict)

    @property
    def total_minutes(self) -> float:
        return float(sum(self.minutes.values()))

    def row(self, topology_id: int) -> EvalRow:
        for r in self.rows:
            if r.topology_id == topology_id:
                return r
        raise KeyError(topology_id)

    def l1_by_topology(self) -> dict[int, float]:
        return {r.topology_id: r.l1 for r in self.rows}

    def to_dict(self, values: bool = True) -> dict:
        rows = []
        for r in self.rows:
            d = asdict(r)
            if not values:
                d.pop("l1_values")
            rows.append(d)
        return {"case_id": self.case_id, "seed": self.seed, "rows": rows,
                "minutes": {str(k): v for k, v in self.minutes.items()},
                "total_minutes": self.total_minutes, "meta": self.meta}

    def to_json(self, values: bool = True, timing: bool = True) -> str:
        doc = self.to_dict(values)
        if not timing:
            # wall clock is the one nondeterministic field
            doc.pop("minutes")
            doc.pop("total_minutes")
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        rows = [EvalRow(**r) for r in doc["rows"]]
        minutes = {int(k): v for k, v in doc.get("minutes", {}).items()}
        return cls(doc["case_id"], doc["seed"], rows, minutes, doc.get("meta", {}))

    def to_markdown(self) -> str:
        lines = [f"### {self.case_id} (seed {self.seed})", "",
                 "| topology | cluster | MAE | RMSE | %L1 | n |", "|---:|---:|---:|---:|---:|---:|"]
        for r in self.rows:
            lines.append(f"| {r.topology_id} | {r.cluster} | {r.mae:.3e} | {r.rmse:.3e} | {r.l1:.3f} | {r.n} |")
        lines.append("")
        costs = ", ".join(f"cluster {k}: {v:.2f}" for k, v in sorted(self.minutes.items()))
        lines.append(f"Training cost (min): {costs}; total {self.total_minutes:.2f}")
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------- evaluation

def evaluate_topology(model: NPModel, dataset: Dataset, topology_id: int, seed: int = 0,
                      n_context: Optional[int] = None, mode: str = "mean", cluster: int = 1) -> EvalRow:
    """Score the held-out rows of one topology with a context drawn from its training pool."""
    td = dataset.topologies[topology_id]
    if len(td.xi_test) == 0:
        raise EvaluationError(f"topology {topology_id} has no held-out rows")
    n_context = n_context or model.config.n_context
    xc, vc = sample_context(dataset, topology_id, n_context, np.random.SeedSequence([seed, topology_id, 3]))
    rng = np.random.default_rng(np.random.SeedSequence([seed, topology_id, 4]))
    mu, _ = predict(model, topology_id, xc, vc, td.xi_test, mode=mode, rng=rng)
    per = l1_per_scenario(mu, td.v_test)
    return EvalRow(topology_id, cluster, mae(mu.T, td.v_test.T), rmse(mu.T, td.v_test.T),
                   float(per.mean()), len(per), per.tolist())


@dataclass
class ExperimentResult:
    report: EvalReport
    assignment: ClusterAssignment
    models: dict[int, NPModel]
    histories: dict[int, TrainHistory]


def run_experiment(case_id: str, dataset: Dataset, cluster_config: Optional[Mapping] = None,
                   config: Optional[NPConfig] = None, seed: int = 0, out_dir: Optional[str | Path] = None,
                   mode: str = "mean", topology_ids: Optional[Sequence[int]] = None) -> ExperimentResult:
    """Train one model (case1) or one per cluster (case2) and score every topology.

    Checkpoints and the report are written under ``out_dir`` when given.
    """
    ids = sorted(topology_ids) if topology_ids is not None else sorted(dataset.topologies)
    if not ids:
        raise EvaluationError("no topologies to evaluate")
    for tid in ids:
        if len(dataset.topologies[tid].xi_test) == 0:
            raise EvaluationError(f"topology {tid} has no held-out rows")
    if case_id == "case1":
        assignment = ClusterAssignment({t: 1 for t in ids}, "manual", {"case": "case1"})
    elif case_id == "case2":
        assignment = assign_clusters(cluster_config or reference_config(), ids)
    else:
        raise EvaluationError(f"unknown experiment {case_id!r}; expected case1 or case2")
    cfg = config or NPConfig(dataset.x_dim, dataset.y_dim)
    models, histories, rows = {}, {}, []
    for cid, members in assignment.clusters.items():
        model = NPModel(cfg, seed=seed)
        model, hist = train(model, dataset, cfg, seed=seed, topology_ids=members)
        models[cid], histories[cid] = model, hist
        for tid in members:
            rows.append(evaluate_topology(model, dataset, tid, seed, mode=mode, cluster=cid))
    rows.sort(key=lambda r: r.topology_id)
    report = EvalReport(case_id, seed, rows, {c: h.seconds / 60.0 for c, h in histories.items()},
                        {"case_hash": dataset.case_hash, "dataset_seed": dataset.seed, "epochs": cfg.epochs,
                         "batches_per_epoch": cfg.batches_per_epoch, "mode": mode,
                         "clusters": {str(k): v for k, v in assignment.clusters.items()}})
    if out_dir is not None:
        out = Path(out_dir)
        for cid, model in models.items():
            save_checkpoint(model, out / "checkpoints" / f"{case_id}_seed{seed}_cluster{cid}.json", histories[cid])
        (out / "checkpoints" / f"{case_id}_seed{seed}_clusters.json").write_text(assignment.to_json())
        write_report(report, out / "reports" / f"{case_id}_seed{seed}")
    return ExperimentResult(report, assignment, models, histories)


def write_report(report: EvalReport, stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    md = stem.with_suffix(".md")
    js = stem.with_suffix(".json")
    md.write_text(report.to_markdown())
    js.write_text(report.to_json())
    return md, js


# --------------------------------------------------------------------- histograms

@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    csv_path: Optional[Path] = None
    svg_path: Optional[Path] = None


def histogram(values, bins: int = 30) -> Histogram:
    vals = np.asarray(values, dtype=float).ravel()
    if vals.size == 0:
        raise EvaluationError("histogram needs at least one value")
    if bins < 1:
        raise EvaluationError("bins must be positive")
    counts, edges = np.histogram(vals, bins=bins)
    return Histogram(edges, counts, float(vals.mean()))


def export_histogram(values, bins: int = 30, stem: str | Path = "histogram",
                     title: str = "", xlabel: str = "L1-relative error (%)") -> Histogram:
    """Write ``<stem>.csv`` (bin_lo, bin_hi, count), ``<stem>.json`` and ``<stem>.svg``."""
    h = histogram(values, bins)
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path = stem.with_suffix(".csv")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    stem.with_suffix(".json").write_text(json.dumps(
        {"edges": h.edges.tolist(), "counts": h.counts.tolist(), "mean": h.mean}, indent=2))
    svg_path = stem.with_suffix(".svg")
    _plot_histogram(h, svg_path, title, xlabel)
    return Histogram(h.edges, h.counts, h.mean, csv_path, svg_path)


def _plot_histogram(h: Histogram, path: Path, title: str, xlabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(h.edges[:-1], h.counts, width=np.diff(h.edges), align="edge", color="#4c72b0", edgecolor="white")
    ax.axvline(h.mean, color="#c44e52", linestyle="--", label=f"mean = {h.mean:.3f}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "gridnp"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
