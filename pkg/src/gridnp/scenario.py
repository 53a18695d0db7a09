"""Uncertain injections, Monte Carlo labelling and episode assembly.

Each topology gets its own sample of load (and PV) scenarios, labelled by
Newton-Raphson, split into training and held-out rows, and its own standard
scaler. Episodes for meta-training are drawn from one topology at a time and
expressed in that topology's normalised coordinates.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from functools import cached_property
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .grid_model import Bus, NetworkCase, Topology, build_admittance, is_connected
from .powerflow import InjectionVector, NewtonSolver, SolverOptions, nominal_injection

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


class DatasetError(RuntimeError):
    pass


def env_seed(default: Optional[int]) -> Optional[int]:
    """``GRIDNP_SEED`` overrides a configured seed when set."""
    raw = os.environ.get("GRIDNP_SEED")
    return int(raw) if raw not in (None, "") else default


# --------------------------------------------------------------------- uncertainty models

@dataclass(frozen=True)
class LoadModel:
    """Equicorrelated Gaussian load levels.

    ``mode="level"`` draws the active load of every load bus in per-unit;
    ``mode="multiplier"`` draws a factor applied to the nominal load. Reactive
    load follows at the bus's nominal power factor either way.
    """

    mean: float | Sequence[float] = 0.9
    std: float | Sequence[float] = 0.05
    rho: float = 0.5
    mode: str = "level"

    def __post_init__(self):
        if np.any(np.asarray(self.std) < 0):
            raise ValueError("std must be non-negative")
        if self.mode not in ("level", "multiplier"):
            raise ValueError(f"unknown load mode {self.mode!r}")


@dataclass(frozen=True)
class PVModel:
    alpha: float
    beta: float
    capacity: tuple[float, ...]
    bus_ids: tuple[int, ...]

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("Beta shape parameters must be positive")
        if len(self.capacity) != len(self.bus_ids):
            raise ValueError("one capacity per PV bus")


def correlation_factor(d: int, rho: float) -> np.ndarray:
    """Lower factor L with L @ L.T equal to the equicorrelation matrix."""
    corr = np.full((d, d), rho)
    np.fill_diagonal(corr, 1.0)
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        w, u = np.linalg.eigh(corr)
        if w.min() < -1e-12:
            raise ValueError(f"correlation {rho} is not positive semidefinite for d={d}") from None
        # rank-deficient boundary (rho = 1 or rho = -1/(d-1))
        return u * np.sqrt(np.clip(w, 0.0, None))


def sample_loads(model: LoadModel, n: int, seed, d: Optional[int] = None) -> np.ndarray:
    """Draw ``n`` rows of correlated load levels (one column per load bus)."""
    if n <= 0:
        raise ValueError("n must be positive")
    mean = np.asarray(model.mean, dtype=float)
    std = np.asarray(model.std, dtype=float)
    if d is None:
        d = max(mean.size, std.size)
    mean = np.broadcast_to(mean, (d,))
    std = np.broadcast_to(std, (d,))
    factor = correlation_factor(d, model.rho)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, d))
    return mean + (eps @ factor.T) * std


def sample_pv(model: PVModel, n: int, seed) -> np.ndarray:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    draws = rng.beta(model.alpha, model.beta, size=(n, len(model.bus_ids)))
    return draws * np.asarray(model.capacity, dtype=float)


def convert_generators_to_pv(case: NetworkCase, bus_ids: Sequence[int], alpha: float = 2.06,
                             beta: float = 2.5) -> tuple[NetworkCase, PVModel]:
    """Replace the generators at ``bus_ids`` by PV farms rated at their ``p_max``.

    The farm output enters as a real-power injection; a bus left without a
    generator becomes PQ.
    """
    wanted = set(bus_ids)
    missing = wanted - {g.bus for g in case.generators}
    if missing:
        raise ValueError(f"no generator at buses {sorted(missing)}")
    capacity = {b: 0.0 for b in bus_ids}
    kept = []
    for g in case.generators:
        if g.bus in wanted:
            capacity[g.bus] += g.p_max
        else:
            kept.append(g)
    regulated = {g.bus for g in kept if g.status}
    buses = []
    for b in case.buses:
        if b.id in wanted and b.kind == "pv" and b.id not in regulated:
            b = dataclasses.replace(b, kind="pq", v_setpoint=None)
        buses.append(b)
    new_case = dataclasses.replace(case, buses=tuple(buses), generators=tuple(kept))
    pv = PVModel(alpha, beta, tuple(capacity[b] for b in bus_ids), tuple(bus_ids))
    return new_case, pv


# --------------------------------------------------------------------- study setup

@dataclass(frozen=True)
class Study:
    """A case plus its uncertainty models; maps sampled rows to injections."""

    case: NetworkCase
    load_model: LoadModel
    pv_model: Optional[PVModel] = None

    @cached_property
    def load_idx(self) -> np.ndarray:
        return self.case.load_buses

    @cached_property
    def output_idx(self) -> np.ndarray:
        return self.case.pq

    @property
    def input_labels(self) -> list[str]:
        ids = [self.case.buses[i].id for i in self.load_idx]
        labels = [f"P{i}" for i in ids] + [f"Q{i}" for i in ids]
        if self.pv_model is not None:
            labels += [f"PV{i}" for i in self.pv_model.bus_ids]
        return labels

    @property
    def output_labels(self) -> list[int]:
        return [self.case.buses[i].id for i in self.output_idx]

    def load_powers(self, draws: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Active and reactive load per load bus for sampled rows."""
        buses: list[Bus] = [self.case.buses[i] for i in self.load_idx]
        p_nom = np.array([b.p_load for b in buses])
        q_nom = np.array([b.q_load for b in buses])
        if self.load_model.mode == "multiplier":
            return draws * p_nom, draws * q_nom
        if np.any(p_nom <= 0):
            raise ValueError("level mode needs a positive nominal active load at every load bus")
        return draws, draws * (q_nom / p_nom)

    def features(self, draws: np.ndarray, pv: Optional[np.ndarray] = None) -> np.ndarray:
        p, q = self.load_powers(np.atleast_2d(draws))
        parts = [p, q]
        if self.pv_model is not None:
            parts.append(np.atleast_2d(pv))
        return np.hstack(parts)

    @cached_property
    def _injection_parts(self):
        # injections with every load bus unloaded, plus PV bus positions
        base = nominal_injection(self.case)
        idx = self.load_idx
        p = base.p.copy()
        q = base.q.copy()
        p[idx] += [self.case.buses[i].p_load for i in idx]
        q[idx] += [self.case.buses[i].q_load for i in idx]
        pv_idx = np.array([], dtype=np.intp)
        if self.pv_model is not None:
            bidx = self.case.bus_index
            pv_idx = np.array([bidx[b] for b in self.pv_model.bus_ids], dtype=np.intp)
        return p, q, pv_idx

    def injection(self, xi_row: np.ndarray) -> InjectionVector:
        """Net bus injection for one feature row ``[P loads, Q loads, PV]``."""
        p0, q0, pv_idx = self._injection_parts
        idx = self.load_idx
        d = len(idx)
        p = p0.copy()
        q = q0.copy()
        p[idx] -= xi_row[:d]
        q[idx] -= xi_row[d:2 * d]
        if len(pv_idx):
            np.add.at(p, pv_idx, xi_row[2 * d:2 * d + len(pv_idx)])
        return InjectionVector(p, q)

    def mean_features(self) -> np.ndarray:
        d = len(self.load_idx)
        draws = np.broadcast_to(np.asarray(self.load_model.mean, dtype=float), (d,))
        pv = None
        if self.pv_model is not None:
            pv = np.asarray(self.pv_model.capacity) * self.pv_model.alpha / (
                self.pv_model.alpha + self.pv_model.beta)
        return self.features(draws, pv)[0]

    def sample_features(self, n: int, seed) -> np.ndarray:
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        load_seed, pv_seed = ss.spawn(2)
        draws = sample_loads(self.load_model, n, load_seed, d=len(self.load_idx))
        pv = sample_pv(self.pv_model, n, pv_seed) if self.pv_model is not None else None
        return self.features(draws, pv)


def default_study(case: NetworkCase) -> Study:
    """The load/PV setup used for the bundled cases.

    Small cases (every load bus loaded) use per-unit levels; larger cases with
    unequal bus loads use multipliers, because a flat per-unit level there
    would more than double the system load.
    """
    loads = [case.buses[i].p_load for i in case.load_buses]
    mode = "level" if len(loads) <= 10 and all(p > 0 for p in loads) else "multiplier"
    return Study(case, LoadModel(0.9, 0.05, 0.5, mode))


PV_FARM_BUSES_118 = (10, 25, 27, 61, 62, 100)


def study_case118(case: NetworkCase) -> Study:
    pv_case, pv = convert_generators_to_pv(case, PV_FARM_BUSES_118)
    return Study(pv_case, LoadModel(0.9, 0.05, 0.5, "multiplier"), pv)


# --------------------------------------------------------------------- scaling

@dataclass
class Scaler:
    xi_mean: np.ndarray
    xi_std: np.ndarray
    v_mean: np.ndarray
    v_std: np.ndarray

    @classmethod
    def fit(cls, xi: np.ndarray, v: np.ndarray) -> "Scaler":
        return cls(xi.mean(axis=0), np.maximum(xi.std(axis=0), STD_FLOOR),
                   v.mean(axis=0), np.maximum(v.std(axis=0), STD_FLOOR))

    def _check(self, values, mean):
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != mean.shape[-1]:
            raise ValueError(f"expected {mean.shape[-1]} features, got {values.shape[-1]}")
        return values

    def transform_xi(self, xi):
        return (self._check(xi, self.xi_mean) - self.xi_mean) / self.xi_std

    def inverse_xi(self, z):
        return self._check(z, self.xi_mean) * self.xi_std + self.xi_mean

    def transform_v(self, v):
        return (self._check(v, self.v_mean) - self.v_mean) / self.v_std

    def inverse_v(self, z):
        return self._check(z, self.v_mean) * self.v_std + self.v_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("xi_mean", "xi_std", "v_mean", "v_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("xi_mean", "xi_std", "v_mean", "v_std")))


def scaler_roundtrip(scaler: Scaler, values, which: str = "xi") -> np.ndarray:
    if which == "xi":
        return scaler.inverse_xi(scaler.transform_xi(values))
    return scaler.inverse_v(scaler.transform_v(values))


# --------------------------------------------------------------------- dataset

@dataclass
class TopologyData:
    topology: Topology
    xi_train: np.ndarray
    v_train: np.ndarray
    xi_test: np.ndarray
    v_test: np.ndarray
    scaler: Scaler
    dropped: int = 0

    @property
    def id(self) -> int:
        return self.topology.id


@dataclass
class Dataset:
    case_hash: str
    seed: int
    n_train: int
    n_test: int
    topologies: dict[int, TopologyData]
    input_labels: list[str] = field(default_factory=list)
    output_labels: list[int] = field(default_factory=list)

    @property
    def x_dim(self) -> int:
        return next(iter(self.topologies.values())).xi_train.shape[1]

    @property
    def y_dim(self) -> int:
        return next(iter(self.topologies.values())).v_train.shape[1]

    @property
    def scalers(self) -> dict[int, Scaler]:
        return {tid: td.scaler for tid, td in self.topologies.items()}

    def subset(self, ids: Sequence[int]) -> "Dataset":
        return dataclasses.replace(self, topologies={i: self.topologies[i] for i in ids})


def _label_rows(solver: NewtonSolver, study: Study, xi: np.ndarray, warm,
                opts: SolverOptions) -> tuple[np.ndarray, np.ndarray]:
    out = study.output_idx
    volts = np.full((len(xi), len(out)), np.nan)
    ok = np.zeros(len(xi), dtype=bool)
    for i, row in enumerate(xi):
        inj = study.injection(row)
        sol = solver.solve(inj, SolverOptions(opts.tolerance, opts.max_iter, False, warm))
        if not sol.converged:
            sol = solver.solve(inj, SolverOptions(opts.tolerance, opts.max_iter, True))
        if sol.converged:
            ok[i] = True
            volts[i] = sol.v_mag[out]
    return ok, volts


def generate_topology_data(study: Study, topo: Topology, n_train: int, n_test: int, seed: int,
                           opts: Optional[SolverOptions] = None) -> TopologyData:
    if not is_connected(study.case, topo):
        raise DatasetError(f"topology {topo.id} islands a bus")
    opts = opts or SolverOptions()
    solver = NewtonSolver(study.case, build_admittance(study.case, topo))
    ref = solver.solve(study.injection(study.mean_features()), opts)
    warm = (ref.v_mag, ref.v_ang) if ref.converged else None
    need = n_train + n_test
    rows_xi, rows_v = [], []
    attempts = failures = 0
    ss = np.random.SeedSequence([seed, topo.id])
    while sum(len(r) for r in rows_xi) < need:
        missing = need - sum(len(r) for r in rows_xi)
        xi = study.sample_features(missing, ss.spawn(1)[0])
        ok, volts = _label_rows(solver, study, xi, warm, opts)
        attempts += len(xi)
        failures += int((~ok).sum())
        if failures > 0.5 * attempts:
            raise DatasetError(
                f"topology {topo.id}: {failures} of {attempts} scenarios failed to converge")
        rows_xi.append(xi[ok])
        rows_v.append(volts[ok])
    xi = np.vstack(rows_xi)[:need]
    v = np.vstack(rows_v)[:need]
    if failures:
        log.info("topology %d: resampled %d non-converged scenarios", topo.id, failures)
    return TopologyData(topo, xi[:n_train], v[:n_train], xi[n_train:], v[n_train:],
                        Scaler.fit(xi[:n_train], v[:n_train]), failures)


def generate_dataset(study: Study, topologies: Sequence[Topology], n_per_topology: int = 2000,
                     seed: int = 0, n_test: int = 1000,
                     opts: Optional[SolverOptions] = None) -> Dataset:
    """Monte Carlo labelled scenarios for every topology.

    Each topology draws from its own seed stream ``(seed, topology id)`` so
    the rows of one topology do not depend on which others are requested.
    """
    if n_per_topology <= 0:
        raise ValueError("n_per_topology must be positive")
    data = {t.id: generate_topology_data(study, t, n_per_topology, n_test, seed, opts)
            for t in topologies}
    return Dataset(study.case.fingerprint(), seed, n_per_topology, n_test, data,
                   study.input_labels, study.output_labels)


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    """One JSON-lines file per topology plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for tid, td in ds.topologies.items():
        name = f"topology_{tid}.jsonl"
        files[str(tid)] = name
        with open(directory / name, "w") as fh:
            for split, xi, v in (("train", td.xi_train, td.v_train), ("test", td.xi_test, td.v_test)):
                for a, b in zip(xi, v):
                    fh.write(json.dumps({"topology_id": tid, "split": split,
                                         "xi": a.tolist(), "v": b.tolist()}) + "\n")
    manifest = {
        "case_hash": ds.case_hash,
        "seed": ds.seed,
        "n": ds.n_train,
        "n_test": ds.n_test,
        "input_labels": ds.input_labels,
        "output_labels": ds.output_labels,
        "files": files,
        "topologies": {
            str(tid): {"status_vector": list(td.topology.status_vector),
                       "outage": td.topology.outage, "dropped": td.dropped}
            for tid, td in ds.topologies.items()
        },
        "scalers": {str(tid): td.scaler.to_dict() for tid, td in ds.topologies.items()},
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    topologies = {}
    for key, fname in manifest["files"].items():
        tid = int(key)
        rows = {"train": ([], []), "test": ([], [])}
        with open(directory / fname) as fh:
            for line in fh:
                rec = json.loads(line)
                rows[rec.get("split", "train")][0].append(rec["xi"])
                rows[rec.get("split", "train")][1].append(rec["v"])
        meta = manifest["topologies"][key]
        topo = Topology(tid, tuple(meta["status_vector"]), meta["outage"])
        x_dim = len(manifest["input_labels"])
        y_dim = len(manifest["output_labels"])

        def arr(a, width):
            return np.asarray(a, dtype=float).reshape(-1, width)

        topologies[tid] = TopologyData(
            topo, arr(rows["train"][0], x_dim), arr(rows["train"][1], y_dim),
            arr(rows["test"][0], x_dim), arr(rows["test"][1], y_dim),
            Scaler.from_dict(manifest["scalers"][key]), meta.get("dropped", 0))
    return Dataset(manifest["case_hash"], manifest["seed"], manifest["n"], manifest["n_test"],
                   topologies, manifest["input_labels"], manifest["output_labels"])


# --------------------------------------------------------------------- episodes

@dataclass
class Episode:
    topology_id: int
    xi_context: np.ndarray
    v_context: np.ndarray
    xi_target: np.ndarray
    v_target: np.ndarray
    context_idx: np.ndarray
    target_idx: np.ndarray

    def as_batch(self) -> "EpisodeBatch":
        return EpisodeBatch(np.array([self.topology_id]), self.xi_context[None], self.v_context[None],
                            self.xi_target[None], self.v_target[None])


@dataclass
class EpisodeBatch:
    """Stacked episodes; arrays are (batch, points, features)."""

    topology_ids: np.ndarray
    xi_context: np.ndarray
    v_context: np.ndarray
    xi_target: np.ndarray
    v_target: np.ndarray

    def __len__(self):
        return len(self.topology_ids)

    def episode(self, i: int) -> Episode:
        nc = self.xi_context.shape[1]
        nt = self.xi_target.shape[1]
        return Episode(int(self.topology_ids[i]), self.xi_context[i], self.v_context[i],
                       self.xi_target[i], self.v_target[i], np.arange(nc), np.arange(nt))


class _RowCycler:
    """Hands out distinct row indices, reshuffling once every row was used."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.queue = rng.permutation(n)

    def take(self, k: int) -> np.ndarray:
        if k > self.n:
            raise ValueError(f"need {k} distinct rows but only {self.n} exist")
        out = self.queue[:k]
        self.queue = self.queue[k:]
        if len(out) < k:
            fresh = self.rng.permutation(self.n)
            fresh = fresh[~np.isin(fresh, out)]
            extra = k - len(out)
            out = np.concatenate([out, fresh[:extra]])
            self.queue = fresh[extra:]
        return out


def make_episodes(dataset: Dataset, n_context: int = 30, n_target: int = 30, batch: int = 4,
                  seed=0, topology_ids: Optional[Sequence[int]] = None) -> Iterator[EpisodeBatch]:
    """Endless stream of episode batches in normalised coordinates.

    The first ``n_context`` target rows double as the context set.
    """
    if n_context > n_target:
        raise ValueError("n_context must not exceed n_target")
    ids = list(topology_ids) if topology_ids is not None else sorted(dataset.topologies)
    for tid in ids:
        if len(dataset.topologies[tid].xi_train) < n_target:
            raise ValueError(f"topology {tid} has fewer than {n_target} training rows")
    rng = np.random.default_rng(seed)
    scaled = {}
    cyclers = {}
    for tid in ids:
        td = dataset.topologies[tid]
        scaled[tid] = (td.scaler.transform_xi(td.xi_train), td.scaler.transform_v(td.v_train))
        cyclers[tid] = _RowCycler(len(td.xi_train), rng)
    while True:
        picks = rng.integers(len(ids), size=batch)
        tids = np.array([ids[k] for k in picks])
        xs, ys = [], []
        for tid in tids:
            rows = cyclers[tid].take(n_target)
            x, y = scaled[tid]
            xs.append(x[rows])
            ys.append(y[rows])
        xt = np.stack(xs)
        yt = np.stack(ys)
        yield EpisodeBatch(tids, xt[:, :n_context], yt[:, :n_context], xt, yt)


def study_for(case: NetworkCase) -> Study:
    """Study setup by case: PV farms for the 118-bus system, loads only otherwise."""
    if case.name == "case118" and all(b in case.bus_index for b in PV_FARM_BUSES_118):
        return study_case118(case)
    return default_study(case)
