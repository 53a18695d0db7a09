"""Command-line entry point: ``gridnp <command> [options]``.

Settings resolve as command-line flag, then ``GRIDNP_SEED`` (seed only), then
the ``--config`` JSON file, then the defaults of :class:`RunConfig`.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .clustering import ClusterAssignment, load_cluster_config, reference_config, severity_rank
from .evaluation import EvalReport, evaluate_topology, export_histogram, run_experiment, write_report
from .grid_model import CaseError, enumerate_n1, load_case
from .np_model import NPConfig, load_checkpoint, predict, sample_context
from .scenario import Dataset, DatasetError, generate_dataset, load_dataset, save_dataset, study_for


class CLIError(RuntimeError):
    pass


@dataclass
class RunConfig:
    case: str = "case9"
    seed: int = 0
    n_train: int = 2000
    n_test: int = 1000
    epochs: int = 1000
    batches_per_epoch: int = 50
    n_context: int = 30
    n_target: int = 30
    batch: int = 4
    lr: float = 3e-4
    r_dim: int = 32
    z_dim: int = 32
    hidden: int = 32
    mode: str = "case1"
    clusters: Optional[str] = None
    out: str = "runs"

    def np_config(self, x_dim: int, y_dim: int) -> NPConfig:
        return NPConfig(x_dim, y_dim, r_dim=self.r_dim, z_dim=self.z_dim, hidden=self.hidden,
                        n_context=self.n_context, n_target=self.n_target, batch=self.batch,
                        lr=self.lr, epochs=self.epochs, batches_per_epoch=self.batches_per_epoch)

    @property
    def case_stem(self) -> str:
        return Path(self.case).name.split(".")[0]

    @property
    def dataset_dir(self) -> Path:
        return Path(self.out) / "datasets" / f"{self.case_stem}_seed{self.seed}_n{self.n_train}_t{self.n_test}"

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.out) / "checkpoints"

    @property
    def report_dir(self) -> Path:
        return Path(self.out) / "reports"

    @property
    def plot_dir(self) -> Path:
        return Path(self.out) / "plots"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def resolve_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise CLIError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CLIError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        unknown = sorted(set(doc) - set(_FIELDS))
        if unknown:
            raise CLIError(f"{path}: unknown config keys {unknown}")
        values.update(doc)
    env = environ.get("GRIDNP_SEED")
    if env not in (None, ""):
        try:
            values["seed"] = int(env)
        except ValueError:
            raise CLIError(f"GRIDNP_SEED must be an integer, got {env!r}") from None
    for name in _FIELDS:
        got = getattr(args, name, None)
        if got is not None:
            values[name] = got
    cfg = RunConfig(**values)
    for name in ("n_train", "n_test", "epochs", "batches_per_epoch", "n_context", "n_target", "batch"):
        if getattr(cfg, name) <= 0 and not (name == "epochs" and cfg.epochs == 0):
            raise CLIError(f"{name.replace('_', '-')} must be positive, got {getattr(cfg, name)}")
    if cfg.mode not in ("case1", "case2"):
        raise CLIError(f"mode must be case1 or case2, got {cfg.mode!r}")
    return cfg


# --------------------------------------------------------------------- helpers

def _dataset(cfg: RunConfig, generate: bool = True) -> Dataset:
    case = load_case(cfg.case)
    path = cfg.dataset_dir
    if (path / "manifest.json").exists():
        ds = load_dataset(path)
        if ds.case_hash != case.fingerprint():
            raise CLIError(f"{path} was generated from a different case file")
        return ds
    if not generate:
        raise CLIError(f"no dataset at {path}; run gen-data first")
    ds = generate_dataset(study_for(case), enumerate_n1(case), cfg.n_train, cfg.seed, cfg.n_test)
    save_dataset(ds, path)
    return ds


def _cluster_config(cfg: RunConfig) -> dict:
    return load_cluster_config(cfg.clusters) if cfg.clusters else reference_config()


def _stem(cfg: RunConfig) -> str:
    return f"{cfg.mode}_seed{cfg.seed}"


def _emit(doc, as_json: bool, text: str) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True) if as_json else text)


# --------------------------------------------------------------------- commands

def cmd_enumerate(args, cfg: RunConfig) -> int:
    case = load_case(cfg.case)
    topos = enumerate_n1(case)
    rows = [{"topology": t.id, "outage_branch": t.outage, "description": t.describe(case)} for t in topos]
    text = "\n".join([f"{case.name}: {len(topos)} feasible topologies", "Topology | Description"]
                     + [f"{r['topology']:>8} | {r['description']}" for r in rows])
    _emit({"case": case.name, "count": len(topos), "topologies": rows}, args.json, text)
    return 0


def cmd_gen_data(args, cfg: RunConfig) -> int:
    if (cfg.dataset_dir / "manifest.json").exists() and not args.force:
        print(f"dataset exists: {cfg.dataset_dir} (use --force to regenerate)")
        return 0
    case = load_case(cfg.case)
    ds = generate_dataset(study_for(case), enumerate_n1(case), cfg.n_train, cfg.seed, cfg.n_test)
    path = save_dataset(ds, cfg.dataset_dir)
    dropped = sum(td.dropped for td in ds.topologies.values())
    print(f"wrote {path} ({len(ds.topologies)} topologies, {cfg.n_train}+{cfg.n_test} rows each, "
          f"{dropped} non-convergent draws replaced)")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    res = run_experiment(cfg.mode, ds, _cluster_config(cfg), cfg.np_config(ds.x_dim, ds.y_dim),
                         cfg.seed, cfg.out)
    for cid in res.models:
        print(f"checkpoint {cfg.checkpoint_dir / f'{_stem(cfg)}_cluster{cid}.json'}")
    print(res.report.to_markdown())
    return 0


def _load_models(cfg: RunConfig):
    mapping_path = cfg.checkpoint_dir / f"{_stem(cfg)}_clusters.json"
    if not mapping_path.exists():
        raise CLIError(f"no checkpoint for {_stem(cfg)} under {cfg.checkpoint_dir}; run train first")
    assignment = ClusterAssignment.from_json(mapping_path.read_text())
    models = {}
    for cid in assignment.clusters:
        models[cid] = load_checkpoint(cfg.checkpoint_dir / f"{_stem(cfg)}_cluster{cid}.json")
    return assignment, models


def cmd_eval(args, cfg: RunConfig) -> int:
    assignment, models = _load_models(cfg)
    ds = _dataset(cfg, generate=False)
    rows = []
    for cid, members in assignment.clusters.items():
        for tid in members:
            rows.append(evaluate_topology(models[cid], ds, tid, cfg.seed, mode=args.predict_mode, cluster=cid))
    rows.sort(key=lambda r: r.topology_id)
    minutes = {}
    for cid in assignment.clusters:
        doc = json.loads((cfg.checkpoint_dir / f"{_stem(cfg)}_cluster{cid}.json").read_text())
        minutes[cid] = doc.get("history", {}).get("seconds", 0.0) / 60.0
    report = EvalReport(cfg.mode, cfg.seed, rows, minutes, {"mode": args.predict_mode})
    md, js = write_report(report, cfg.report_dir / _stem(cfg))
    print(report.to_markdown())
    print(f"wrote {md} and {js}")
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    assignment, models = _load_models(cfg)
    if args.topology not in assignment.mapping:
        raise CLIError(f"topology {args.topology} is not covered by the trained models")
    ds = _dataset(cfg, generate=False)
    td = ds.topologies[args.topology]
    split_xi, split_v = (td.xi_test, td.v_test) if args.split == "test" else (td.xi_train, td.v_train)
    if not 0 <= args.row < len(split_xi):
        raise CLIError(f"row {args.row} out of range for {len(split_xi)} {args.split} rows")
    model = models[assignment.mapping[args.topology]]
    xc, vc = sample_context(ds, args.topology, model.config.n_context,
                            np.random.SeedSequence([cfg.seed, args.topology, 3]))
    mu, sigma = predict(model, args.topology, xc, vc, split_xi[args.row:args.row + 1],
                        mode=args.predict_mode, rng=np.random.default_rng(cfg.seed))
    doc = {"topology": args.topology, "split": args.split, "row": args.row,
           "buses": ds.output_labels, "xi": split_xi[args.row].tolist(),
           "v_mean": mu[0].tolist(), "v_sigma": sigma[0].tolist(), "v_mcs": split_v[args.row].tolist()}
    text = "\n".join(["bus | mean | sigma | mcs"] + [f"{b:>3} | {m:.6f} | {s:.6f} | {t:.6f}" for b, m, s, t
                                                    in zip(ds.output_labels, mu[0], sigma[0], split_v[args.row])])
    _emit(doc, args.json, text)
    return 0


def cmd_rank_severity(args, cfg: RunConfig) -> int:
    case = load_case(cfg.case)
    report = severity_rank(case, enumerate_n1(case))
    out = cfg.report_dir / f"severity_{cfg.case_stem}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2))
    _emit(report.to_dict(), args.json, report.to_markdown() + f"\nwrote {out}")
    return 0


def cmd_export_plots(args, cfg: RunConfig) -> int:
    path = cfg.report_dir / f"{_stem(cfg)}.json"
    if not path.exists():
        raise CLIError(f"no report at {path}; run train or eval first")
    report = EvalReport.from_dict(json.loads(path.read_text()))
    for row in report.rows:
        if not row.l1_values:
            raise CLIError(f"{path} has no per-scenario values for topology {row.topology_id}")
        h = export_histogram(row.l1_values, args.bins, cfg.plot_dir / f"{_stem(cfg)}_topology{row.topology_id}",
                             title=f"Topology {row.topology_id}, {cfg.mode}")
        print(f"topology {row.topology_id}: mean %L1 {h.mean:.4f} -> {h.svg_path}")
    return 0


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    g = common.add_argument_group("common options")
    g.add_argument("--case", help="bundled case name (case9, case118) or path to a .json/.m case file")
    g.add_argument("--case9", dest="case", action="store_const", const="case9", help="shorthand for --case case9")
    g.add_argument("--seed", type=int, help="master seed (overrides GRIDNP_SEED and the config file)")
    g.add_argument("--config", help="JSON run configuration; flags take precedence")
    g.add_argument("--out", help="output root holding datasets/, checkpoints/, reports/, plots/ (default runs)")
    g.add_argument("--n-train", dest="n_train", type=int, help="training rows per topology (default 2000)")
    g.add_argument("--n-test", dest="n_test", type=int, help="held-out rows per topology (default 1000)")
    g.add_argument("--epochs", type=int, help="training epochs (default 1000)")
    g.add_argument("--batches-per-epoch", dest="batches_per_epoch", type=int,
                   help="optimizer steps per epoch (default 50)")
    g.add_argument("--mode", choices=["case1", "case2"], help="one model for all topologies, or one per cluster")
    g.add_argument("--clusters", help="cluster config JSON {method, thresholds | manual} for case2")
    g.add_argument("--json", action="store_true", help="machine-readable output on stdout")

    p = argparse.ArgumentParser(prog="gridnp", allow_abbrev=False,
                                description="Neural Process surrogate for probabilistic power flow over N-1 topologies.")
    p.add_argument("--version", action="version", version=f"gridnp {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    sub.add_parser("enumerate", parents=[common], help="list feasible N-1 topologies", allow_abbrev=False)
    s = sub.add_parser("gen-data", parents=[common], help="Monte Carlo power-flow dataset", allow_abbrev=False)
    s.add_argument("--force", action="store_true", help="regenerate an existing dataset")
    sub.add_parser("train", parents=[common], help="train and score models, writing checkpoints and a report",
                   allow_abbrev=False)
    for name, helptext in (("eval", "score saved checkpoints on held-out rows"),
                           ("predict", "predict voltages for one dataset row")):
        s = sub.add_parser(name, parents=[common], help=helptext, allow_abbrev=False)
        s.add_argument("--predict-mode", dest="predict_mode", default="mean",
                       help="'mean' (latent mean) or 'mc:S' (S latent samples)")
        if name == "predict":
            s.add_argument("--topology", type=int, required=True, help="topology id")
            s.add_argument("--row", type=int, default=0, help="row index within the split")
            s.add_argument("--split", choices=["test", "train"], default="test")
    sub.add_parser("rank-severity", parents=[common], help="rank topologies by voltage deviation",
                   allow_abbrev=False)
    s = sub.add_parser("export-plots", parents=[common], help="%%L1 histograms from a saved report",
                       allow_abbrev=False)
    s.add_argument("--bins", type=int, default=30, help="histogram bins (default 30)")
    return p


COMMANDS = {
    "enumerate": cmd_enumerate,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "rank-severity": cmd_rank_severity,
    "export-plots": cmd_export_plots,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (CLIError, CaseError, DatasetError, FileNotFoundError, ValueError, KeyError, RuntimeError) as exc:
        print(f"gridnp {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
