import json

import pytest

from conftest import two_bus
from gridnp.cli import build_parser, main, resolve_config
from gridnp.grid_model import to_json

SMALL = ["--n-train", "40", "--n-test", "10", "--epochs", "1", "--batches-per-epoch", "2"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_enumerate_case9(capsys):
    code, out, _ = run(capsys, "enumerate", "--case9", "--json")
    doc = json.loads(out)
    assert code == 0 and doc["count"] == 7
    assert [r["topology"] for r in doc["topologies"]] == list(range(1, 8))


def test_enumerate_two_bus_file(capsys, tmp_path):
    path = tmp_path / "two.json"
    path.write_text(to_json(two_bus()))
    code, out, _ = run(capsys, "enumerate", "--case", str(path))
    assert code == 0 and "1 feasible topologies" in out


def test_bad_case_file(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{")
    code, _, err = run(capsys, "enumerate", "--case", str(path))
    assert code == 2 and "error" in err


def test_gen_data_reproducible(capsys, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "gen-data", "--case9", "--seed", "3", "--out", str(a), *SMALL[:4])[0] == 0
    assert run(capsys, "gen-data", "--case9", "--seed", "3", "--out", str(b), *SMALL[:4])[0] == 0
    da = next((a / "datasets").iterdir())
    db = b / "datasets" / da.name
    names = sorted(p.name for p in da.iterdir())
    assert "manifest.json" in names and len(names) == 8
    for n in names:
        assert (da / n).read_bytes() == (db / n).read_bytes()


def test_zero_rows_rejected(capsys, tmp_path):
    code, _, err = run(capsys, "gen-data", "--case9", "--n-train", "0", "--out", str(tmp_path))
    assert code == 2 and "n-train" in err


def test_train_eval_predict_pipeline(capsys, tmp_path):
    out = str(tmp_path)
    code, text, _ = run(capsys, "train", "--case9", "--mode", "case1", "--out", out, *SMALL)
    assert code == 0 and "| 7 |" in text
    assert (tmp_path / "checkpoints" / "case1_seed0_cluster1.json").exists()
    report = (tmp_path / "reports" / "case1_seed0.json").read_text()

    code, _, _ = run(capsys, "eval", "--case9", "--mode", "case1", "--out", out, *SMALL)
    assert code == 0
    again = json.loads((tmp_path / "reports" / "case1_seed0.json").read_text())
    assert [r["l1"] for r in again["rows"]] == [r["l1"] for r in json.loads(report)["rows"]]

    code, text, _ = run(capsys, "predict", "--case9", "--out", out, "--topology", "7", "--row", "3",
                        "--json", *SMALL)
    doc = json.loads(text)
    assert code == 0 and doc["buses"] == [4, 5, 6, 7, 8, 9] and len(doc["v_mean"]) == 6
    code, _, err = run(capsys, "predict", "--case9", "--out", out, "--topology", "7", "--row", "99", *SMALL)
    assert code == 2 and "out of range" in err

    code, text, _ = run(capsys, "export-plots", "--case9", "--out", out, "--bins", "5", *SMALL)
    assert code == 0 and (tmp_path / "plots" / "case1_seed0_topology7.svg").exists()


def test_case2_with_cluster_file(capsys, tmp_path):
    clusters = tmp_path / "clusters.json"
    clusters.write_text(json.dumps({"method": "manual", "manual": {"2": 1, "3": 1, "4": 1, "5": 1,
                                                                    "6": 1, "7": 2}}))
    code, _, _ = run(capsys, "train", "--case9", "--mode", "case2", "--clusters", str(clusters),
                     "--out", str(tmp_path), *SMALL)
    assert code == 0
    mapping = json.loads((tmp_path / "checkpoints" / "case2_seed0_clusters.json").read_text())
    assert mapping["mapping"]["7"] == 2 and mapping["mapping"]["1"] == 1


def test_eval_without_checkpoint(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--case9", "--out", str(tmp_path), *SMALL)
    assert code == 2 and "no checkpoint" in err


def test_rank_severity(capsys, tmp_path):
    code, text, _ = run(capsys, "rank-severity", "--case9", "--out", str(tmp_path), "--json")
    assert code == 0 and json.loads(text)["topologies"][0]["topology_id"] == 7
    assert (tmp_path / "reports" / "severity_case9.json").exists()


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["enumerate", "--case9", "--bogus"])
    assert exc.value.code != 0
    with pytest.raises(SystemExit):
        main(["train", "--epoch", "3"])  # no abbreviations


def test_help_lists_every_flag(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    text = capsys.readouterr().out
    for flag in ("--case", "--seed", "--config", "--n-train", "--n-test", "--epochs", "--clusters",
                 "--mode", "--out"):
        assert flag in text


def test_seed_precedence(tmp_path):
    cfg_file = tmp_path / "run.json"
    cfg_file.write_text(json.dumps({"seed": 4, "epochs": 7}))
    parser = build_parser()
    args = parser.parse_args(["train", "--config", str(cfg_file)])
    assert resolve_config(args, {}).seed == 4
    assert resolve_config(args, {"GRIDNP_SEED": "9"}).seed == 9
    args = parser.parse_args(["train", "--config", str(cfg_file), "--seed", "2"])
    cfg = resolve_config(args, {"GRIDNP_SEED": "9"})
    assert cfg.seed == 2 and cfg.epochs == 7


def test_config_unknown_key(capsys, tmp_path):
    cfg_file = tmp_path / "run.json"
    cfg_file.write_text(json.dumps({"learning_rate": 1}))
    code, _, err = run(capsys, "enumerate", "--config", str(cfg_file))
    assert code == 2 and "unknown config keys" in err


def test_defaults_follow_reference_protocol():
    cfg = resolve_config(build_parser().parse_args(["train"]), {})
    assert (cfg.n_train, cfg.n_test, cfg.epochs, cfg.n_context, cfg.n_target, cfg.batch, cfg.lr) == \
        (2000, 1000, 1000, 30, 30, 4, 3e-4)
