"""End-to-end tests for the command-line front end.

Each test drives ``main(argv)`` in-process and checks exit codes, file
artifacts, and the schema-derived help text.
"""

import csv
import json

import pytest

from igi import canonjson
from igi.cli import RENAMES, _fmt_default, build_parser, main, schema_fields
from igi.experiments import ExperimentPlan, save_plan
from igi.graphdata import load_dataset, save_dataset
from igi.losses import LossConfig
from igi.model import ModelConfig
from igi.synthgen import SynthConfig, gen_dataset

TINY = ["--graphs-per-class", "2", "--nodes-per-graph", "12",
        "--pool-size-per-class", "30"]
TINY_CFG = dict(graphs_per_class=2, nodes_per_graph=12, pool_size_per_class=30)


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_generate_is_deterministic_and_matches_library(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["generate", "--seed", "7", "--out", str(a)] + TINY) == 0
    assert main(["generate", "--seed", "7", "--out", str(b)] + TINY) == 0
    assert read_bytes(a) == read_bytes(b)

    direct = tmp_path / "direct.json"
    save_dataset(gen_dataset(SynthConfig(seed=7, **TINY_CFG)), direct)
    assert read_bytes(a) == read_bytes(direct)


def test_no_hier_flag_drops_graph_relations(tmp_path):
    out = tmp_path / "d.json"
    assert main(["generate", "--seed", "1", "--no-hier", "--out", str(out)] + TINY) == 0
    assert load_dataset(out).hier is False


def test_usage_errors_exit_2(tmp_path):
    assert main(["generate", "--bogus", "1", "--out", "x.json"]) == 2
    assert main([]) == 2
    assert main(["frobnicate"]) == 2


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "generate" in capsys.readouterr().out


def _help_text(capsys, argv):
    assert main(argv) == 0
    return capsys.readouterr().out


def test_generate_help_covers_every_synth_field(capsys):
    text = _help_text(capsys, ["generate", "--help"])
    for name, flag, _, default in schema_fields(SynthConfig):
        assert f"--{flag}" in text, name
        assert _fmt_default(default) in text, name


def test_train_help_covers_model_and_loss_fields(capsys):
    text = _help_text(capsys, ["train", "--help"])
    skip = ("feature_dim", "class_count", "hier_mode")
    for name, flag, _, default in schema_fields(ModelConfig, skip=skip):
        assert f"--{flag}" in text, name
        assert _fmt_default(default) in text, name
    for name, flag, _, default in schema_fields(LossConfig):
        assert f"--{flag}" in text, name
        assert _fmt_default(default) in text, name
    assert "--enhance " in text or "--enhance V" in text  # renamed flag
    assert "--lr" in text


def test_renamed_flags_map_back_to_fields():
    assert RENAMES["enhance_mode"] == "enhance"
    parser = build_parser()
    args = parser.parse_args(["train", "--data", "d", "--out", "c",
                              "--enhance", "all-columns", "--lr", "0.01"])
    assert args.enhance_mode == "all-columns"
    assert args.learning_rate == 0.01


def test_validation_error_exits_1_and_names_key(tmp_path, capsys):
    data = tmp_path / "d.json"
    assert main(["generate", "--seed", "0", "--out", str(data)] + TINY) == 0
    rc = main(["train", "--data", str(data), "--epochs", "1",
               "--dtype", "float99", "--out", str(tmp_path / "c.json")])
    assert rc == 1
    assert "dtype" in capsys.readouterr().err


def test_config_file_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 3, **TINY_CFG}))
    out = tmp_path / "out.json"
    assert main(["generate", "--config", str(cfg), "--seed", "5",
                 "--out", str(out)]) == 0
    direct = tmp_path / "direct.json"
    save_dataset(gen_dataset(SynthConfig(seed=5, **TINY_CFG)), direct)
    assert read_bytes(out) == read_bytes(direct)


def test_config_file_unknown_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    rc = main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o.json")])
    assert rc == 1
    assert "bogus" in capsys.readouterr().err


def test_env_seed_sets_default(tmp_path, monkeypatch):
    monkeypatch.setenv("IGI_SEED", "9")
    out = tmp_path / "env.json"
    assert main(["generate", "--out", str(out)] + TINY) == 0
    direct = tmp_path / "direct.json"
    save_dataset(gen_dataset(SynthConfig(seed=9, **TINY_CFG)), direct)
    assert read_bytes(out) == read_bytes(direct)

    flagged = tmp_path / "flagged.json"
    assert main(["generate", "--seed", "2", "--out", str(flagged)] + TINY) == 0
    save_dataset(gen_dataset(SynthConfig(seed=2, **TINY_CFG)), direct)
    assert read_bytes(flagged) == read_bytes(direct)


def test_env_seed_must_be_integer(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("IGI_SEED", "pi")
    rc = main(["generate", "--out", str(tmp_path / "o.json")] + TINY)
    assert rc == 1
    assert "IGI_SEED" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliflow")
    data, ckpt, report = root / "d.json", root / "ck.json", root / "rep.json"
    assert main(["generate", "--seed", "0", "--out", str(data)] + TINY) == 0
    rc = main(["train", "--data", str(data), "--epochs", "2",
               "--out", str(ckpt), "--report", str(report)])
    assert rc == 0
    return root, data, ckpt, report


def test_train_writes_checkpoint_and_report(trained):
    _, _, ckpt, report = trained
    raw = canonjson.load_path(ckpt)
    assert "params" in raw and "config" in raw
    rep = canonjson.load_path(report)
    assert len(rep["loss"]) == 2


def test_eval_reports_requested_metrics(trained, capsys, tmp_path):
    _, data, ckpt, _ = trained
    out = tmp_path / "report.json"
    rc = main(["eval", "--data", str(data), "--ckpt", str(ckpt),
               "--metrics", "nmi,acc", "--out", str(out)])
    assert rc == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert sorted(printed["metrics"]) == ["acc", "nmi"]
    assert printed["case"] == "original-nodes"
    assert canonjson.load_path(out) == printed

    rc = main(["eval", "--data", str(data), "--ckpt", str(ckpt)])
    assert rc == 0
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert sorted(printed["metrics"]) == ["acc", "ari", "f1", "nmi", "pre"]


def test_eval_unknown_metric_exits_1(trained, capsys):
    _, data, ckpt, _ = trained
    rc = main(["eval", "--data", str(data), "--ckpt", str(ckpt),
               "--metrics", "nmi,bogus"])
    assert rc == 1
    assert "bogus" in capsys.readouterr().err


def test_embed_dumps_all_nodes(trained, tmp_path):
    _, data, ckpt, _ = trained
    out = tmp_path / "emb.csv"
    assert main(["embed", "--data", str(data), "--ckpt", str(ckpt),
                 "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    ds = load_dataset(data)
    total = sum(len(g.uids) for g in ds.graphs)
    assert len(rows) == total + 1
    assert rows[0][:4] == ["graph-index", "node-index", "z", "zhat"]
    assert rows[0][4:] == [f"v{j + 1}" for j in range(16)]
    assert {row[3] for row in rows[1:]} <= {"0", "1"}


def test_experiment_subcommand_writes_results(tmp_path):
    plan = ExperimentPlan(
        synth=SynthConfig(seed=0, **TINY_CFG),
        variants=("kmeans",), cases=("original-nodes",), modes=("single",),
        runs=1)
    plan_path = tmp_path / "plan.json"
    save_plan(plan, plan_path)
    out = tmp_path / "results"
    rc = main(["experiment", "--plan", str(plan_path), "--out", str(out),
               "--jobs", "1"])
    assert rc == 0
    assert (out / "results.csv").exists()
    assert (out / "results.md").exists()


def test_selftest_subcommand_passes(capsys):
    assert main(["selftest"]) == 0
    assert "all" in capsys.readouterr().out
