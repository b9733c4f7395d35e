import json

import pytest

from hugat import training
from hugat.cli import main
from hugat.errors import NonFiniteValue

TINY = {
    "seed": 1,
    "synthetic": {"n_regions": 12, "trips": 400, "bike_flow_pairs": 60},
    "training": {"epochs": 2, "replicates": 1},
    "eval": {"restarts": 2, "folds": 3},
}


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run(tmp_path, cfg, out="out", *extra):
    return main(["run", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path / out),
                 *extra])


def test_smoke_run_writes_every_stage(tmp_path, capsys):
    assert run(tmp_path, TINY) == 0
    out = tmp_path / "out"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["stages"] == ["synth", "build-graph", "train", "eval"]
    assert (out / "graph" / "table1.txt").exists()
    assert (out / "train" / "seed_1" / "embeddings.csv").exists()
    assert (out / "eval" / "seed_1" / "report.json").exists()
    assert "Relation (A-B)" in capsys.readouterr().out


def test_runs_are_byte_identical(tmp_path):
    assert run(tmp_path, TINY, "a") == 0
    assert run(tmp_path, TINY, "b") == 0
    for rel in ["summary.json", "train/seed_1/loss_history.csv", "train/seed_1/embeddings.csv"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_stage_flag_stops_early(tmp_path):
    assert run(tmp_path, TINY, "out", "--stage", "build-graph") == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["stages"] == ["synth", "build-graph"]
    assert not (tmp_path / "out" / "train").exists()


def test_single_stage_commands_chain(tmp_path):
    cfg = write_config(tmp_path, TINY)
    out = str(tmp_path / "out")
    for cmd in ["synth", "build-graph", "train", "eval"]:
        assert main([cmd, "--config", cfg, "--out", out]) == 0, cmd
        assert (tmp_path / "out" / f"{cmd}.json").exists()


def test_seed_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("HUGAT_SEED", "4")
    assert run(tmp_path, TINY, "env", "--stage", "train") == 0
    assert (tmp_path / "env" / "train" / "seed_4").exists()
    assert run(tmp_path, TINY, "flag", "--stage", "train", "--seed", "6") == 0
    assert (tmp_path / "flag" / "train" / "seed_6").exists()
    monkeypatch.setenv("HUGAT_SEED", "x")
    assert run(tmp_path, TINY, "bad") == 2


@pytest.mark.parametrize("cfg", [
    {"bogus": 1},
    {**TINY, "training": {"epochs": 0}},
    {**TINY, "training": {"weights": {"alpha": 0.5, "beta": 0.5, "gamma": 0.5}}},
    {"seed": 0},
])
def test_config_errors_exit_2(tmp_path, cfg):
    assert run(tmp_path, cfg) == 2


def test_unreadable_config_exits_2(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["run", "--config", str(p)]) == 2
    assert main(["run", "--config", str(tmp_path / "absent.json")]) == 2


def test_missing_data_exits_3(tmp_path, capsys):
    cfg = {"data_dir": str(tmp_path / "nowhere"), "training": {"epochs": 1}}
    assert run(tmp_path, cfg) == 3
    assert "ingest" in capsys.readouterr().err


def test_divergence_exits_4(tmp_path, monkeypatch):
    # every loss is bounded, so force the non-finite path directly
    def explode(*args, **kwargs):
        raise NonFiniteValue("loss is nan")

    monkeypatch.setattr(training, "loss_breakdown", explode)
    assert run(tmp_path, TINY) == 4


def test_evaluation_failure_exits_5(tmp_path):
    cfg = {**TINY, "eval": {"clusters": 50}}
    assert run(tmp_path, cfg) == 5
