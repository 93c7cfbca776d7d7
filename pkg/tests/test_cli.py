from __future__ import annotations

import json

import pytest

from conftest import tiny_spec
from ufo import pipeline
from ufo.bench import import_bench
from ufo.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from ufo.supernet import TrimmedModel

RUN_CFG = {
    "seed": 3,
    "space": {"heads": [2, 4], "mlp_ratios": [1, 2], "num_layers": 2, "embed_dim": 16, "head_dim": 4, "forced_keep_layers": [0]},
    "model": {"patch_size": 4, "feature_dim": 8},
    "train": {"batch_size": 12, "iterations": 20, "warmup": 2, "lr": 0.05},
    "search": {"subset_size": 40, "quota": 8, "iterations": 2, "threshold": 0.5},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(json.dumps(tiny_spec(seed=5).to_dict()))
    (d / "run.json").write_text(json.dumps(RUN_CFG))
    return d


@pytest.fixture(scope="module")
def trained(workdir):
    d = workdir
    assert main(["gen-tasks", "--spec", str(d / "spec.json"), "--out", str(d / "data")]) == EXIT_OK
    assert main(["train", "--config", str(d / "run.json"), "--data", str(d / "data"), "--out", str(d / "run")]) == EXIT_OK
    return d


def test_full_command_sequence(trained, capsys):
    d = trained
    run = str(d / "run")
    assert main(["eval-subnets", "--run", run, "--count", "16", "--seed", "1", "--out", str(d / "bench.csv")]) == EXIT_OK
    assert main(["fit-predictors", "--bench", str(d / "bench.csv"), "--out", run]) == EXIT_OK
    args = ["search", "--run", run, "--targets", "a", "--flops-frac", "0.9", "--out", str(d / "s1.json")]
    assert main(args) == EXIT_OK
    assert main(args[:-1] + [str(d / "s2.json")]) == EXIT_OK
    assert (d / "s1.json").read_bytes() == (d / "s2.json").read_bytes()
    report = json.loads((d / "s1.json").read_text())
    chosen = report["chosen"]
    assert chosen is not None
    capsys.readouterr()
    assert main(["extract", "--run", run, "--arch", chosen, "--targets", "a", "--out", str(d / "m.ufot")]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["params"] < summary["supernet_params"]
    model = TrimmedModel.load(d / "m.ufot")
    assert model.arch.encode() == summary["arch"]

    assert main(["correlate", "--bench", str(d / "bench.csv"), "--out", str(d / "corr.csv")]) == EXIT_OK
    assert (d / "corr.svg").read_text().startswith("<svg")
    assert main(["bench", "export", "--run", run, "--out", str(d / "copy.csv")]) == EXIT_OK
    assert (d / "copy.csv").read_bytes() == (d / "bench.csv").read_bytes()
    table, errors = import_bench(d / "copy.csv", pipeline.load_run(run).space)
    assert not errors and len(table.rows) == 16


def test_eval_subnets_is_idempotent(trained):
    d = trained
    for name in ("e1.csv", "e2.csv"):
        assert main(["eval-subnets", "--run", str(d / "run"), "--count", "5", "--seed", "2", "--out", str(d / name)]) == EXIT_OK
    assert (d / "e1.csv").read_bytes() == (d / "e2.csv").read_bytes()


def test_search_before_predictors_names_missing_artifact(workdir, capsys):
    d = workdir
    main(["gen-tasks", "--spec", str(d / "spec.json"), "--out", str(d / "data2")])
    main(["train", "--config", str(d / "run.json"), "--data", str(d / "data2"), "--out", str(d / "fresh")])
    capsys.readouterr()
    assert main(["search", "--run", str(d / "fresh"), "--targets", "a", "--out", str(d / "x.json")]) == EXIT_DATA
    assert "eval-subnets" in capsys.readouterr().err


def test_usage_errors(workdir, monkeypatch):
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == EXIT_USAGE
    monkeypatch.setenv("UFO_SEED", "abc")
    assert main(["gen-tasks", "--spec", str(workdir / "spec.json"), "--out", str(workdir / "d3")]) == EXIT_USAGE


def test_data_errors(workdir, tmp_path):
    assert main(["gen-tasks", "--spec", str(tmp_path / "missing.json"), "--out", str(tmp_path / "d")]) == EXIT_DATA
    assert main(["search", "--run", str(tmp_path / "nope"), "--targets", "a", "--out", str(tmp_path / "r.json")]) == EXIT_DATA
    bad = tmp_path / "bad.csv"
    bad.write_text("arch_id,arch,flops,params,g/x\nr0,junk,1,1,0.5\nr1,junk,1,1,oops\n")
    assert main(["bench", "import", str(bad)]) == EXIT_OK
    assert main(["bench", "import", str(bad), "--strict"]) == EXIT_DATA


def test_numerical_failure_exit_code(workdir, tmp_path):
    cfg = json.loads(json.dumps(RUN_CFG))
    cfg["train"].update(lr=1e30, grad_clip=None, iterations=10)
    (tmp_path / "boom.json").write_text(json.dumps(cfg))
    code = main(["train", "--config", str(tmp_path / "boom.json"), "--data", str(workdir / "data"), "--out", str(tmp_path / "r")])
    assert code == EXIT_NUMERIC


def test_env_seed_overrides_config(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("UFO_SEED", "11")
    assert main(["gen-tasks", "--spec", str(workdir / "spec.json"), "--out", str(tmp_path / "d")]) == EXIT_OK
    assert json.loads((tmp_path / "d" / "spec.json").read_text())["seed"] == 11
