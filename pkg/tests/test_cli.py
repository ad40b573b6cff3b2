import csv
import json
from pathlib import Path

import numpy as np
import pytest

from bolt.cli import run
from bolt.pipeline import ABLATION_HEADER
from bolt.tensor_store import TensorContainer, load_container, save_container


def chain(root: Path):
    """Every subcommand once, in pipeline order. Returns (argv, exit code) pairs."""
    fam = root / "fam"
    data = fam / "data"
    log = str(root / "results.jsonl")
    steps = [
        ["gen", "--seed", "7", "--out", str(fam)],
        ["pretrain", "--fam", str(fam)],
        ["finetune-sources", "--fam", str(fam)],
        ["build-basis", "--per-task-k", "1", "--base", str(fam / "base.btc"), "--sources", str(fam / "src*.btc"),
         "--out", str(root / "basis.btc")],
        ["init", "--basis", str(root / "basis.btc"), "--base", str(fam / "base.btc"), "--sources",
         str(fam / "src*.btc"), "--data", str(data / "target_pool.btc"), "--test", str(data / "target_test.btc"),
         "--out", str(root / "init.btc")],
        ["adapt", "--basis", str(root / "basis.btc"), "--base", str(fam / "base.btc"), "--sigma",
         str(root / "init.btc"), "--data", str(data / "target_pool.btc"), "--test", str(data / "target_test.btc"),
         "--epochs", "5", "--out", str(root / "adapted.btc")],
        ["tta", "--basis", str(root / "basis.btc"), "--base", str(fam / "base.btc"), "--sigma",
         str(root / "init.btc"), "--data", str(data / "target_pool.btc"), "--eval", str(data / "target_test.btc"),
         "--epochs", "2", "--out", str(root / "tta.btc")],
        ["merge", "--base", str(fam / "base.btc"), "--sources", str(fam / "src00.btc"), str(fam / "src01.btc"),
         "--alphas", "0.5", "--out", str(root / "merged.btc")],
        ["inspect", str(root / "basis.btc")],
    ]
    return [(argv, run(argv + ["--log", log])) for argv in steps]


def outputs(root: Path):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*.btc"))}


def records(root: Path):
    return [json.loads(line) for line in (root / "results.jsonl").read_text().splitlines()]


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    roots = [tmp_path_factory.mktemp(f"run{i}") for i in range(2)]
    codes = [chain(root) for root in roots]
    return roots, codes


def test_every_subcommand_succeeds(two_runs):
    _, codes = two_runs
    assert all(code == 0 for argv, code in codes[0]), codes[0]


def test_outputs_are_bit_identical(two_runs):
    (a, b), _ = two_runs
    out_a, out_b = outputs(a), outputs(b)
    assert len(out_a) > 15 and out_a.keys() == out_b.keys()
    for name in out_a:
        assert out_a[name] == out_b[name], name


def test_metrics_are_identical_and_one_record_per_run(two_runs):
    (a, b), codes = two_runs
    rec_a, rec_b = records(a), records(b)
    assert len(rec_a) == len(codes[0])
    for x, y in zip(rec_a, rec_b):
        assert x["command"] == y["command"] and x["metrics"] == y["metrics"] and x["seed"] == y["seed"]
        assert "T" in x["timestamp"]


def test_basis_metadata_reports_r_per_layer(two_runs):
    (a, _), _ = two_runs
    meta = load_container(a / "basis.btc").metadata
    assert json.loads(meta["r"]) == {"W1": 8, "W2": 8}
    assert meta["per_task_k"] == "1" and len(meta["sources"].split(",")) == 8


def test_gen_rerun_is_identical(tmp_path):
    for d in ("x", "y"):
        assert run(["gen", "--seed", "7", "--out", str(tmp_path / d), "--log", str(tmp_path / "log.jsonl")]) == 0
    assert outputs(tmp_path / "x") == outputs(tmp_path / "y")


def test_ablation_grid_is_complete_and_reproducible(tmp_path):
    paths = []
    for name in ("a.csv", "b.csv"):
        argv = ["ablate", "--ranks", "1,2,4,8", "--n-tasks", "2,4,8", "--seeds", "3", "--epochs", "2"]
        assert run(argv + ["--out", str(tmp_path / name), "--log", str(tmp_path / "log.jsonl")]) == 0
        paths.append(tmp_path / name)
    rows = list(csv.reader(paths[0].open()))
    assert tuple(rows[0]) == ABLATION_HEADER
    assert len(rows) - 1 == 4 * 3 * 3
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_unknown_flag_exits_one_with_usage(tmp_path, capsys):
    log = tmp_path / "log.jsonl"
    assert run(["gen", "--bogus", "--log", str(log)]) == 1
    assert "usage:" in capsys.readouterr().err


def test_validation_error_exits_one_and_logs(tmp_path, capsys):
    log = tmp_path / "log.jsonl"
    assert run(["inspect", str(tmp_path / "missing.btc"), "--log", str(log)]) == 1
    rec = [json.loads(x) for x in log.read_text().splitlines()]
    assert len(rec) == 1 and rec[0]["metrics"]["exit_code"] == 1


def test_numeric_error_exits_two(tmp_path):
    base = TensorContainer.from_arrays("base", "checkpoint", {"W": np.zeros((3, 2))})
    bad = TensorContainer.from_arrays("bad", "checkpoint", {"W": np.full((3, 2), np.nan)})
    save_container(base, tmp_path / "base.btc")
    save_container(bad, tmp_path / "bad.btc")
    argv = ["build-basis", "--base", str(tmp_path / "base.btc"), "--sources", str(tmp_path / "bad.btc")]
    assert run(argv + ["--out", str(tmp_path / "basis.btc"), "--log", str(tmp_path / "log.jsonl")]) == 2
