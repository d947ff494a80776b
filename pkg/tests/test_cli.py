import json
import subprocess
import sys

import pytest

from groupnl import cli
from groupnl.cli import main, parse_hw, parse_severities
from groupnl.errors import InvalidSpec

SPEC = {"kind": "GroupNLStd", "geom": {"c_in": 512, "c_out": 512, "k": 3, "stride": 2, "padding": 1, "bias": True}, "r": 2, "g": 4}


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "layer.json"
    path.write_text(json.dumps(SPEC))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_cost_layer_json(capsys, spec_file, validate):
    code, out, _ = run(capsys, "cost", "layer", "--spec", spec_file, "--hw", "32x32", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    validate("cost_report", doc)
    assert doc["params"] == 1_179_904 and doc["flops"] == 302_055_424


def test_cost_layer_table(capsys, spec_file):
    code, out, _ = run(capsys, "cost", "layer", "--spec", spec_file)
    assert code == 0 and "302.06" in out and "TOTAL" in out


def test_cost_model(capsys, validate):
    code, out, _ = run(capsys, "cost", "model", "--arch", "resnet18", "--variant", "groupnl", "--r", "2", "--g", "4", "--format", "json")
    doc = json.loads(out)
    validate("cost_report", doc)
    assert code == 0 and f"{doc['params'] / 1e6:.2f}" == "5.60" and f"{doc['flops'] / 1e6:.2f}" == "279.49"
    code, out, _ = run(capsys, "cost", "model", "--arch", "tinycnn", "--per-layer", "--format", "csv")
    assert code == 0 and out.splitlines()[0] == "module,params,flops,params_M,flops_M" and "conv0" in out


def test_cost_comm(capsys, validate):
    code, out, _ = run(capsys, "cost", "comm", "--grads", "44.55e6", "--gpus", "8", "--mode", "ddp", "--format", "json")
    doc = json.loads(out)
    validate("comm_report", doc)
    assert round(doc["per_gpu"] / 1e6, 2) == 77.96 and round(doc["total"] / 1e6, 2) == 623.70
    code, out, _ = run(capsys, "cost", "comm", "--grads", "1e6", "--gpus", "1", "--format", "json")
    assert json.loads(out)["total"] == 0


def test_malformed_spec_exit_1_with_field(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"kind": "GroupNLStd", "geom": {"c_in": 8, "c_out": "x", "k": 3}}))
    code, _, err = run(capsys, "cost", "layer", "--spec", str(bad))
    assert code == 1 and "geom.c_out" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["cost", "model", "--bogus"],
        ["cost", "model", "--arch", "nope"],
        ["frobnicate"],
        ["cost", "layer", "--spec", "/does/not/exist.json"],
        ["train", "robust", "--severity", "7"],
    ],
)
def test_validation_errors_exit_1(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1 and err.startswith("groupnl: error")


def test_internal_error_exit_2(capsys, monkeypatch):
    def boom(args):
        raise RuntimeError("kaput")

    monkeypatch.setattr(cli, "cmd_cost_comm", boom)
    code, _, err = run(capsys, "cost", "comm", "--grads", "1", "--gpus", "2")
    assert code == 2 and "internal error" in err


def test_config_overrides_flags(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gpus": 4, "mode": "dp"}))
    code, out, _ = run(capsys, "cost", "comm", "--grads", "10", "--gpus", "8", "--config", str(cfg), "--format", "json")
    doc = json.loads(out)
    assert code == 0 and (doc["n_gpus"], doc["mode"]) == (4, "DP")
    cfg.write_text(json.dumps({"gpu": 4}))
    code, _, err = run(capsys, "cost", "comm", "--grads", "10", "--gpus", "8", "--config", str(cfg))
    assert code == 1 and "config.gpu" in err


def test_output_file(capsys, tmp_path):
    out = tmp_path / "r.json"
    code, printed, _ = run(capsys, "cost", "comm", "--grads", "10", "--gpus", "2", "--format", "json", "-o", str(out))
    assert code == 0 and printed == "" and json.loads(out.read_text())["total"] == 20


def test_verify_suites(capsys, validate):
    code, out, _ = run(capsys, "verify", "--suite", "decomposition", "--instances", "50", "--format", "json")
    doc = json.loads(out)
    validate("verify_report", doc)
    assert code == 0 and doc["suites"][0]["checked"] == 50 and doc["suites"][0]["failures"] == 0
    code, out, _ = run(capsys, "verify", "--suite", "gradcheck", "--eps", "1e-5", "--instances", "1", "--format", "json")
    assert code == 0 and json.loads(out)["suites"][0]["metric"] < 1e-5


def test_verify_failure_exit_1(capsys, monkeypatch):
    from groupnl import verify

    monkeypatch.setattr(verify, "run_suites", lambda *a, **k: [verify.SuiteResult("counts", False, 1, 1)])
    code, out, _ = run(capsys, "verify", "--suite", "counts")
    assert code == 1 and "FAIL" in out


def test_bench_minimal(capsys, validate):
    code, out, _ = run(capsys, "bench", "module", "--variant", "groupnl", "--r", "2", "--iters", "1", "--warmup", "0", "--format", "json")
    doc = json.loads(out)
    validate("bench_report", doc)
    assert code == 0 and doc["samples"] == 1
    code, out, _ = run(capsys, "bench", "compare", "--variants", "vanilla,groupnl", "--iters", "1", "--warmup", "0", "--format", "json")
    validate("bench_compare", json.loads(out))


def test_bench_spec_file(capsys, tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"kind": "Ghost", "geom": {"c_in": 4, "c_out": 8, "k": 3, "padding": 1}}))
    code, out, _ = run(capsys, "bench", "module", "--spec", str(path), "--hw", "8x8", "--iters", "2", "--warmup", "0")
    assert code == 0 and "Ghost" in out


def test_train_toy_jsonl_and_seed_env(capsys, monkeypatch, validate, tmp_path):
    argv = ["train", "toy", "--epochs", "1", "--n", "100", "--format", "json"]
    monkeypatch.setenv("GROUPNL_SEED", "4")
    code, out_env, _ = run(capsys, *argv)
    assert code == 0
    for line in out_env.splitlines():
        validate("train_log", json.loads(line))
    monkeypatch.delenv("GROUPNL_SEED")
    _, out_flag, _ = run(capsys, *argv, "--seed", "4", "--cache", str(tmp_path / "cache"))
    assert out_flag == out_env
    assert (tmp_path / "cache" / "train.nchw").exists()


def test_train_zero_lr_flat(capsys):
    code, out, _ = run(capsys, "train", "toy", "--epochs", "2", "--lr", "0", "--n", "100", "--format", "json")
    losses = {json.loads(line)["loss"] for line in out.splitlines()}
    assert code == 0 and len(losses) == 1


def test_train_robust(capsys, validate):
    argv = ["train", "robust", "--epochs", "1", "--n", "100", "--seeds", "1", "--severity", "1,3", "--kinds", "contrast"]
    code, out, _ = run(capsys, *argv, "--format", "json")
    doc = json.loads(out)
    validate("robustness_report", doc)
    assert code == 0 and doc["severities"] == [0, 1, 3] and list(doc["accuracy"]) == ["Contrast"]


def test_arg_parsers():
    assert parse_hw("32x16") == (32, 16)
    assert parse_hw("32") == (32, 32)
    assert parse_severities("1..5") == [1, 2, 3, 4, 5]
    assert parse_severities("1,3,5") == [1, 3, 5]
    with pytest.raises(InvalidSpec, match="hw"):
        parse_hw("32x")
    with pytest.raises(InvalidSpec, match="severity"):
        parse_severities("0..6")


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "groupnl", "cost", "comm", "--grads", "10", "--gpus", "0"], capture_output=True, text=True)
    assert proc.returncode == 1 and "gpus" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "groupnl", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "cost" in proc.stdout
