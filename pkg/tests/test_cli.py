import csv
import json
import subprocess
import sys

import pytest

from asc import cli

TINY = {"encoder": {"depth": 2, "embed_dim": 16, "heads": 2, "asc_positions": [0], "image_size": 16},
        "data": {"image_size": 16}, "train": {"batch_size": 2, "total_steps": 2, "warmup_steps": 1},
        "probe": {"n_clips": 45, "epochs": 3}}


@pytest.fixture
def config(tmp_path):
    def make(**over):
        doc = json.loads(json.dumps(TINY))
        for k, v in over.items():
            doc.setdefault(k, {}).update(v) if isinstance(v, dict) else doc.update({k: v})
        doc.setdefault("out", str(tmp_path / "run"))
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(doc))
        return p
    return make


def test_missing_config_names_path(capsys):
    assert cli.main(["train", "--config", "missing.json"]) == 1
    assert "missing.json" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["train", "--frobnicate"], [], ["probe"], ["inspect"]])
def test_usage_errors_exit_1(argv, capsys):
    assert cli.main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_invalid_config_exit_1(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"train": {"nope": 1}}')
    assert cli.main(["train", "--config", str(p)]) == 1
    assert "nope" in capsys.readouterr().err


def test_train_probe_inspect_flow(config, tmp_path, capsys):
    cfg = config()
    out = tmp_path / "elsewhere"
    assert cli.main(["train", "--config", str(cfg), "--seed", "5", "--out", str(out)]) == 0
    assert (out / "checkpoint.asc").is_file()
    first = (out / "metrics.csv").read_text().splitlines()[0]
    resolved = json.loads(first[len("# config: "):])
    assert resolved["train"]["seed"] == 5 and resolved["out"] == str(out)

    assert cli.main(["probe", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "probe.json").read_text())
    assert 0.0 <= report["top1"] <= 1.0 and report["config"]["out"] == str(out)

    capsys.readouterr()
    assert cli.main(["inspect", str(out / "checkpoint.asc")]) == 0
    text = capsys.readouterr().out
    assert "online.encoder.blocks.0.attn.wq" in text and "(16, 16)" in text


def test_inspect_zero_step_checkpoint_prints_initial_theta(config, tmp_path, capsys):
    cfg = config(train={"total_steps": 0, "warmup_steps": 0})
    assert cli.main(["train", "--config", str(cfg)]) == 0
    capsys.readouterr()
    assert cli.main(["inspect", str(tmp_path / "run" / "checkpoint.asc")]) == 0
    text = capsys.readouterr().out
    theta_lines = [ln for ln in text.split("theta:\n")[1].splitlines() if ln.strip()]
    assert theta_lines and all(ln.split()[-1] == "0.2" for ln in theta_lines)


def test_probe_needs_checkpoint(config, capsys):
    assert cli.main(["probe", "--config", str(config())]) == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_runtime_failure_exit_2(tmp_path, capsys):
    bad = tmp_path / "x.asc"
    bad.write_bytes(b"NOPE")
    assert cli.main(["inspect", str(bad)]) == 2
    assert "runtime failure" in capsys.readouterr().err


def test_ablate_writes_report(config, tmp_path):
    cfg = config()
    assert cli.main(["ablate", "--config", str(cfg), "--variants", "full", "no-ASC", "--seeds", "0"]) == 0
    lines = (tmp_path / "run" / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("# config: ")
    rows = list(csv.DictReader(lines[1:]))
    assert [r["variant"] for r in rows] == ["full", "no-ASC"]
    assert float(rows[1]["tokens_ratio"]) == 1.0


def test_bench_writes_csv_and_diagnostics(tmp_path):
    out = tmp_path / "bench"
    assert cli.main(["bench", "--out", str(out), "--sizes", "16", "32", "--images", "2"]) == 0
    lines = (out / "bench.csv").read_text().splitlines()
    assert lines[0].startswith("# config: ") and lines[1].startswith("input,N,d,theta,components")
    diag = [json.loads(x) for x in (out / "diagnostics.jsonl").read_text().splitlines()]
    assert [d["layer"] for d in diag] == [0, 2]


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck"]) == 0
    text = capsys.readouterr().out
    for op in ("matmul", "softmax_rows", "layer_norm", "l2_normalize_rows", "gelu", "model[16 tokens"):
        assert op in text
    assert "FAIL" not in text


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "asc", "train", "--config", "nowhere.json"],
                         capture_output=True, text=True)
    assert res.returncode == 1 and "nowhere.json" in res.stderr
