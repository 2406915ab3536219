import json
import subprocess
import sys

import pytest

from promptgrad.cli import main


def test_prob(capsys):
    assert main(["prob", "--n-total", "50", "--accuracy", "0.8", "--batch", "4"]) == 0
    assert capsys.readouterr().out.strip() == "0.3968"


def test_prob_invalid(capsys):
    assert main(["prob", "--n-total", "3", "--accuracy", "0.5", "--batch", "4"]) == 1
    assert "exceeds" in capsys.readouterr().err


def test_bad_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--pipeline", "object_count", "--bogus"])
    assert exc.value.code == 2


def test_train_eval_report(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--pipeline", "object_count", "--steps", "2", "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out.splitlines()[0])
    assert summary["best_val"] == 1.0
    for name in ("run_report.jsonl", "checkpoint.json", "run_report.scores.png", "run_report.usage.png"):
        assert (out / name).stat().st_size > 0
    png = (out / "run_report.scores.png").read_bytes()
    assert png[:8] == b"\x89PNG\r\n\x1a\n"

    assert main(["eval", "--pipeline", "object_count", "--checkpoint", str(out / "checkpoint.json"),
                 "--split", "val"]) == 0
    assert json.loads(capsys.readouterr().out)["score"] == 1.0

    figs = tmp_path / "figs"
    assert main(["report", "--run", str(out / "run_report.jsonl"), "--out", str(figs)]) == 0
    assert sorted(p.name for p in figs.iterdir()) == ["run_report.scores.png", "run_report.usage.png"]


def test_train_no_figures(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--pipeline", "trec", "--steps", "1", "--out", str(out), "--no-figures"]) == 0
    assert not list(out.glob("*.png"))


def test_eval_wrong_checkpoint(tmp_path, capsys):
    bad = tmp_path / "ck.json"
    bad.write_text("{")
    assert main(["eval", "--pipeline", "trec", "--checkpoint", str(bad), "--split", "test"]) == 1
    assert "checkpoint" in capsys.readouterr().err


def test_export_graph(tmp_path):
    dot, js = tmp_path / "g.dot", tmp_path / "g.json"
    assert main(["export-graph", "--pipeline", "multihop_rag_cycle", "--sample-id", "hp-01",
                 "--out", str(dot), "--json", str(js), "--backward"]) == 0
    assert dot.read_text().startswith("digraph")
    snap = json.loads(js.read_text())
    qi = next(n for n in snap["nodes"] if n["name"] == "query_instruction")
    assert len(qi["gradients"]) == 2


def test_export_graph_unknown_sample(capsys):
    assert main(["export-graph", "--pipeline", "trec", "--sample-id", "nope", "--out", "/dev/null"]) == 1
    assert "unknown sample" in capsys.readouterr().err


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"max_steps": 0, "unknown_knob": 1}))
    assert main(["train", "--pipeline", "trec", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "unknown_knob" in capsys.readouterr().err


def test_console_script_module():
    r = subprocess.run([sys.executable, "-m", "promptgrad.cli", "prob", "--n-total", "50", "--accuracy", "0.5",
                        "--batch", "4"], capture_output=True, text=True, check=True)
    assert r.stdout.strip() == "0.0549"
