"""Figures for a finished run, rendered from its RunReport JSONL."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .backends import PHASES  # noqa: E402
from .trainer import read_run_report  # noqa: E402


def plot_scores(steps, summary, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = [0] + [s["step"] for s in steps]
    best = [summary["start_val"]] + [s["best_val"] for s in steps]
    ax.step(xs, best, where="post", label="best validation", color="tab:blue")
    for s in steps:
        for p in s["proposals"]:
            if p["minibatch_score"] is None:
                continue
            marker = "o" if p["minibatch_passed"] else "x"
            ax.scatter(s["step"], p["minibatch_score"], marker=marker, color="tab:orange", zorder=3)
            if p["val_score"] is not None:
                ax.scatter(s["step"], p["val_score"], marker="s", color="tab:green" if p["accepted"] else "tab:red",
                           zorder=3)
    ax.set_xlabel("step")
    ax.set_ylabel("score")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title(f"{summary['pipeline']}: validation and proposal scores")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_usage(summary, path: Path) -> Path:
    by_phase = summary["usage"]["by_phase"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    prompt = [by_phase[p]["prompt_tokens"] for p in PHASES]
    completion = [by_phase[p]["completion_tokens"] for p in PHASES]
    ax.bar(PHASES, prompt, label="prompt tokens")
    ax.bar(PHASES, completion, bottom=prompt, label="completion tokens")
    ax.set_ylabel("tokens")
    ax.set_title(f"{summary['pipeline']}: token usage by phase")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_report(report_path: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    report_path = Path(report_path)
    out = Path(out_dir) if out_dir else report_path.parent
    out.mkdir(parents=True, exist_ok=True)
    steps, summary = read_run_report(report_path)
    stem = report_path.stem
    return [
        plot_scores(steps, summary, out / f"{stem}.scores.png"),
        plot_usage(summary, out / f"{stem}.usage.png"),
    ]
