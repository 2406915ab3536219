"""Command-line entry point: ``promptgrad {train,eval,export-graph,prob,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .backends import BackendError, UnscriptedRequestError
from .backward import BackwardEngine
from .graph import ParameterGraph
from .pipelines import PIPELINE_IDS, load_samples
from .trainer import (
    CheckpointError,
    ConfigError,
    Trainer,
    TrainerConfig,
    load_checkpoint,
    no_error_batch_probability,
    restore,
    selective_backward,
)


def _config(args: argparse.Namespace) -> TrainerConfig:
    data = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    data["pipeline"] = args.pipeline
    for flag, key in (("backend", "backend"), ("script", "script"), ("seed", "seed"), ("steps", "max_steps")):
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    return TrainerConfig.from_dict(data)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.checkpoint_path = str(out / "checkpoint.json")
    report = Trainer(cfg).run()
    report_path = out / "run_report.jsonl"
    report.write(report_path)
    print(json.dumps({k: v for k, v in report.summary().items() if k not in ("usage", "best_prompts")}))
    print(f"wrote {report_path} and {cfg.checkpoint_path}")
    if not args.no_figures:
        from .report import render_report

        for path in render_report(report_path, out):
            print(f"wrote {path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args)
    trainer = Trainer(cfg)
    restore(trainer, load_checkpoint(args.checkpoint))
    dataset = trainer.val if args.split == "val" else trainer.test
    score = trainer.evaluate(dataset)
    print(json.dumps({"pipeline": cfg.pipeline, "split": args.split, "score": score, "n": len(dataset)}))
    return 0


def cmd_export_graph(args: argparse.Namespace) -> int:
    cfg = _config(args)
    trainer = Trainer(cfg)
    samples = {s.id: s for s in (trainer.train + trainer.val + trainer.test)}
    if args.data:
        samples.update({s.id: s for s in load_samples(args.data)})
    if args.sample_id not in samples:
        raise ConfigError(f"unknown sample id {args.sample_id!r}")
    graph = ParameterGraph()
    loss = trainer.pipeline.forward(samples[args.sample_id], graph, trainer.backends.forward)
    if args.backward:
        selective_backward(graph, [loss], trainer.tau, BackwardEngine(trainer.backends.backward))
    Path(args.out).write_text(graph.export_dot(), encoding="utf-8")
    if args.json:
        Path(args.json).write_text(graph.to_json(indent=2), encoding="utf-8")
    print(f"wrote {args.out} ({len(graph)} nodes)")
    return 0


def cmd_prob(args: argparse.Namespace) -> int:
    print(f"{no_error_batch_probability(args.n_total, args.accuracy, args.batch):.4f}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from .report import render_report

    for path in render_report(args.run, args.out):
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptgrad", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--pipeline", required=True, choices=PIPELINE_IDS)
        p.add_argument("--config", help="TrainerConfig JSON file")
        p.add_argument("--backend", choices=("scripted", "http"))
        p.add_argument("--script", help="scripted-backend JSONL file (defaults to the bundled one)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="optimize the pipeline's prompts")
    run_flags(p)
    p.add_argument("--steps", type=int, help="override max_steps")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--no-figures", action="store_true", help="skip rendering PNG figures")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, choices=("val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-graph", help="trace one sample and write its graph as DOT")
    run_flags(p)
    p.add_argument("--sample-id", required=True)
    p.add_argument("--out", required=True, help="DOT output path")
    p.add_argument("--json", help="also write the graph snapshot as JSON")
    p.add_argument("--data", help="extra dataset JSONL to look the sample up in")
    p.add_argument("--backward", action="store_true", help="run backward first so gradient counts show")
    p.set_defaults(func=cmd_export_graph)

    p = sub.add_parser("prob", help="probability that a batch contains no error sample")
    p.add_argument("--n-total", type=int, required=True)
    p.add_argument("--accuracy", type=float, required=True)
    p.add_argument("--batch", type=int, required=True)
    p.set_defaults(func=cmd_prob)

    p = sub.add_parser("report", help="render figures from a run_report.jsonl")
    p.add_argument("--run", required=True, help="path to run_report.jsonl")
    p.add_argument("--out", help="figure directory (default: next to the report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError, KeyError, OSError, BackendError, UnscriptedRequestError) as exc:
        print(f"promptgrad: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
