"""Minibatch training with selective backward and two-stage validation.

Per step: forward the batch, send full backward only through samples scoring
below ``error_threshold`` (the others get a fixed "You score s" note), then try
up to ``max_proposals`` proposals. A proposal is kept only if it strictly
improves the minibatch and then the full validation set; otherwise it is
reverted and shown to the optimizer as a failed attempt. When nothing is
accepted the same batch is reused for the next step (at most ``max_carry``
times in a row).
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterator, Sequence

from .backends import BackendError, Backends, HTTPBackend, ScriptedBackend, UsageLedger, load_script
from .backward import BackwardEngine, run_backward
from .components import METRICS, DocumentCorpus
from .graph import Gradient, Parameter, ParameterGraph, zero_grad
from .optimizer import (
    OptimizerConfig,
    ProposalFailed,
    apply_proposal,
    history_from_json,
    history_to_json,
    HistoryEntry,
    propose,
    record_outcome,
    revert,
)
from .pipelines import DEFAULT_DATA, PIPELINE_IDS, Pipeline, Sample, build_pipeline, data_path, load_samples

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

DEFAULT_MODELS = {
    "forward": {"temperature": 0.0},
    "backward": {"temperature": 1.0, "top_p": 0.99},
    "optimizer": {"temperature": 1.0, "top_p": 0.99},
}


class ConfigError(ValueError):
    pass


class CheckpointError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainerConfig:
    pipeline: str = "object_count"
    batch_size: int = 4
    max_steps: int = 12
    error_threshold: float | None = None
    max_proposals: int = 3
    train_path: str | None = None
    val_path: str | None = None
    test_path: str | None = None
    corpus_path: str | None = None
    metric: str | None = None
    backend: str = "scripted"
    script: str | None = None
    http: dict[str, Any] = field(default_factory=dict)
    models: dict[str, dict[str, Any]] = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_MODELS)))
    seed: int = 0
    sh_capacity: int = 5
    proposal_policy: str = "all"
    strict_improvement: bool = True
    max_carry: int = 2
    constraint_text: str | None = None
    in_context_examples: str | None = None
    checkpoint_path: str | None = None

    def __post_init__(self) -> None:
        self.check()

    def check(self) -> None:
        if self.pipeline not in PIPELINE_IDS:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.max_proposals < 1:
            raise ConfigError("max_proposals must be >= 1")
        if self.error_threshold is not None and not 0 < self.error_threshold <= 1:
            raise ConfigError("error_threshold must be in (0, 1]")
        if self.proposal_policy not in ("all", "round_robin"):
            raise ConfigError("proposal_policy must be 'all' or 'round_robin'")
        if self.backend not in ("scripted", "http"):
            raise ConfigError("backend must be 'scripted' or 'http'")
        if self.sh_capacity < 1 or self.max_carry < 0:
            raise ConfigError("sh_capacity must be >= 1 and max_carry >= 0")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = dict(d)
        if "models" in cfg:
            models = json.loads(json.dumps(DEFAULT_MODELS))
            for role, params in cfg["models"].items():
                models.setdefault(role, {}).update(params)
            cfg["models"] = models
        return cls(**cfg)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainerConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# efficiency calculator


def no_error_batch_probability(N: int, accuracy: float, n: int) -> float:
    """Probability that a batch of ``n`` drawn without replacement holds no error sample.

    C(N1, n) / C(N, n) with N1 = N * accuracy rounded half up.
    """
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError("accuracy must be in [0, 1]")
    if n < 0 or N < 0:
        raise ValueError("N and n must be non-negative")
    if n > N:
        raise ValueError(f"batch size {n} exceeds dataset size {N}")
    n1 = math.floor(N * accuracy + 0.5)
    return float(Fraction(math.comb(n1, n), math.comb(N, n)))


# ---------------------------------------------------------------------------
# evaluation


def validate(pipeline: Pipeline, dataset: Sequence[Sample], backend, ledger: UsageLedger | None = None,
             phase: str = "validate") -> float:
    """Mean evaluation metric over ``dataset`` with the current prompt values."""
    if not dataset:
        raise ValueError("cannot validate on an empty dataset")
    scores = []
    ctx = ledger.phase(phase) if ledger is not None else _null()
    with ctx:
        for sample in dataset:
            graph = ParameterGraph()
            scores.append(pipeline.eval_score(pipeline.forward(sample, graph, backend)))
    return sum(scores) / len(scores)


class _null:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def selective_backward(graph: ParameterGraph, losses: Sequence[Parameter], tau: float,
                       engine: BackwardEngine) -> dict[str, str]:
    """Full backward for samples below ``tau``; a fixed score note for the rest."""
    actions: dict[str, str] = {}
    manual = []
    for loss in losses:
        s = loss.score
        if s is not None and s >= tau:
            (final,) = graph.predecessors(loss)
            note = Gradient(loss.data_id, loss.call_index, loss.id, "You score " + str(s), None, s)
            graph.record_gradient(final, note)
            manual.append(loss.data_id)
            actions[loss.data_id] = "manual"
        else:
            actions[loss.data_id] = "backward"
    result = run_backward(graph, engine, manual_ids=manual)
    for data_id in result.aborted:
        actions[data_id] = "aborted"
    return actions


# ---------------------------------------------------------------------------
# reports


@dataclass
class ProposalReport:
    params: list[str]
    minibatch_score: float | None = None
    minibatch_passed: bool = False
    val_score: float | None = None
    accepted: bool = False
    error: str | None = None


@dataclass
class StepReport:
    step: int
    batch_ids: list[str]
    carried: bool
    minibatch_score: float
    error_ids: list[str]
    skipped: bool = False
    proposals: list[ProposalReport] = field(default_factory=list)
    accepted: bool = False
    best_val: float = 0.0
    minibatch_evaluations: int = 0
    val_evaluations: int = 0
    backward_requests: int = 0
    aborted_ids: list[str] = field(default_factory=list)
    error: str | None = None
    usage: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "step", **asdict(self)}


@dataclass
class RunReport:
    pipeline: str
    seed: int
    start_val: float
    start_test: float | None
    best_val: float
    best_step: int
    final_test: float | None
    minibatch_pass_rate: float | None
    validation_pass_rate: float | None
    best_prompts: dict[str, str]
    usage: dict[str, Any]
    steps: list[StepReport] = field(default_factory=list)

    def summary(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("steps")
        return {"type": "run", **d}

    def to_jsonl(self) -> str:
        lines = [json.dumps(s.to_dict(), sort_keys=True) for s in self.steps]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


def read_run_report(path: str | Path) -> tuple[list[dict[str, Any]], dict[str, Any]]:
    steps, summary = [], None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if d.get("type") == "step":
            steps.append(d)
        elif d.get("type") == "run":
            summary = d
    if summary is None:
        raise ValueError(f"{path}: no run summary line")
    return steps, summary


# ---------------------------------------------------------------------------
# state


class BatchSampler:
    """Seeded shuffle without replacement, reshuffled every epoch."""

    def __init__(self, ids: Sequence[int], batch_size: int, seed: int):
        self.ids = list(ids)
        self.batch_size = batch_size
        self.rng = random.Random(seed)

    def __iter__(self) -> Iterator[list[int]]:
        while True:
            order = list(self.ids)
            self.rng.shuffle(order)
            for i in range(0, len(order), self.batch_size):
                yield order[i:i + self.batch_size]


@dataclass
class Checkpoint:
    pipeline: str
    prompts: dict[str, str]
    best_val: float
    step: int
    sh: dict[str, list[dict[str, Any]]]
    usage: list[dict[str, Any]]
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_text(json.dumps(asdict(ckpt), indent=2, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CheckpointError(f"{path}: checkpoint is not a JSON object")
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {data.get('version')!r}, expected {CHECKPOINT_VERSION}")
    try:
        return Checkpoint(
            pipeline=str(data["pipeline"]),
            prompts={str(k): str(v) for k, v in data["prompts"].items()},
            best_val=float(data["best_val"]),
            step=int(data["step"]),
            sh={k: history_to_json(history_from_json(v)) for k, v in data["sh"].items()},
            usage=list(data["usage"]),
        )
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint: {exc}") from exc


def build_backends(config: TrainerConfig) -> Backends:
    ledger = UsageLedger()
    if config.backend == "scripted":
        script = config.script or str(data_path(DEFAULT_DATA[config.pipeline][1]))
        b = ScriptedBackend(load_script(script), ledger=ledger)
        return Backends(b, b, b, ledger)
    http = dict(config.http)
    common = {k: http[k] for k in ("endpoint", "api_key_env") if k in http}
    models = http.get("models", {})
    default_model = http.get("model", "gpt-4o-mini")
    made = {
        role: HTTPBackend(models.get(role, default_model), ledger=ledger, name=f"{role}:{models.get(role, default_model)}",
                          **common)
        for role in ("forward", "backward", "optimizer")
    }
    return Backends(made["forward"], made["backward"], made["optimizer"], ledger)


class Trainer:
    def __init__(self, config: TrainerConfig, backends: Backends | None = None,
                 pipeline: Pipeline | None = None):
        self.config = config
        self.backends = backends or build_backends(config)
        self.ledger = self.backends.ledger
        corpus = None
        if config.corpus_path:
            corpus = DocumentCorpus.from_jsonl(config.corpus_path)
        self.pipeline = pipeline or build_pipeline(config.pipeline, corpus=corpus,
                                                   gen_params=config.models.get("forward"))
        if config.metric is not None:
            if config.metric not in METRICS:
                raise ConfigError(f"unknown metric {config.metric!r}")
            self.pipeline.metric_id = self.pipeline.eval_metric_id = config.metric
        default_data = str(data_path(DEFAULT_DATA[config.pipeline][0]))
        self.train = load_samples(config.train_path or default_data)
        self.val = load_samples(config.val_path or default_data)
        self.test = load_samples(config.test_path or default_data)
        if not self.train:
            raise ConfigError("training set is empty")
        self.tau = config.error_threshold if config.error_threshold is not None else self.pipeline.default_tau
        self.engine = BackwardEngine(self.backends.backward, gen_params=dict(config.models.get("backward", {})))
        opt_kw = {}
        if config.constraint_text is not None:
            opt_kw["constraint_text"] = config.constraint_text or None
        self.opt_config = OptimizerConfig(in_context_examples=config.in_context_examples,
                                          sh_capacity=config.sh_capacity,
                                          gen_params=dict(config.models.get("optimizer", {})), **opt_kw)
        self.sampler = iter(BatchSampler(range(len(self.train)), config.batch_size, config.seed))
        self.step = 0
        self.best_val = 0.0
        self.best_step = 0
        self.best_prompts = self.pipeline.prompt_values()
        self.sh: dict[str, list[HistoryEntry]] = {}
        self.since_improvement = {p.name: 0 for p in self.pipeline.trainable()}
        self._carry: list[Sample] | None = None
        self._carry_count = 0
        self.mb_attempts = self.mb_passed = self.val_attempts = self.val_passed = 0

    # -- helpers ----------------------------------------------------------
    def evaluate(self, dataset: Sequence[Sample]) -> float:
        return validate(self.pipeline, dataset, self.backends.forward, self.ledger)

    def _improves(self, new: float, old: float) -> bool:
        return new > old if self.config.strict_improvement else new >= old

    def _targets(self, attempt: int) -> list[Parameter]:
        params = self.pipeline.trainable()
        if self.config.proposal_policy == "all" or not params:
            return params
        return [params[(self.step - 1 + attempt) % len(params)]]

    def start(self) -> tuple[float, float | None]:
        self.best_val = self.evaluate(self.val)
        start_test = self.evaluate(self.test) if self.test else None
        for p in self.pipeline.trainable():
            self.sh[p.name] = [HistoryEntry(p.data, self.best_val, 0)]
        return self.best_val, start_test

    def next_batch(self) -> tuple[list[Sample], bool]:
        if self._carry is not None:
            return self._carry, True
        return [self.train[i] for i in next(self.sampler)], False

    # -- one step ---------------------------------------------------------
    def train_step(self, batch: Sequence[Sample], carried: bool = False) -> StepReport:
        self.step += 1
        pipe = self.pipeline
        before = pipe.prompt_values()
        backward_before = self.ledger.requests(phase="backward")
        zero_grad(pipe.params.values())
        graph = ParameterGraph()
        with self.ledger.phase("forward"):
            losses = [pipe.forward(s, graph, self.backends.forward) for s in batch]
        mb_score = sum(pipe.eval_score(l) for l in losses) / len(losses)
        errors = [l.data_id for l in losses if l.score is None or l.score < self.tau]
        report = StepReport(self.step, [s.id for s in batch], carried, mb_score, errors, best_val=self.best_val)
        try:
            if not errors:
                report.skipped = True
            else:
                with self.ledger.phase("backward"):
                    actions = selective_backward(graph, losses, self.tau, self.engine)
                report.aborted_ids = sorted(k for k, v in actions.items() if v == "aborted")
                if set(errors) <= set(report.aborted_ids):
                    log.warning("step %d: backward failed for every error sample, no proposals", self.step)
                else:
                    self._propose_loop(graph, batch, mb_score, report)
        except BackendError as exc:
            log.error("step %d aborted: %s", self.step, exc)
            pipe.load_prompts(before)
            report.error = str(exc)
            report.accepted = False
        report.backward_requests = self.ledger.requests(phase="backward") - backward_before
        report.best_val = self.best_val
        report.usage = self.ledger.report()["by_phase"]
        if not report.accepted:
            for name in self.since_improvement:
                self.since_improvement[name] += 1
        if report.accepted or report.skipped or self._carry_count >= self.config.max_carry:
            self._carry, self._carry_count = None, 0
        else:
            self._carry, self._carry_count = list(batch), self._carry_count + 1
        zero_grad(pipe.params.values())
        return report

    def _propose_loop(self, graph: ParameterGraph, batch: Sequence[Sample], mb_score: float,
                      report: StepReport) -> None:
        pipe = self.pipeline
        ch: dict[str, list] = {p.name: [] for p in pipe.trainable()}
        for attempt in range(self.config.max_proposals):
            targets = self._targets(attempt)
            pr = ProposalReport([p.name for p in targets])
            report.proposals.append(pr)
            applied = []
            try:
                with self.ledger.phase("propose"):
                    for p in targets:
                        prop = propose(p, graph, self.sh[p.name], ch[p.name], self.since_improvement[p.name],
                                       self.backends.optimizer, self.opt_config)
                        applied.append((p, prop, apply_proposal(p, prop)))
            except ProposalFailed as exc:
                for p, _, tok in reversed(applied):
                    revert(p, tok)
                pr.error = str(exc)
                continue
            except BackendError:
                for p, _, tok in reversed(applied):
                    revert(p, tok)
                raise
            self.mb_attempts += 1
            report.minibatch_evaluations += 1
            with self.ledger.phase("validate"):
                new_mb = validate(pipe, batch, self.backends.forward)
            pr.minibatch_score = new_mb
            pr.minibatch_passed = self._improves(new_mb, mb_score)
            if pr.minibatch_passed:
                self.mb_passed += 1
                self.val_attempts += 1
                report.val_evaluations += 1
                pr.val_score = self.evaluate(self.val)
            for p, prop, _ in applied:
                self.sh[p.name], ch[p.name], ok = record_outcome(
                    self.sh[p.name], ch[p.name], prop, pr.minibatch_passed, pr.val_score,
                    step=self.step, best=self.best_val, strict=self.config.strict_improvement,
                    capacity=self.config.sh_capacity,
                )
                pr.accepted = ok
            if pr.accepted:
                self.val_passed += 1
                self.best_val = pr.val_score
                self.best_step = self.step
                self.best_prompts = pipe.prompt_values()
                for p, _, _ in applied:
                    self.since_improvement[p.name] = 0
                report.accepted = True
                if self.config.checkpoint_path:
                    save_checkpoint(self.config.checkpoint_path, self.checkpoint())
                return
            for p, _, tok in reversed(applied):
                revert(p, tok)

    # -- run ---------------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.pipeline.id, dict(self.best_prompts), self.best_val, self.best_step,
                          {k: history_to_json(v) for k, v in self.sh.items()}, self.ledger.to_entries())

    def run(self) -> RunReport:
        start_val, start_test = self.start()
        steps = []
        for _ in range(self.config.max_steps):
            batch, carried = self.next_batch()
            steps.append(self.train_step(batch, carried))
        self.pipeline.load_prompts(self.best_prompts)
        final_test = self.evaluate(self.test) if self.test else None
        if self.config.checkpoint_path:
            save_checkpoint(self.config.checkpoint_path, self.checkpoint())
        return RunReport(
            pipeline=self.pipeline.id,
            seed=self.config.seed,
            start_val=start_val,
            start_test=start_test,
            best_val=self.best_val,
            best_step=self.best_step,
            final_test=final_test,
            minibatch_pass_rate=self.mb_passed / self.mb_attempts if self.mb_attempts else None,
            validation_pass_rate=self.val_passed / self.val_attempts if self.val_attempts else None,
            best_prompts=dict(self.best_prompts),
            usage=self.ledger.report(),
            steps=steps,
        )


def run_training(config: TrainerConfig, backends: Backends | None = None) -> RunReport:
    return Trainer(config, backends).run()


def restore(trainer_or_pipeline: Trainer | Pipeline, ckpt: Checkpoint) -> None:
    pipe = trainer_or_pipeline.pipeline if isinstance(trainer_or_pipeline, Trainer) else trainer_or_pipeline
    if pipe.id != ckpt.pipeline:
        raise CheckpointError(f"checkpoint is for pipeline {ckpt.pipeline!r}, not {pipe.id!r}")
    pipe.load_prompts(ckpt.prompts)


