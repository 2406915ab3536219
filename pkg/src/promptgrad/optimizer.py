"""Gradient-driven prompt optimizer.

One backend call per proposal. The optimizer sees the target variable with its
peers, the other trainable variables of the system, the best past values (SH),
the values already rejected in this step (CH) and the accumulated feedback.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import yaml

from .backends import ModelBackend, ModelRequest
from .backward import render_gradient_block
from .components import GENERATOR
from .graph import Parameter, ParameterGraph, ParameterKind
from .templates import render_template

DEFAULT_CONSTRAINTS = (
    "YOU MUST ENSURE the new variable shares the same intent as the original variable.\n"
    "You can either rephrase the initial variable, or add more specific instructions based on the feedback.\n"
    "You can not change the variable to only fit on one sample if the batch size is larger than 1."
)

JSON_OUTPUT_FORMAT = """Your output should be formatted as a standard JSON instance with the following schema:
```
{
    "reasoning": "Why the variable is proposed this way (str) (required)",
    "proposed_variable": "The proposed variable (str) (required)"
}
```
-Make sure to always enclose the JSON output in triple backticks (```). Please do not add anything other than valid JSON output!
-Use double quotes for the keys and string values.
-DO NOT mistaken the "properties" and "type" in the schema as the actual fields in the JSON output.
-Follow the JSON formatting conventions."""

FORMAT_REMINDER = (
    "Your previous reply could not be parsed ({error}). Reply again with only a JSON object "
    'with the keys "reasoning" and "proposed_variable", enclosed in triple backticks.'
)

SH_CAPACITY = 5


class ProposalParseError(ValueError):
    pass


class NoFencedBlockError(ProposalParseError):
    pass


class MissingKeyError(ProposalParseError):
    pass


class MalformedPayloadError(ProposalParseError):
    pass


class ProposalFailed(Exception):
    """Both the proposal and its format reprompt were unparseable."""


class RevertError(Exception):
    pass


@dataclass
class HistoryEntry:
    value: str
    val_score: float
    step: int

    def render(self) -> str:
        return yaml.safe_dump({"value": self.value, "eval_score": round(self.val_score, 4)},
                              sort_keys=False, allow_unicode=True, width=10_000).strip()


@dataclass
class FailedProposal:
    value: str
    method: str
    reasoning: str = ""

    def render(self) -> str:
        return yaml.safe_dump({"value": self.value, "method": self.method},
                              sort_keys=False, allow_unicode=True, width=10_000).strip()


@dataclass
class Proposal:
    target_param: str
    reasoning: str
    proposed_variable: str

    def __post_init__(self) -> None:
        if not self.proposed_variable.strip():
            raise ValueError("proposed_variable must be non-empty")


@dataclass(frozen=True)
class RevertToken:
    param_id: str
    previous: str
    applied: str


@dataclass
class OptimizerConfig:
    constraint_text: str | None = DEFAULT_CONSTRAINTS
    in_context_examples: str | None = None
    instruction_to_optimizer: str | None = None
    sh_capacity: int = SH_CAPACITY
    gen_params: dict[str, Any] = field(default_factory=dict)


_FENCE = re.compile(r"```(?:json|JSON)?[ \t]*\n?(.*?)```", re.DOTALL)


def parse_proposal(raw: str) -> dict[str, str]:
    m = _FENCE.search(raw)
    if m is None:
        raise NoFencedBlockError("no fenced block in optimizer reply")
    try:
        obj = json.loads(m.group(1))
    except json.JSONDecodeError as exc:
        raise MalformedPayloadError(f"malformed JSON payload: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedPayloadError("fenced payload is not a JSON object")
    for key in ("reasoning", "proposed_variable"):
        if key not in obj:
            raise MissingKeyError(f"missing key {key!r}")
        if not isinstance(obj[key], str):
            raise MalformedPayloadError(f"key {key!r} must be a string")
    if not obj["proposed_variable"].strip():
        raise MalformedPayloadError("proposed_variable is empty")
    return {"reasoning": obj["reasoning"], "proposed_variable": obj["proposed_variable"]}


def peers_of(param: Parameter, graph: ParameterGraph) -> list[Parameter]:
    """Other prompt parameters feeding the same generator calls."""
    peers: dict[str, Parameter] = {}
    if param not in graph:
        return []
    for succ in graph.successors(param):
        if succ.trace.get("component_kind") != GENERATOR:
            continue
        for p in graph.predecessors(succ):
            if p is not param and p.kind in (ParameterKind.PROMPT, ParameterKind.DEMOS):
                peers.setdefault(p.id, p)
    return list(peers.values())


def system_variables(param: Parameter, graph: ParameterGraph, peers: Sequence[Parameter]) -> list[Parameter]:
    skip = {param.id, *(p.id for p in peers)}
    return [p for p in graph.trainable() if p.id not in skip]


def render_optimizer_prompt(
    param: Parameter,
    graph: ParameterGraph,
    sh: Sequence[HistoryEntry],
    ch: Sequence[FailedProposal],
    steps_since_improvement: int,
    config: OptimizerConfig | None = None,
) -> str:
    config = config or OptimizerConfig()
    peers = peers_of(param, graph)
    system_prompt = render_template(
        "optimizer_system_prompt",
        new_variable_start_tag="```",
        new_variable_end_tag="```",
        instruction_to_optimizer=config.instruction_to_optimizer,
    )
    return render_template(
        "text_grad_desc",
        optimizer_system_prompt=system_prompt + "\n" + JSON_OUTPUT_FORMAT,
        steps=steps_since_improvement,
        variable_and_peers_info=render_template("variable_and_peers_info", variable=param,
                                                peers=peers or None),
        system_variables=system_variables(param, graph, peers) or None,
        past_history=[h.render() for h in sh] or None,
        failed_proposals=[f.render() for f in ch] or None,
        best_score=round(sh[0].val_score, 4) if sh else None,
        variable_grad=render_gradient_block(param) or None,
        constraint_text=config.constraint_text,
        in_context_examples=config.in_context_examples,
        variable_desc=param.role_desc,
    )


def propose(
    param: Parameter,
    graph: ParameterGraph,
    sh: Sequence[HistoryEntry],
    ch: Sequence[FailedProposal],
    steps_since_improvement: int,
    backend: ModelBackend,
    config: OptimizerConfig | None = None,
) -> Proposal:
    if not param.requires_opt:
        raise ValueError(f"{param.name!r} is not trainable")
    config = config or OptimizerConfig()
    prompt = render_optimizer_prompt(param, graph, sh, ch, steps_since_improvement, config)
    reply = backend.complete(ModelRequest("optimizer", prompt, **config.gen_params)).text
    try:
        fields = parse_proposal(reply)
    except ProposalParseError as exc:
        retry = prompt + "\n" + FORMAT_REMINDER.format(error=exc)
        reply = backend.complete(ModelRequest("optimizer", retry, **config.gen_params)).text
        try:
            fields = parse_proposal(reply)
        except ProposalParseError as exc2:
            raise ProposalFailed(f"unparseable proposal for {param.name!r}: {exc2}") from exc2
    return Proposal(param.id, fields["reasoning"], fields["proposed_variable"])


def apply_proposal(param: Parameter, proposal: Proposal) -> RevertToken:
    if proposal.target_param != param.id:
        raise RevertError(f"proposal targets {proposal.target_param}, not {param.id}")
    token = RevertToken(param.id, param.data, proposal.proposed_variable)
    param.data = proposal.proposed_variable
    return token


def revert(param: Parameter, token: RevertToken) -> None:
    if token.param_id != param.id:
        raise RevertError(f"token belongs to {token.param_id}, not {param.id}")
    if param.data != token.applied:
        raise RevertError(f"stale revert token for {param.name!r}: value changed since apply")
    param.data = token.previous


def insert_history(sh: list[HistoryEntry], entry: HistoryEntry, capacity: int = SH_CAPACITY) -> list[HistoryEntry]:
    out = sorted([*sh, entry], key=lambda h: -h.val_score)
    return out[:capacity]


def record_outcome(
    sh: list[HistoryEntry],
    ch: list[FailedProposal],
    proposal: Proposal,
    minibatch_ok: bool,
    val_score: float | None,
    *,
    step: int = 0,
    best: float | None = None,
    strict: bool = True,
    capacity: int = SH_CAPACITY,
) -> tuple[list[HistoryEntry], list[FailedProposal], bool]:
    """Accepted iff the minibatch passed and ``val_score`` beats the best so far.

    ``best`` defaults to the head of SH.
    """
    if best is None and sh:
        best = sh[0].val_score
    improved = val_score is not None and (
        best is None or (val_score > best if strict else val_score >= best)
    )
    if minibatch_ok and improved:
        return insert_history(sh, HistoryEntry(proposal.proposed_variable, val_score, step), capacity), ch, True
    return list(sh), [*ch, FailedProposal(proposal.proposed_variable, proposal.reasoning, proposal.reasoning)], False


def history_to_json(sh: Sequence[HistoryEntry]) -> list[dict[str, Any]]:
    return [asdict(h) for h in sh]


def history_from_json(items: Sequence[dict[str, Any]]) -> list[HistoryEntry]:
    return [HistoryEntry(str(h["value"]), float(h["val_score"]), int(h["step"])) for h in items]
