"""Textual backpropagation over a traced :class:`ParameterGraph`.

Production rules:

* loss node: one backward-engine call turns the textual loss into feedback for
  the prediction;
* generator output: one call per incoming gradient, feedback for every
  receiving predecessor at once (peers are handled jointly);
* functional output: verbatim pass-through with one predecessor, otherwise
  one call per incoming gradient with per-predecessor attribution;
* skip edges copy a node's gradients verbatim to their target.

A predecessor receives feedback when it is trainable or carries data between
components (INPUT/OUTPUT). Fixed prompts and hyperparameters receive none.
"""

from __future__ import annotations

import logging
import random
import re
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .backends import BackendError, ModelBackend, ModelRequest, UnscriptedRequestError
from .components import FUNCTIONAL, GENERATOR, LOSS, RETRIEVER, LossRecord
from .graph import Gradient, GradientContext, Parameter, ParameterGraph, ParameterKind
from .templates import render_template

log = logging.getLogger(__name__)

CYCLE_CUE = (
    "[Cycle]: this variable is called multiple times in the compound system; "
    "its feedback below is listed in call order (t = 1, 2, ...)."
)

PEER_FORMAT = """Give feedback to each variable separately, one block per variable, in this exact format:
{blocks}
Use the variable names exactly as written."""


@dataclass(frozen=True)
class BackwardRequest:
    template_id: str
    bindings: dict[str, Any]
    target_params: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.target_params:
            raise ValueError("backward request needs at least one target")


@dataclass
class RetryPolicy:
    retries: int = 2
    backoff: float = 0.05
    seed: int | None = 0

    def call(self, backend: ModelBackend, request: ModelRequest) -> str:
        rng = random.Random(self.seed)
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt and self.backoff:
                time.sleep(self.backoff * 2 ** (attempt - 1) * (0.5 + rng.random()))
            try:
                return backend.complete(request).text
            except UnscriptedRequestError:
                raise
            except BackendError as exc:
                last = exc
                log.warning("backward call failed (attempt %d): %s", attempt + 1, exc)
        assert last is not None
        raise last


@dataclass
class BackwardEngine:
    backend: ModelBackend
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    gen_params: dict[str, Any] = field(default_factory=dict)
    instruction_to_backward_engine: str | None = None

    def query(self, text: str) -> str:
        return self.retry.call(self.backend, ModelRequest("backward", text, **self.gen_params))


def receives_feedback(p: Parameter) -> bool:
    return p.requires_opt or p.kind in (ParameterKind.INPUT, ParameterKind.OUTPUT)


# ---------------------------------------------------------------------------
# rendering helpers


def peer_output_format(targets: Sequence[Parameter]) -> str | None:
    if len(targets) < 2:
        return None
    blocks = "\n".join(
        f'<VARIABLE_FEEDBACK name="{t.name}">feedback for {t.name}</VARIABLE_FEEDBACK>' for t in targets
    )
    return PEER_FORMAT.format(blocks=blocks)


_BLOCK = re.compile(r'<VARIABLE_FEEDBACK name="([^"]+)">(.*?)</VARIABLE_FEEDBACK>', re.DOTALL)


def split_peer_feedback(text: str, targets: Sequence[Parameter]) -> dict[str, str]:
    """Per-target feedback; targets without a block get the whole response."""
    if len(targets) < 2:
        return {t.name: text.strip() for t in targets}
    found = {name: body.strip() for name, body in _BLOCK.findall(text)}
    return {t.name: found.get(t.name, text.strip()) for t in targets}


def _variable_info(variable: Parameter, peers: Sequence[Parameter]) -> str:
    return render_template("variable_and_peers_info", variable=variable, peers=list(peers) or None)


def render_llm_conversation(output: Parameter) -> str:
    return render_template(
        "llm_conversation",
        input_value=output.trace.get("input_value", ""),
        llm_output=output.data or (getattr(output.payload, "error", None) or ""),
    )


def render_gradient_block(param: Parameter) -> str:
    """Context and feedback grouped by data id, each group in call order."""
    grads = param.sorted_gradients()
    if not grads:
        return ""
    groups: dict[str, list[Gradient]] = {}
    for g in grads:
        groups.setdefault(g.data_id, []).append(g)
    out: list[str] = []
    for data_id, gs in groups.items():
        out.append(f"<DATA_ID: {data_id}>")
        if len({g.call_index for g in gs}) > 1:
            out.append(CYCLE_CUE)
        for g in gs:
            head = f"<CALL t={g.call_index}"
            if g.score is not None:
                head += f" score={g.score}"
            out.append(head + ">")
            if g.context is not None:
                out.append(f"<CONVERSATION>{g.context.conversation}</CONVERSATION>")
                out.append(f"<OUTPUT_ROLE>{g.context.response_desc}</OUTPUT_ROLE>")
            out.append(f"<FEEDBACK>{g.content}</FEEDBACK>")
            out.append("</CALL>")
        out.append(f"</DATA_ID: {data_id}>")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# production rules


def render_loss_request(loss: Parameter, pred: Parameter) -> BackwardRequest:
    rec: LossRecord = loss.payload
    view = {"role_desc": pred.role_desc, "prompt_data": pred.data, "eval_input": rec.pred}
    gt_view = {"role_desc": "The ground truth (target) answer", "prompt_data": rec.ground_truth,
               "eval_input": rec.ground_truth}
    conversation = render_template(
        "loss_conversation",
        system_question=rec.question,
        eval_fn_desc=rec.eval_desc,
        inputs={"y": (view, "str"), "y_gt": (gt_view, "str")},
        response_value=rec.score,
        metadata=None,
    )
    conv = render_template("loss_conversation_start_instruction", variable=pred, conversation_str=conversation)
    bindings = {
        "conversation_sec": conv,
        "objective_instruction_sec": render_template("objective_instruction_base"),
        "output_format_str": None,
    }
    return BackwardRequest("feedback_engine", bindings, (pred.id,))


def backward_loss(loss: Parameter, engine: BackwardEngine | ModelBackend, graph: ParameterGraph) -> Gradient:
    engine = _as_engine(engine)
    if loss.kind is not ParameterKind.LOSS_OUTPUT or not isinstance(loss.payload, LossRecord):
        raise TypeError(f"{loss.name!r} is not a scored loss node")
    (pred,) = graph.predecessors(loss)
    req = render_loss_request(loss, pred)
    text = engine.query(render_template(req.template_id, req.bindings))
    ctx = GradientContext(req.bindings["conversation_sec"], loss.role_desc, pred.role_desc)
    g = Gradient(loss.data_id, loss.call_index, loss.id, text, ctx, loss.score)
    graph.record_gradient(pred, g)
    return g


def _generator_request(output: Parameter, preds: Sequence[Parameter], targets: Sequence[Parameter],
                       g: Gradient, engine: BackwardEngine) -> BackwardRequest:
    prompt_preds = [p for p in preds if p.kind in (ParameterKind.PROMPT, ParameterKind.DEMOS)]
    variable = targets[0]
    peers = [p for p in prompt_preds if p is not variable]
    conversation = render_llm_conversation(output)
    conv = render_template(
        "conversation_start_instruction_chain",
        variable_and_peers_info=_variable_info(variable, peers),
        system_variables=None,
        conversation_str=conversation,
    )
    objective = render_template(
        "objective_instruction_chain_generator",
        response_desc=output.role_desc,
        response_gradient=g.content,
        instruction_to_backward_engine=engine.instruction_to_backward_engine,
    )
    bindings = {
        "conversation_sec": conv,
        "objective_instruction_sec": objective,
        "output_format_str": peer_output_format(targets),
        "_conversation": conversation,
    }
    return BackwardRequest("feedback_engine", bindings, tuple(t.id for t in targets))


def _component_request(output: Parameter, preds: Sequence[Parameter], targets: Sequence[Parameter],
                       g: Gradient) -> BackwardRequest:
    variable = targets[0]
    conversation = render_template(
        "grad_component_conversation",
        component_desc=output.trace.get("component_desc", output.trace.get("component", "")),
        inputs={p.name: p for p in preds},
        response_value=output.data,
        metadata=None,
    )
    conv = render_template(
        "conversation_start_instruction_chain",
        variable_and_peers_info=_variable_info(variable, [p for p in preds if p is not variable]),
        system_variables=None,
        conversation_str=conversation,
    )
    objective = render_template(
        "objective_instruction_chain_component",
        response_name=output.name,
        response_desc=output.role_desc,
        response_gradient=g.content,
    )
    bindings = {
        "conversation_sec": conv,
        "objective_instruction_sec": objective,
        "output_format_str": peer_output_format(targets),
        "_conversation": conversation,
    }
    return BackwardRequest("feedback_engine", bindings, tuple(t.id for t in targets))


def _engine_gradients(output: Parameter, graph: ParameterGraph, engine: BackwardEngine,
                      build) -> list[Gradient]:
    preds = graph.predecessors(output)
    targets = [p for p in preds if receives_feedback(p)]
    produced: list[Gradient] = []
    if not targets:
        return produced
    for g in output.sorted_gradients():
        req = build(output, preds, targets, g)
        bindings = {k: v for k, v in req.bindings.items() if not k.startswith("_")}
        text = engine.query(render_template(req.template_id, bindings))
        per_target = split_peer_feedback(text, targets)
        for t in targets:
            ctx = GradientContext(req.bindings["_conversation"], output.role_desc, t.role_desc)
            new = Gradient(g.data_id, output.call_index, output.id, per_target[t.name], ctx, g.score)
            graph.record_gradient(t, new)
            produced.append(new)
    return produced


def backward_generator(output: Parameter, engine: BackwardEngine | ModelBackend,
                       graph: ParameterGraph) -> list[Gradient]:
    engine = _as_engine(engine)
    return _engine_gradients(output, graph, engine,
                             lambda o, p, t, g: _generator_request(o, p, t, g, engine))


def pass_through(output: Parameter, graph: ParameterGraph, targets: Iterable[Parameter],
                 retag: bool = False) -> list[Gradient]:
    """Copy gradients verbatim; ``retag`` stamps them with this node's call index."""
    produced = []
    for t in targets:
        for g in output.sorted_gradients():
            t_index = output.call_index if retag else g.call_index
            new = Gradient(g.data_id, t_index, output.id, g.content, g.context, g.score)
            graph.record_gradient(t, new)
            produced.append(new)
    return produced


def backward_functional(output: Parameter, engine: BackwardEngine | ModelBackend,
                        graph: ParameterGraph) -> list[Gradient]:
    preds = graph.predecessors(output)
    if len(preds) == 1:
        return pass_through(output, graph, [p for p in preds if receives_feedback(p)])
    return _engine_gradients(output, graph, _as_engine(engine), _component_request)


def accumulate_cyclic(param: Parameter, incoming: Iterable[tuple[str, int, Gradient]]) -> None:
    """Record gradients arriving in any order; stored order becomes t-ascending per data id."""
    for data_id, call_index, g in incoming:
        if g.data_id != data_id or g.call_index != call_index:
            raise ValueError("incoming tuple does not match its gradient")
        param.record_gradient(g)
    with param._lock:
        param.gradients = param.sorted_gradients()


def apply_skip_edges(node: Parameter, graph: ParameterGraph) -> list[Gradient]:
    return pass_through(node, graph, graph.skip_targets(node))


def _as_engine(engine: BackwardEngine | ModelBackend) -> BackwardEngine:
    return engine if isinstance(engine, BackwardEngine) else BackwardEngine(engine)


# ---------------------------------------------------------------------------
# driver


@dataclass
class BackwardResult:
    aborted: dict[str, str] = field(default_factory=dict)
    nodes_visited: int = 0


def run_backward(graph: ParameterGraph, engine: BackwardEngine | ModelBackend, *,
                 manual_ids: Iterable[str] = ()) -> BackwardResult:
    """Propagate feedback from every loss node back to the trainable prompts.

    Samples in ``manual_ids`` already carry a fixed note on their final output;
    it is passed through to ancestors without any engine call.
    """
    engine = _as_engine(engine)
    manual = set(manual_ids)
    result = BackwardResult()
    order = graph.reverse_topological_order()
    for node in order:
        data_id = node.data_id
        if data_id in result.aborted:
            continue
        result.nodes_visited += 1
        kind = node.trace.get("component_kind")
        try:
            if data_id in manual and kind in (GENERATOR, RETRIEVER, FUNCTIONAL):
                preds = graph.predecessors(node)
                pass_through(node, graph, [p for p in preds if receives_feedback(p)],
                             retag=kind != FUNCTIONAL or len(preds) > 1)
            elif kind == LOSS:
                if data_id not in manual:
                    backward_loss(node, engine, graph)
            elif kind == GENERATOR:
                backward_generator(node, engine, graph)
            elif kind in (RETRIEVER, FUNCTIONAL):
                backward_functional(node, engine, graph)
            apply_skip_edges(node, graph)
        except UnscriptedRequestError:
            raise
        except BackendError as exc:
            log.warning("aborting backward for sample %s: %s", data_id, exc)
            result.aborted[data_id] = str(exc)
            for p in graph:
                p.drop_gradients(data_id)
    for p in graph.trainable():
        with p._lock:
            p.gradients = p.sorted_gradients()
    return result
