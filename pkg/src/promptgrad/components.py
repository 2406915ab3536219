"""Traceable components: generator, lexical retriever, functional nodes, loss.

Each forward call adds exactly one OUTPUT (or LOSS_OUTPUT) parameter to the
graph and only edges into it. The producing component is recorded in the
parameter's ``trace`` so the backward engine can dispatch on it.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .backends import BackendError, ModelBackend, ModelRequest, UnscriptedRequestError
from .graph import OPTIMIZABLE_KINDS, GraphError, Parameter, ParameterGraph, ParameterKind

GENERATOR = "generator"
RETRIEVER = "retriever"
FUNCTIONAL = "functional"
LOSS = "loss"


# ---------------------------------------------------------------------------
# payloads


@dataclass
class GeneratorOutput:
    raw_text: str = ""
    parsed: Any = None
    usage: tuple[int, int] = (0, 0)
    error: str | None = None

    def __post_init__(self) -> None:
        if min(self.usage) < 0:
            raise ValueError("usage counts must be non-negative")


@dataclass
class RetrieverOutput:
    query: list[str]
    documents: list[str]
    doc_indices: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.doc_indices and len(self.doc_indices) != len(self.documents):
            raise ValueError("doc_indices must align with documents")

    def render(self) -> str:
        return "\n".join(f"[{i}] {d}" for i, d in enumerate(self.documents, 1))


@dataclass(frozen=True)
class EvalScore:
    value: float
    metric_name: str


@dataclass
class LossRecord:
    """The textual loss: evaluation description, prediction, target and score."""

    eval_desc: str
    pred: str
    ground_truth: str
    score: float
    metric_name: str
    question: str = ""


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str

    def as_text(self) -> str:
        return f"{self.title} | {self.text}"


class DocumentCorpus:
    def __init__(self, documents: Iterable[Document]):
        self.documents = list(documents)
        self._tokens = [frozenset(content_tokens(d.as_text())) for d in self.documents]

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "DocumentCorpus":
        docs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    docs.append(Document(str(d["id"]), d.get("title", ""), d["text"]))
        return cls(docs)

    def __len__(self) -> int:
        return len(self.documents)

    def rank(self, query: str) -> list[tuple[int, int]]:
        """(score, index) pairs, best first; ties go to the lower index."""
        q = set(content_tokens(query))
        scored = [(len(q & toks), i) for i, toks in enumerate(self._tokens)]
        scored.sort(key=lambda si: (-si[0], si[1]))
        return scored


# ---------------------------------------------------------------------------
# metrics

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")
_STOPWORDS = frozenset(
    "a an the of in on at to for by with from and or is was are were be been who what which "
    "when where whose whom how did does do that this as it its".split()
)


def _normalize_base(text: str) -> str:
    text = "".join(ch for ch in text.lower() if ch not in _PUNCT)
    return " ".join(text.split())


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    text = "".join(ch for ch in text.lower() if ch not in _PUNCT)
    return " ".join(_ARTICLES.sub(" ", text).split())


def exact_match(pred: str, gt: str) -> EvalScore:
    return EvalScore(float(normalize_answer(pred) == normalize_answer(gt)), "exact_match")


def f1_score(pred: str, gt: str) -> EvalScore:
    # Articles stay in: "the Chief of Protocol" vs "Chief of Protocol" scores 6/7.
    p, g = _normalize_base(pred).split(), _normalize_base(gt).split()
    if not p and not g:
        return EvalScore(1.0, "f1")
    if not p or not g:
        return EvalScore(0.0, "f1")
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return EvalScore(0.0, "f1")
    precision, recall = common / len(p), common / len(g)
    return EvalScore(2 * precision * recall / (precision + recall), "f1")


METRICS: dict[str, Callable[[str, str], EvalScore]] = {
    "exact_match": exact_match,
    "em": exact_match,
    "f1": f1_score,
}

METRIC_DESCRIPTIONS = {
    "exact_match": "exact_match: 1 if the normalized prediction equals the normalized ground truth, else 0",
    "f1": "f1: token-level F1 between the prediction and the ground truth, in [0, 1]",
}


def content_tokens(text: str) -> list[str]:
    return [t for t in re.findall(r"\w+", text.lower()) if t not in _STOPWORDS]


# ---------------------------------------------------------------------------
# answer extraction


def extract_after_answer(text: str) -> str:
    """Value after the last ``Answer:`` marker, else the last non-empty line."""
    matches = re.findall(r"answer\s*:\s*(.+)", text, flags=re.IGNORECASE)
    if matches:
        return matches[-1].strip().strip("*").strip()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    return lines[-1] if lines else ""


def extract_json_answer(text: str) -> str:
    m = re.search(r"```(?:json)?\s*(.*?)```", text, flags=re.DOTALL)
    body = m.group(1) if m else text
    try:
        obj = json.loads(body)
    except json.JSONDecodeError:
        return extract_after_answer(text)
    if isinstance(obj, dict) and "answer" in obj:
        return str(obj["answer"])
    return extract_after_answer(text)


EXTRACTORS: dict[str, Callable[[str], str]] = {
    "answer_line": extract_after_answer,
    "json_answer": extract_json_answer,
    "identity": lambda s: s.strip(),
}


# ---------------------------------------------------------------------------
# forward ops


def _output_name(component: str, data_id: str | None, call_index: int) -> str:
    return f"{component}#{data_id}#{call_index}"


def _new_output(graph: ParameterGraph, component: str, component_kind: str, role_desc: str,
                data: str, payload: Any, data_id: str | None, call_index: int,
                preds: Sequence[Parameter], kind: ParameterKind = ParameterKind.OUTPUT,
                **trace: Any) -> Parameter:
    if call_index < 1:
        raise ValueError("call_index must be >= 1")
    if not preds:
        raise GraphError(f"{component} output needs at least one predecessor")
    out = graph.create_parameter(
        kind,
        _output_name(component, data_id, call_index),
        role_desc=role_desc,
        data=data,
        payload=payload,
        trace={"component": component, "component_kind": component_kind,
               "data_id": data_id, "call_index": call_index, **trace},
    )
    for p in preds:
        if p not in graph:
            graph.add(p)
        graph.connect(p, out)
    return out


def render_generator_prompt(prompt_params: Sequence[Parameter], inputs: Sequence[Parameter]) -> tuple[str, str]:
    """Return (full prompt, rendered input) for a generator call."""
    system = "\n\n".join(p.data for p in prompt_params if p.data)
    if len(inputs) == 1:
        user = inputs[0].data
    else:
        user = "\n".join(f"{p.trace.get('input_key', p.name)}: {p.data}" for p in inputs)
    text = f"<START_OF_SYSTEM_PROMPT>\n{system}\n<END_OF_SYSTEM_PROMPT>\n<START_OF_USER>\n{user}\n<END_OF_USER>"
    return text, user


def generator_forward(
    prompt_params: Sequence[Parameter],
    input_param: Parameter | Sequence[Parameter],
    backend: ModelBackend,
    graph: ParameterGraph,
    data_id: str | None,
    call_index: int = 1,
    *,
    name: str = "generator",
    role_desc: str = "Output of the LLM generator",
    parser: Callable[[str], Any] | None = None,
    gen_params: dict[str, Any] | None = None,
) -> Parameter:
    """Render peers plus input, call the forward model, return the OUTPUT node."""
    inputs = [input_param] if isinstance(input_param, Parameter) else list(input_param)
    seen = set()
    for p in prompt_params:
        if p.kind not in (ParameterKind.PROMPT, ParameterKind.DEMOS):
            raise GraphError(f"generator peer {p.name!r} must be a PROMPT or DEMOS parameter")
        if p.id in seen:
            raise GraphError(f"generator peer {p.name!r} passed twice")
        seen.add(p.id)
    prompt, user = render_generator_prompt(prompt_params, inputs)
    request = ModelRequest("forward", prompt, **(gen_params or {}))
    try:
        resp = backend.complete(request)
    except UnscriptedRequestError:
        raise
    except BackendError as exc:
        result = GeneratorOutput(error=str(exc))
    else:
        result = GeneratorOutput(resp.text, usage=(resp.usage.prompt_tokens, resp.usage.completion_tokens))
        if parser is not None:
            try:
                result.parsed = parser(resp.text)
            except Exception as exc:  # parser bugs surface as output errors
                result.error = f"parse error: {exc}"
    return _new_output(graph, name, GENERATOR, role_desc, result.raw_text, result, data_id, call_index,
                       [*prompt_params, *inputs], input_value=user)


def retriever_forward(
    query_param: Parameter,
    corpus: DocumentCorpus,
    top_k: Parameter,
    graph: ParameterGraph,
    data_id: str | None,
    call_index: int = 1,
    *,
    name: str = "retriever",
    role_desc: str = "Documents retrieved for the query",
    query_text: str | None = None,
) -> Parameter:
    if len(corpus) == 0:
        raise ValueError("cannot retrieve from an empty corpus")
    if top_k.kind is not ParameterKind.HYPERPARAM:
        raise GraphError("top_k must be a HYPERPARAM parameter")
    try:
        k = int(str(top_k.data).strip())
    except ValueError:
        raise ValueError(f"top_k is not an integer: {top_k.data!r}") from None
    if not 1 <= k <= len(corpus):
        raise ValueError(f"top_k must be in 1..{len(corpus)}, got {k}")
    query = (query_text if query_text is not None else query_param.data).strip()
    ranked = corpus.rank(query)[:k]
    idx = [i for _, i in ranked]
    result = RetrieverOutput([query], [corpus.documents[i].as_text() for i in idx], idx)
    return _new_output(graph, name, RETRIEVER, role_desc, result.render(), result, data_id, call_index,
                       [query_param, top_k],
                       component_desc="Lexical retriever: ranks corpus documents by token overlap with the query and returns the top_k.")


def functional_forward(
    fn: Callable[..., Any],
    inputs: Sequence[Parameter],
    graph: ParameterGraph,
    data_id: str | None,
    call_index: int = 1,
    *,
    name: str,
    role_desc: str,
    component_desc: str = "",
    render: Callable[[Any], str] | None = None,
) -> Parameter:
    """Apply ``fn`` to the predecessors' payloads (or data when no payload)."""
    args = [p.payload if p.payload is not None else p.data for p in inputs]
    value = fn(*args)
    if render is not None:
        text = render(value)
    elif hasattr(value, "render"):
        text = value.render()
    else:
        text = value if isinstance(value, str) else json.dumps(value, default=str)
    return _new_output(graph, name, FUNCTIONAL, role_desc, text, value, data_id, call_index, list(inputs),
                       component_desc=component_desc or (fn.__doc__ or name).strip())


def dedupe(seq: Iterable[Any]) -> list[Any]:
    seen: set = set()
    return [x for x in seq if not (x in seen or seen.add(x))]


def _combine(a: RetrieverOutput, b: RetrieverOutput) -> RetrieverOutput:
    """Combine two retrieved document lists, dropping duplicates (first-seen order)."""
    if not isinstance(a, RetrieverOutput) or not isinstance(b, RetrieverOutput):
        raise TypeError("combine_lists expects two RetrieverOutput values")
    return RetrieverOutput(a.query + b.query, dedupe(a.documents + b.documents))


def combine_lists(ctx1: Parameter, ctx2: Parameter, graph: ParameterGraph, data_id: str | None,
                  *, name: str = "combine", call_index: int = 1) -> Parameter:
    for p in (ctx1, ctx2):
        if not isinstance(p.payload, RetrieverOutput):
            raise TypeError(f"{p.name!r} does not hold a RetrieverOutput")
    return functional_forward(_combine, [ctx1, ctx2], graph, data_id, call_index, name=name,
                              role_desc="Combined, deduplicated context from both retrieval hops")


def loss_forward(
    eval_desc: str,
    pred_param: Parameter,
    ground_truth: str,
    metric: Callable[[str, str], EvalScore],
    graph: ParameterGraph,
    data_id: str | None,
    *,
    extract: Callable[[str], str] | None = None,
    question: str = "",
    name: str = "loss",
) -> Parameter:
    pred = extract(pred_param.data) if extract else pred_param.data
    score = metric(pred, ground_truth)
    record = LossRecord(eval_desc, pred, ground_truth, score.value, score.metric_name, question)
    loss = _new_output(graph, name, LOSS, "Evaluation score of the prediction", f"{score.value}", record,
                       data_id, 1, [pred_param], kind=ParameterKind.LOSS_OUTPUT)
    loss.score = score.value
    return loss


def loss_record_dict(loss: Parameter) -> dict[str, Any]:
    return asdict(loss.payload)


def is_prompt_kind(p: Parameter) -> bool:
    return p.kind in OPTIMIZABLE_KINDS
