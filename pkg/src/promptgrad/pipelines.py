"""Toy-scale versions of the benchmark pipeline shapes.

=====================  ========================================  =============
pipeline id            components                                LLM calls
=====================  ========================================  =============
object_count           generator                                 1
trec                   generator                                 1
vanilla_rag            retriever, generator                      1
multihop_rag           2 query generators, retriever, generator  3
multihop_rag_cycle     query generator (x2), retriever, gen.     2 + 1
agentic_rag            planner loop, retriever tool, finish      <= 4
=====================  ========================================  =============
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .backends import ModelBackend
from .components import (
    EXTRACTORS,
    METRIC_DESCRIPTIONS,
    METRICS,
    DocumentCorpus,
    RetrieverOutput,
    combine_lists,
    functional_forward,
    generator_forward,
    loss_forward,
    retriever_forward,
)
from .graph import Parameter, ParameterGraph, ParameterKind

PIPELINE_IDS = (
    "object_count",
    "trec",
    "vanilla_rag",
    "multihop_rag",
    "multihop_rag_cycle",
    "agentic_rag",
)

MAX_AGENT_STEPS = 4

OBJECT_COUNT_PROMPT = (
    "You will answer a reasoning question. Think step by step. The last line of your response "
    "should be of the following format: 'Answer: $VALUE' where VALUE is a numerical value."
)

TREC_PROMPT = (
    "Classify the question by the type of answer it expects. The coarse classes are ABBR (abbreviation), "
    "ENTY (entity), DESC (description), HUM (human), LOC (location) and NUM (numeric value). Think step by step."
)
TREC_FORMAT = (
    "The last line of your response should be of the following format: 'Answer: $CLASS' "
    "where CLASS is one of ABBR, ENTY, DESC, HUM, LOC, NUM."
)

QUERY_PROMPT = "Write a simple search query that will help answer a complex question."
QUERY_FORMAT = (
    "You will receive a question and possibly context gathered so far. "
    "Reply with only the search query."
)
ANSWER_PROMPT = "Answer questions with short factoid answers."
ANSWER_FORMAT = (
    "You will receive a question and context documents. Think step by step, then give the final "
    "answer on the last line as 'Answer: $ANSWER'."
)

PLANNER_PROMPT = (
    "You answer a question by planning tool calls step by step. Use the retriever to look up facts, "
    "then call finish with the answer."
)
FINISH_DOC = "finish(answer: str): Finish the task with the final short answer."
TOOLS_SPEC = (
    "Tools:\nretrieve(query: str): search the document corpus and return the top documents.\n"
    "Reply with a JSON object in triple backticks with keys thought, name, args, kwargs."
)

DATA_DIR = resources.files("promptgrad").joinpath("data")


@dataclass(frozen=True)
class Sample:
    id: str
    question: str
    answer: str


def load_samples(path: str | Path) -> list[Sample]:
    samples, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            sid = str(d["id"])
            if sid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate sample id {sid!r}")
            seen.add(sid)
            samples.append(Sample(sid, d["question"], str(d["answer"])))
    return samples


def data_path(name: str) -> Path:
    return Path(str(DATA_DIR.joinpath(name)))


# ---------------------------------------------------------------------------
# agent actions


@dataclass
class Action:
    thought: str = ""
    name: str | None = None
    args: list[Any] = field(default_factory=list)
    kwargs: dict[str, Any] = field(default_factory=dict)
    error: str | None = None

    def arg(self, key: str) -> str:
        if key in self.kwargs:
            return str(self.kwargs[key])
        return str(self.args[0]) if self.args else ""

    def describe(self) -> str:
        if self.error:
            return "invalid action"
        parts = [repr(a) for a in self.args] + [f"{k}={v!r}" for k, v in self.kwargs.items()]
        return f"{self.name}({', '.join(parts)})"


def agent_step(planner_output: str) -> Action:
    """Parse one planner reply into an :class:`Action`; problems become ``error``."""
    m = re.search(r"```(?:json)?\s*(.*?)```", planner_output, flags=re.DOTALL)
    if m is None:
        return Action(error="Error: planner output has no fenced JSON block")
    try:
        obj = json.loads(m.group(1))
    except json.JSONDecodeError as exc:
        return Action(error=f"Error: malformed planner JSON: {exc}")
    if not isinstance(obj, dict) or "name" not in obj:
        return Action(error="Error: planner JSON needs a 'name' field")
    args = obj.get("args") or []
    kwargs = obj.get("kwargs") or {}
    if not isinstance(args, list) or not isinstance(kwargs, dict):
        return Action(error="Error: 'args' must be a list and 'kwargs' an object")
    return Action(str(obj.get("thought", "")), str(obj["name"]), args, kwargs)


# ---------------------------------------------------------------------------
# pipelines


class Pipeline:
    id: str = ""
    metric_id: str = "exact_match"
    eval_metric_id: str = "exact_match"
    extractor: str = "answer_line"
    llm_calls: int = 1

    def __init__(self, corpus: DocumentCorpus | None = None, gen_params: dict[str, Any] | None = None):
        self.corpus = corpus
        self.gen_params = dict(gen_params or {})
        self.params: dict[str, Parameter] = {}
        self._build_params()

    # hooks -------------------------------------------------------------
    def _build_params(self) -> None:
        raise NotImplementedError

    def _predict(self, sample: Sample, question: Parameter, graph: ParameterGraph,
                 backend: ModelBackend) -> Parameter:
        raise NotImplementedError

    # shared ------------------------------------------------------------
    def _param(self, kind: ParameterKind, name: str, role_desc: str, data: str, requires_opt: bool) -> Parameter:
        p = Parameter(name=name, kind=kind, role_desc=role_desc, data=data, requires_opt=requires_opt)
        self.params[name] = p
        return p

    @property
    def default_tau(self) -> float:
        return 1.0 if self.metric_id in ("exact_match", "em") else 0.5

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.requires_opt]

    def prompt_values(self) -> dict[str, str]:
        return {name: p.data for name, p in self.params.items() if p.requires_opt}

    def load_prompts(self, values: dict[str, str]) -> None:
        for name, value in values.items():
            if name not in self.params:
                raise KeyError(f"pipeline {self.id} has no parameter {name!r}")
            self.params[name].data = value

    def _gen(self, peers: list[Parameter], inputs, graph, backend, data_id, call_index=1, **kw) -> Parameter:
        return generator_forward(peers, inputs, backend, graph, data_id, call_index,
                                 gen_params=self.gen_params, **kw)

    def forward(self, sample: Sample, graph: ParameterGraph, backend: ModelBackend) -> Parameter:
        """Trace one sample and return its LOSS_OUTPUT node."""
        for p in self.params.values():
            graph.add(p)
        question = graph.create_parameter(
            ParameterKind.INPUT, f"question#{sample.id}", "The question to answer", sample.question,
            trace={"data_id": sample.id, "input_key": "question"},
        )
        final = self._predict(sample, question, graph, backend)
        metric = self.metric_id
        return loss_forward(
            METRIC_DESCRIPTIONS.get(metric, metric), final, sample.answer, METRICS[metric], graph, sample.id,
            extract=EXTRACTORS[self.extractor], question=sample.question,
        )

    def eval_score(self, loss: Parameter) -> float:
        rec = loss.payload
        if self.eval_metric_id == self.metric_id:
            return rec.score
        return METRICS[self.eval_metric_id](rec.pred, rec.ground_truth).value


class ObjectCount(Pipeline):
    id = "object_count"

    def _build_params(self) -> None:
        self._param(ParameterKind.PROMPT, "task_instruction",
                    "Task instruction for the language model on how to answer the question",
                    OBJECT_COUNT_PROMPT, True)
        self._param(ParameterKind.DEMOS, "few_shot_demos", "Few-shot examples for the language model",
                    "", False)

    def _predict(self, sample, question, graph, backend):
        peers = [self.params["task_instruction"], self.params["few_shot_demos"]]
        return self._gen(peers, question, graph, backend, sample.id, name="answer_generator",
                         role_desc="The LLM's step-by-step answer ending in 'Answer: $VALUE'")


class Trec(Pipeline):
    id = "trec"

    def _build_params(self) -> None:
        self._param(ParameterKind.PROMPT, "task_instruction",
                    "Task instruction describing the classes to choose from", TREC_PROMPT, True)
        self._param(ParameterKind.PROMPT, "output_format", "Output format requirement", TREC_FORMAT, False)

    def _predict(self, sample, question, graph, backend):
        peers = [self.params["task_instruction"], self.params["output_format"]]
        return self._gen(peers, question, graph, backend, sample.id, name="classifier",
                         role_desc="The predicted question class ending in 'Answer: $CLASS'")


class _RagBase(Pipeline):
    metric_id = "f1"
    eval_metric_id = "exact_match"
    top_k = "2"

    def __init__(self, corpus: DocumentCorpus | None = None, gen_params: dict[str, Any] | None = None):
        super().__init__(corpus or DocumentCorpus.from_jsonl(data_path("corpus.jsonl")), gen_params)

    def _answer_params(self) -> None:
        self._param(ParameterKind.PROMPT, "answer_instruction",
                    "Task instruction for the final answer generator", ANSWER_PROMPT, True)
        self._param(ParameterKind.PROMPT, "answer_format", "Output format for the final answer",
                    ANSWER_FORMAT, False)
        self._param(ParameterKind.HYPERPARAM, "top_k", "Number of documents to retrieve", self.top_k, False)

    def _query_params(self, name: str) -> None:
        self._param(ParameterKind.PROMPT, name,
                    "Instruction for the query generator that writes a retrieval query", QUERY_PROMPT, True)

    def _answer(self, sample, question, context, graph, backend):
        context.trace["input_key"] = "context"
        peers = [self.params["answer_instruction"], self.params["answer_format"]]
        return self._gen(peers, [question, context], graph, backend, sample.id, name="answer_generator",
                         role_desc="The final answer ending in 'Answer: $ANSWER'")

    def _hop_input(self, sample, question, context, graph, call_index):
        return graph.create_parameter(
            ParameterKind.INPUT, f"query_input#{sample.id}#{call_index}",
            "The question plus the context retrieved so far",
            f"{question.data}\ncontext:\n{context.data}",
            trace={"data_id": sample.id, "call_index": call_index, "input_key": "question"},
        )


class VanillaRag(_RagBase):
    id = "vanilla_rag"
    top_k = "3"

    def _build_params(self) -> None:
        self._answer_params()

    def _predict(self, sample, question, graph, backend):
        ctx = retriever_forward(question, self.corpus, self.params["top_k"], graph, sample.id)
        return self._answer(sample, question, ctx, graph, backend)


class MultihopRag(_RagBase):
    id = "multihop_rag"
    llm_calls = 3

    def _build_params(self) -> None:
        self._query_params("query_instruction_0")
        self._query_params("query_instruction_1")
        self._param(ParameterKind.PROMPT, "query_format", "Output format for the query generators",
                    QUERY_FORMAT, False)
        self._answer_params()

    def _predict(self, sample, question, graph, backend):
        fmt, top_k = self.params["query_format"], self.params["top_k"]
        q1 = self._gen([self.params["query_instruction_0"], fmt], question, graph, backend, sample.id,
                       name="query_generator_0", role_desc="Search query for the first hop")
        c1 = retriever_forward(q1, self.corpus, top_k, graph, sample.id, 1)
        hop2 = self._hop_input(sample, question, c1, graph, 2)
        q2 = self._gen([self.params["query_instruction_1"], fmt], hop2, graph, backend, sample.id,
                       name="query_generator_1", role_desc="Search query for the second hop")
        c2 = retriever_forward(q2, self.corpus, top_k, graph, sample.id, 2)
        ctx = combine_lists(c1, c2, graph, sample.id)
        return self._answer(sample, question, ctx, graph, backend)


class MultihopRagCycle(_RagBase):
    """One query generator called twice; each hop appends to the context."""

    id = "multihop_rag_cycle"
    llm_calls = 3
    hops = 2

    def _build_params(self) -> None:
        self._query_params("query_instruction")
        self._param(ParameterKind.PROMPT, "query_format", "Output format for the query generator",
                    QUERY_FORMAT, False)
        self._answer_params()

    def _predict(self, sample, question, graph, backend):
        peers = [self.params["query_instruction"], self.params["query_format"]]
        contexts: list[Parameter] = []
        hop_input = question
        for t in range(1, self.hops + 1):
            if contexts:
                hop_input = self._hop_input(sample, question, contexts[-1], graph, t)
            q = self._gen(peers, hop_input, graph, backend, sample.id, t, name="query_generator",
                          role_desc="Search query for one retrieval hop")
            contexts.append(retriever_forward(q, self.corpus, self.params["top_k"], graph, sample.id, t))
        ctx = combine_lists(contexts[0], contexts[1], graph, sample.id)
        return self._answer(sample, question, ctx, graph, backend)


def _combine_history(*steps: Any) -> dict[str, Any]:
    """Combine the agent's step history into the final answer."""
    answer = ""
    history = []
    for s in steps:
        if isinstance(s, RetrieverOutput):
            history.append({"observation": s.documents})
            continue
        action = agent_step(s.raw_text if hasattr(s, "raw_text") else str(s))
        history.append({"thought": action.thought, "action": action.describe()})
        if action.name == "finish":
            answer = action.arg("answer")
    return {"answer": answer, "history": history}


class AgenticRag(_RagBase):
    id = "agentic_rag"
    extractor = "identity"
    llm_calls = MAX_AGENT_STEPS

    def _build_params(self) -> None:
        self._param(ParameterKind.PROMPT, "task_desc", "Task description for the planning agent",
                    PLANNER_PROMPT, True)
        self._param(ParameterKind.PROMPT, "finish_docstring", "Docstring of the finish tool", FINISH_DOC, True)
        self._param(ParameterKind.PROMPT, "tools_spec", "Fixed description of the retriever tool and the reply format",
                    TOOLS_SPEC, False)
        self._param(ParameterKind.HYPERPARAM, "top_k", "Number of documents to retrieve", self.top_k, False)

    def _predict(self, sample, question, graph, backend):
        peers = [self.params["task_desc"], self.params["finish_docstring"], self.params["tools_spec"]]
        steps: list[Parameter] = []
        lines: list[str] = []
        for t in range(1, MAX_AGENT_STEPS + 1):
            history = "\n".join(lines) if lines else "(none)"
            step_input = graph.create_parameter(
                ParameterKind.INPUT, f"planner_input#{sample.id}#{t}", "The question and the step history",
                f"{sample.question}\nstep history:\n{history}",
                trace={"data_id": sample.id, "call_index": t},
            )
            out = self._gen(peers, step_input, graph, backend, sample.id, t, name="planner",
                            role_desc="The planner's next action as fenced JSON")
            steps.append(out)
            action = agent_step(out.data)
            if action.error:
                lines.append(f"step {t}: observation: {action.error}")
            elif action.name == "finish":
                break
            elif action.name == "retrieve":
                ret = retriever_forward(out, self.corpus, self.params["top_k"], graph, sample.id, t,
                                        query_text=action.arg("query"))
                steps.append(ret)
                lines.append(f"step {t}: thought: {action.thought}; action: {action.describe()}; "
                             f"observation: {ret.data}")
            else:
                lines.append(f"step {t}: observation: Error: unknown tool {action.name!r}")
        combined = functional_forward(
            _combine_history, steps, graph, sample.id, name="combine_step_history",
            role_desc="Final answer combined from the agent's step history",
            render=lambda v: v["answer"],
        )
        graph.add_skip_edge(combined, self.params["task_desc"])
        return combined


PIPELINES: dict[str, type[Pipeline]] = {
    cls.id: cls for cls in (ObjectCount, Trec, VanillaRag, MultihopRag, MultihopRagCycle, AgenticRag)
}

DEFAULT_DATA = {
    "object_count": ("object_count.jsonl", "object_count.script.jsonl"),
    "trec": ("trec.jsonl", "trec.script.jsonl"),
    "vanilla_rag": ("hotpot.jsonl", "rag.script.jsonl"),
    "multihop_rag": ("hotpot.jsonl", "rag.script.jsonl"),
    "multihop_rag_cycle": ("hotpot.jsonl", "rag.script.jsonl"),
    "agentic_rag": ("hotpot.jsonl", "rag.script.jsonl"),
}


def build_pipeline(pipeline_id: str, *, corpus: DocumentCorpus | None = None,
                   gen_params: dict[str, Any] | None = None) -> Pipeline:
    try:
        cls = PIPELINES[pipeline_id]
    except KeyError:
        raise ValueError(f"unknown pipeline id {pipeline_id!r} (choose from {', '.join(PIPELINE_IDS)})") from None
    if corpus is not None and not issubclass(cls, _RagBase):
        raise ValueError(f"pipeline {pipeline_id} does not use a corpus")
    return cls(corpus=corpus, gen_params=gen_params) if issubclass(cls, _RagBase) else cls(gen_params=gen_params)


def census(graph: ParameterGraph) -> dict[str, int]:
    """Count OUTPUT/LOSS_OUTPUT nodes per component name."""
    counts: dict[str, int] = {}
    for p in graph:
        comp = p.trace.get("component")
        if comp:
            counts[comp] = counts.get(comp, 0) + 1
    return counts


def llm_call_count(graph: ParameterGraph) -> int:
    return sum(1 for p in graph if p.trace.get("component_kind") == "generator")

