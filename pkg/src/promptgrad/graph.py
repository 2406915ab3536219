"""Parameters, textual gradients and the runtime parameter graph.

A forward pass registers every value it touches as a :class:`Parameter` in a
:class:`ParameterGraph`. Components called more than once produce one OUTPUT
parameter per invocation, so the traced graph stays acyclic even when the
component wiring loops.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import json
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator


class GraphError(Exception):
    """Raised for invalid graph mutations."""


class CycleError(GraphError):
    pass


class ParameterKind(str, enum.Enum):
    PROMPT = "prompt"
    DEMOS = "demos"
    INPUT = "input"
    OUTPUT = "output"
    HYPERPARAM = "hyperparam"
    LOSS_OUTPUT = "loss_output"


OPTIMIZABLE_KINDS = frozenset({ParameterKind.PROMPT, ParameterKind.DEMOS, ParameterKind.HYPERPARAM})
PRODUCED_KINDS = frozenset({ParameterKind.OUTPUT, ParameterKind.LOSS_OUTPUT})

_param_ids = itertools.count(1)


def content_digest(text: str) -> int:
    """64-bit digest used in gradient identity keys."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


@dataclass(frozen=True)
class GradientContext:
    conversation: str
    response_desc: str
    parameter_desc: str


@dataclass(frozen=True)
class Gradient:
    data_id: str
    call_index: int
    source_output_id: str
    content: str
    context: GradientContext | None = None
    score: float | None = None

    def __post_init__(self) -> None:
        if self.call_index < 1:
            raise ValueError(f"call_index must be >= 1, got {self.call_index}")

    @property
    def key(self) -> tuple[str, int, str, int]:
        return (self.data_id, self.call_index, self.source_output_id, content_digest(self.content))

    def to_dict(self) -> dict[str, Any]:
        ctx = None
        if self.context is not None:
            ctx = {
                "conversation": self.context.conversation,
                "response_desc": self.context.response_desc,
                "parameter_desc": self.context.parameter_desc,
            }
        return {
            "data_id": self.data_id,
            "call_index": self.call_index,
            "source_output_id": self.source_output_id,
            "content": self.content,
            "context": ctx,
            "score": self.score,
        }


@dataclass(eq=False)
class Parameter:
    """One node of the parameter graph.

    ``data`` is always text. OUTPUT parameters additionally keep the structured
    result of the component in ``payload`` and the trace metadata (component
    name, kind, data id, call index) in ``trace``.
    """

    name: str
    kind: ParameterKind
    role_desc: str = ""
    data: str = ""
    requires_opt: bool = False
    score: float | None = None
    payload: Any = None
    trace: dict[str, Any] = field(default_factory=dict)
    id: str = field(default_factory=lambda: f"p{next(_param_ids)}")
    gradients: list[Gradient] = field(default_factory=list, repr=False)
    _grad_keys: set = field(default_factory=set, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self) -> None:
        self.kind = ParameterKind(self.kind)
        if self.requires_opt and self.kind not in OPTIMIZABLE_KINDS:
            raise GraphError(f"{self.kind.value} parameter {self.name!r} cannot require optimization")

    @property
    def param_type(self) -> str:
        return self.kind.value

    @property
    def prompt_data(self) -> str:
        return self.data

    @property
    def data_id(self) -> str | None:
        return self.trace.get("data_id")

    @property
    def call_index(self) -> int:
        return self.trace.get("call_index", 1)

    def record_gradient(self, g: Gradient) -> bool:
        with self._lock:
            key = g.key
            if key in self._grad_keys:
                return False
            self._grad_keys.add(key)
            self.gradients.append(g)
            return True

    def reset_gradients(self) -> None:
        with self._lock:
            self.gradients.clear()
            self._grad_keys.clear()

    def drop_gradients(self, data_id: str) -> None:
        with self._lock:
            self.gradients = [g for g in self.gradients if g.data_id != data_id]
            self._grad_keys = {g.key for g in self.gradients}

    def sorted_gradients(self) -> list[Gradient]:
        """Merged view ordered by (data_id, call_index, arrival)."""
        indexed = list(enumerate(self.gradients))
        indexed.sort(key=lambda it: (it[1].data_id, it[1].call_index, it[0]))
        return [g for _, g in indexed]

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, {self.kind.value}, grads={len(self.gradients)})"


class ParameterGraph:
    """Creation-ordered DAG of parameters with optional skip edges."""

    def __init__(self) -> None:
        self._nodes: dict[str, Parameter] = {}
        self._names: dict[str, str] = {}
        self._preds: dict[str, list[str]] = {}
        self._succs: dict[str, list[str]] = {}
        self.skip_edges: list[tuple[str, str]] = []
        self.sample_ids: list[str] = []
        self._lock = threading.Lock()

    # registration -----------------------------------------------------
    def create_parameter(
        self,
        kind: ParameterKind | str,
        name: str,
        role_desc: str = "",
        data: str = "",
        requires_opt: bool = False,
        **extra: Any,
    ) -> Parameter:
        if name in self._names:
            raise GraphError(f"duplicate parameter name {name!r}")
        param = Parameter(name=name, kind=ParameterKind(kind), role_desc=role_desc, data=data,
                          requires_opt=requires_opt, **extra)
        self._register(param)
        return param

    def add(self, param: Parameter) -> Parameter:
        """Register an existing parameter, e.g. a prompt shared across runs."""
        if param.id in self._nodes:
            return param
        if param.name in self._names:
            raise GraphError(f"duplicate parameter name {param.name!r}")
        self._register(param)
        return param

    def _register(self, param: Parameter) -> None:
        with self._lock:
            self._nodes[param.id] = param
            self._names[param.name] = param.id
            self._preds[param.id] = []
            self._succs[param.id] = []
            data_id = param.trace.get("data_id")
            if data_id is not None and data_id not in self.sample_ids:
                self.sample_ids.append(data_id)

    def __contains__(self, param: Parameter) -> bool:
        return param.id in self._nodes

    def __iter__(self) -> Iterator[Parameter]:
        return iter(list(self._nodes.values()))

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def nodes(self) -> list[Parameter]:
        return list(self._nodes.values())

    def get(self, name: str) -> Parameter:
        return self._nodes[self._names[name]]

    def by_id(self, pid: str) -> Parameter:
        return self._nodes[pid]

    def _require(self, param: Parameter) -> None:
        if param.id not in self._nodes:
            raise GraphError(f"parameter {param.name!r} is not registered in this graph")

    # edges ------------------------------------------------------------
    def connect(self, pred: Parameter, succ: Parameter) -> None:
        self._require(pred)
        self._require(succ)
        if pred.id in self._preds[succ.id]:
            return
        if pred.id == succ.id or self._reachable(succ.id, pred.id):
            raise CycleError(f"edge {pred.name!r} -> {succ.name!r} would close a cycle (back-edge)")
        with self._lock:
            self._preds[succ.id].append(pred.id)
            self._succs[pred.id].append(succ.id)

    def _reachable(self, src: str, dst: str) -> bool:
        stack, seen = [src], set()
        while stack:
            cur = stack.pop()
            if cur == dst:
                return True
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(self._succs[cur])
        return False

    def predecessors(self, param: Parameter) -> list[Parameter]:
        return [self._nodes[i] for i in self._preds[param.id]]

    def successors(self, param: Parameter) -> list[Parameter]:
        return [self._nodes[i] for i in self._succs[param.id]]

    def edges(self) -> list[tuple[Parameter, Parameter]]:
        return [(self._nodes[p], self._nodes[s]) for s, ps in self._preds.items() for p in ps]

    def add_skip_edge(self, src: Parameter, dst: Parameter) -> None:
        self._require(src)
        self._require(dst)
        if not dst.requires_opt:
            raise GraphError(f"skip edge target {dst.name!r} is not optimizable")
        if (src.id, dst.id) not in self.skip_edges:
            self.skip_edges.append((src.id, dst.id))

    def skip_targets(self, param: Parameter) -> list[Parameter]:
        return [self._nodes[d] for s, d in self.skip_edges if s == param.id]

    # gradients --------------------------------------------------------
    def record_gradient(self, param: Parameter, g: Gradient) -> bool:
        self._require(param)
        return param.record_gradient(g)

    def zero_grad(self) -> None:
        for p in self._nodes.values():
            p.reset_gradients()

    def trainable(self) -> list[Parameter]:
        return [p for p in self._nodes.values() if p.requires_opt]

    # ordering ---------------------------------------------------------
    def reverse_topological_order(self) -> list[Parameter]:
        """Every node appears after all of its successors.

        Kahn's algorithm run on the reversed graph; among ready nodes the most
        recently created goes first, which keeps the order deterministic.
        """
        order_pos = {pid: i for i, pid in enumerate(self._nodes)}
        remaining = {pid: len(self._succs[pid]) for pid in self._nodes}
        ready = [pid for pid, n in remaining.items() if n == 0]
        out: list[Parameter] = []
        while ready:
            ready.sort(key=order_pos.__getitem__)
            pid = ready.pop()
            out.append(self._nodes[pid])
            for pred in self._preds[pid]:
                remaining[pred] -= 1
                if remaining[pred] == 0:
                    ready.append(pred)
        if len(out) != len(self._nodes):
            raise CycleError("parameter graph contains a cycle")
        return out

    def has_cycle(self) -> bool:
        try:
            self.reverse_topological_order()
        except CycleError:
            return True
        return False

    # export -----------------------------------------------------------
    def export_dot(self) -> str:
        lines = ["digraph {"]
        for p in self._nodes.values():
            label = f"{p.name}\\n{p.kind.value}\\nrequires_opt={p.requires_opt}\\ngrads={len(p.gradients)}"
            label = label.replace('"', '\\"')
            lines.append(f'  "{p.id}" [label="{label}"];')
        for pred, succ in self.edges():
            lines.append(f'  "{pred.id}" -> "{succ.id}";')
        for s, d in self.skip_edges:
            lines.append(f'  "{s}" -> "{d}" [style=dashed];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def snapshot(self) -> dict[str, Any]:
        """JSON-ready view of nodes, edges, skip edges and gradients."""
        return {
            "nodes": [
                {
                    "id": p.id,
                    "name": p.name,
                    "kind": p.kind.value,
                    "role_desc": p.role_desc,
                    "data": p.data,
                    "requires_opt": p.requires_opt,
                    "score": p.score,
                    "trace": _jsonable(p.trace),
                    "gradients": [g.to_dict() for g in p.gradients],
                }
                for p in self._nodes.values()
            ],
            "edges": [[a.id, b.id] for a, b in self.edges()],
            "skip_edges": [list(e) for e in self.skip_edges],
            "sample_ids": list(self.sample_ids),
        }

    def to_json(self, **kwargs: Any) -> str:
        return json.dumps(self.snapshot(), **kwargs)


def _jsonable(obj: Any) -> Any:
    return json.loads(json.dumps(obj, default=str))


def zero_grad(params: Iterable[Parameter] | ParameterGraph) -> None:
    for p in params:
        p.reset_gradients()
