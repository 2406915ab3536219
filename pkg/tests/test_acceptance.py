"""Acceptance criteria, one test (or parametrized group) per criterion.

The conftest prints a PASS/FAIL line per criterion at the end of the run.
"""

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from promptgrad.backends import Backends, ScriptedBackend, ScriptEntry, UsageLedger, load_script
from promptgrad.backward import CYCLE_CUE, BackwardEngine, accumulate_cyclic, backward_functional, backward_generator
from promptgrad.components import functional_forward, generator_forward
from promptgrad.fixtures import OC_FIX_ANCHOR, _proposal
from promptgrad.graph import Gradient, Parameter, ParameterGraph, ParameterKind
from promptgrad.optimizer import FailedProposal, HistoryEntry, render_optimizer_prompt
from promptgrad.pipelines import (
    MAX_AGENT_STEPS,
    OBJECT_COUNT_PROMPT,
    build_pipeline,
    census,
    data_path,
    llm_call_count,
    load_samples,
)
from promptgrad.templates import load
from promptgrad.trainer import Trainer, TrainerConfig, no_error_batch_probability, selective_backward

from conftest import oc_entries, write_split

K = ParameterKind
HOTPOT = load_samples(data_path("hotpot.jsonl"))
OC = load_samples(data_path("object_count.jsonl"))


def rag_backends():
    return Backends.scripted(load_script(data_path("rag.script.jsonl")))


# -- 1 ------------------------------------------------------------------------

def _closed_form(N, acc, n):
    # independent of the implementation: product of successive draw probabilities
    n1 = math.floor(Fraction(str(N)) * Fraction(str(acc)) + Fraction(1, 2))
    p = Fraction(1)
    for i in range(n):
        p *= Fraction(max(n1 - i, 0), N - i)
    return float(p), n1


@pytest.mark.criterion(1, "no-error-batch probability: exact values, closed form, Monte-Carlo 3 sigma, < 5 s")
@pytest.mark.parametrize("N,acc,n,expected", [(50, 0.8, 4, 0.3968), (50, 0.5, 4, 0.0549)])
def test_c1_no_error_probability(N, acc, n, expected):
    t0 = time.perf_counter()
    p = no_error_batch_probability(N, acc, n)
    exact, n1 = _closed_form(N, acc, n)
    assert abs(p - exact) < 1e-4
    assert abs(p - expected) < 1e-4
    draws = 10**6
    rng = np.random.default_rng(12345)
    good = rng.hypergeometric(n1, N - n1, n, size=draws)
    mc = float(np.mean(good == n))
    sigma = math.sqrt(exact * (1 - exact) / draws)
    assert abs(mc - p) <= 3 * sigma
    assert time.perf_counter() - t0 < 5.0


# -- 2 ------------------------------------------------------------------------

@pytest.mark.criterion(2, "cycle ordering: shared query prompt holds 2 gradients per sample with t=(1,2), < 10 s")
def test_c2_cycle_ordering():
    t0 = time.perf_counter()
    pipe = build_pipeline("multihop_rag_cycle")
    backends = rag_backends()
    engine = BackwardEngine(backends.backward)
    graph = ParameterGraph()
    losses = [pipe.forward(s, graph, backends.forward) for s in HOTPOT]
    for loss in losses:
        loss.score = 0.0  # force full backward for every sample
    selective_backward(graph, losses, 1.0, engine)
    qi = pipe.params["query_instruction"]
    by_sample = {}
    for g in qi.gradients:
        by_sample.setdefault(g.data_id, []).append(g)
    assert set(by_sample) == {s.id for s in HOTPOT}
    for data_id, grads in by_sample.items():
        assert [g.call_index for g in grads] == [1, 2], data_id
        for perm in itertools.permutations(grads):
            fresh = Parameter(name="qi", kind=K.PROMPT, requires_opt=True)
            accumulate_cyclic(fresh, [(g.data_id, g.call_index, g) for g in perm])
            assert [g.call_index for g in fresh.gradients] == [1, 2]
            assert [g.content for g in fresh.gradients] == [g.content for g in grads]
    assert time.perf_counter() - t0 < 10.0


# -- 3 ------------------------------------------------------------------------

@pytest.mark.criterion(3, "pass-through: byte-equal gradient, 0 backward requests in the ledger")
def test_c3_pass_through():
    ledger = UsageLedger()
    backend = ScriptedBackend([ScriptEntry("backward", [], "should never be used")], ledger=ledger)
    graph = ParameterGraph()
    src = graph.create_parameter(K.OUTPUT, "retrieved", data="docs", trace={"data_id": "s1"})
    node = functional_forward(lambda x: x.upper(), [src], graph, "s1", name="upper", role_desc="uppercased")
    content = "Feedback with unicode ✓, tabs\t and\nnewlines  "
    node.record_gradient(Gradient("s1", 1, "loss#s1", content))
    backward_functional(node, BackwardEngine(backend), graph)
    (g,) = src.gradients
    assert g.content.encode("utf-8") == content.encode("utf-8")
    assert ledger.requests(role="backward") == 0 and backend.history == []


# -- 4 ------------------------------------------------------------------------

@pytest.mark.criterion(4, "peer-jointness: 3 peers and 1 successor gradient -> 1 request, 3 peer gradients")
def test_c4_peer_jointness():
    ledger = UsageLedger()
    reply = "".join(f'<VARIABLE_FEEDBACK name="{n}">fb {n}</VARIABLE_FEEDBACK>'
                    for n in ("instruction", "demos", "format", "question"))
    backend = ScriptedBackend([ScriptEntry("forward", [], "Answer: 3"), ScriptEntry("backward", [], reply)],
                              ledger=ledger)
    graph = ParameterGraph()
    peers = [graph.create_parameter(K.PROMPT, "instruction", data="Count.", requires_opt=True),
             graph.create_parameter(K.DEMOS, "demos", data="q: a", requires_opt=True),
             graph.create_parameter(K.PROMPT, "format", data="Answer: N", requires_opt=True)]
    q = graph.create_parameter(K.INPUT, "question", data="How many?")
    out = generator_forward(peers, q, backend, graph, "s1")
    out.record_gradient(Gradient("s1", 1, "loss#s1", "the count is wrong"))
    backward_generator(out, BackwardEngine(backend), graph)
    assert ledger.requests(role="backward") == 1
    assert [len(p.gradients) for p in peers] == [1, 1, 1]
    assert [p.gradients[0].content for p in peers] == ["fb instruction", "fb demos", "fb format"]


# -- 5 ------------------------------------------------------------------------

@pytest.mark.criterion(5, "dedup: 100 identical injections -> 1; any key difference is retained")
def test_c5_dedup():
    graph = ParameterGraph()
    p = graph.create_parameter(K.PROMPT, "p", requires_opt=True)
    base = ("s1", 1, "out#s1", "feedback")
    for _ in range(100):
        graph.record_gradient(p, Gradient(*base))
    assert len(p.gradients) == 1
    variants = [("s2", 1, "out#s1", "feedback"), ("s1", 2, "out#s1", "feedback"),
                ("s1", 1, "out#s2", "feedback"), ("s1", 1, "out#s1", "feedback.")]
    for v in variants:
        for _ in range(3):
            graph.record_gradient(p, Gradient(*v))
    assert len(p.gradients) == 5
    assert {g.key[:3] + (g.content,) for g in p.gradients} == {base, *variants}


# -- 6 ------------------------------------------------------------------------

WORSE = "Guess a number without reading the question."
MBGOOD = "Count only what appears in the first half of the question."
TRAIN_IDS = {"oc-01", "oc-02", "oc-03", "oc-04"}
VAL_IDS = {f"oc-{i:02d}" for i in range(5, 13)}


def _gating_trainer(tmp_path, oc_samples, optimizer):
    forward = [ScriptEntry("forward", [WORSE], "Answer: 0")]
    for s in oc_samples:
        if s["id"] in TRAIN_IDS:
            forward.append(ScriptEntry("forward", [MBGOOD, s["question"]], f"Answer: {s['answer']}"))
    forward.append(ScriptEntry("forward", [MBGOOD], "Answer: 0"))
    backends = Backends.scripted(forward + oc_entries(oc_samples, optimizer))
    cfg = TrainerConfig(pipeline="object_count", max_steps=1, max_proposals=3, batch_size=4,
                        train_path=write_split(tmp_path / "train.jsonl", oc_samples, TRAIN_IDS),
                        val_path=write_split(tmp_path / "val.jsonl", oc_samples, VAL_IDS),
                        test_path=write_split(tmp_path / "test.jsonl", oc_samples, VAL_IDS))
    return Trainer(cfg, backends)


@pytest.mark.criterion(6, "two-stage gating: worse-on-minibatch x3 -> 0 val evals; mb-better/val-worse -> 1 and revert")
def test_c6_gating_worse_on_minibatch(tmp_path, oc_samples):
    t = _gating_trainer(tmp_path, oc_samples, [ScriptEntry("optimizer", [], _proposal("guess", WORSE))])
    start = t.pipeline.prompt_values()
    report = t.run()
    (step,) = report.steps
    assert step.minibatch_score == 0.5
    assert [p.minibatch_score for p in step.proposals] == [0.0, 0.0, 0.0]
    assert step.val_evaluations == 0
    # only the start and final evaluations touch the 8-sample val/test sets
    assert t.ledger.requests(phase="validate") == 8 + 8 + 3 * 4 + 8
    assert t.pipeline.prompt_values() == start


@pytest.mark.criterion(6, "two-stage gating: worse-on-minibatch x3 -> 0 val evals; mb-better/val-worse -> 1 and revert")
def test_c6_gating_better_minibatch_worse_val(tmp_path, oc_samples):
    opt = [ScriptEntry("optimizer", [], _proposal("half", MBGOOD), max_uses=1),
           ScriptEntry("optimizer", [], _proposal("guess", WORSE))]
    t = _gating_trainer(tmp_path, oc_samples, opt)
    start = dict(t.pipeline.prompt_values())
    report = t.run()
    (step,) = report.steps
    assert step.proposals[0].minibatch_score == 1.0 and step.proposals[0].val_score == 0.0
    assert step.val_evaluations == 1 and not step.accepted
    assert report.best_prompts == start
    assert {k: v.encode() for k, v in t.pipeline.prompt_values().items()} == {k: v.encode() for k, v in start.items()}


# -- 7 ------------------------------------------------------------------------

@pytest.mark.criterion(7, "selective gradients: scores [1,1,0,1] -> 1 loss request, 3 'You score' notes")
def test_c7_selective(oc_backends):
    pipe = build_pipeline("object_count")
    by_id = {s.id: s for s in OC}
    graph = ParameterGraph()
    losses = [pipe.forward(by_id[i], graph, oc_backends.forward) for i in ("oc-02", "oc-04", "oc-01", "oc-06")]
    assert [l.score for l in losses] == [1.0, 1.0, 0.0, 1.0]
    backend = oc_backends.backward
    before = len(backend.calls("backward"))
    actions = selective_backward(graph, losses, 1.0, BackwardEngine(backend))
    requests = backend.calls("backward")[before:]
    loss_requests = [r for r in requests if "EVAL_FUNC:" in r.user_text]
    assert len(loss_requests) == 1
    assert actions == {"oc-02": "manual", "oc-04": "manual", "oc-01": "backward", "oc-06": "manual"}
    for loss in losses:
        (final,) = graph.predecessors(loss)
        if loss.score == 1.0:
            (note,) = final.gradients
            assert note.content.startswith("You score") and note.content == "You score 1.0"
    task = pipe.params["task_instruction"]
    manual = sorted(g.data_id for g in task.gradients if g.content.startswith("You score"))
    assert manual == ["oc-02", "oc-04", "oc-06"]


# -- 8 ------------------------------------------------------------------------

def _e2e(seed):
    return Trainer(TrainerConfig(pipeline="object_count", max_steps=3, seed=seed)).run()


@pytest.mark.criterion(8, "end-to-end: val 6/12 -> >=10/12 within 3 steps, byte-identical reports, < 60 s")
@pytest.mark.parametrize("seed", [0, 1, 7])
def test_c8_end_to_end(seed):
    t0 = time.perf_counter()
    first = _e2e(seed)
    second = _e2e(seed)
    assert first.start_val * 12 == pytest.approx(6)
    assert first.best_val * 12 >= 10
    assert first.best_step <= 3
    assert OC_FIX_ANCHOR in first.best_prompts["task_instruction"]
    assert first.to_jsonl().encode() == second.to_jsonl().encode()
    assert time.perf_counter() - t0 < 60.0


@pytest.mark.criterion(8, "end-to-end: val 6/12 -> >=10/12 within 3 steps, byte-identical reports, < 60 s")
def test_c8_second_proposal_is_the_fix():
    report = _e2e(0)
    accepted = next(s for s in report.steps if s.accepted)
    assert [p.accepted for p in accepted.proposals] == [False, True]


# -- 9 ------------------------------------------------------------------------

ANCHORS = {
    "OBJECTIVE_FUNCTION": ("objective_instruction_base", "objective_instruction_chain_generator"),
    "PEER_VARIABLE: EMPTY": ("variable_and_peers_info",),
    "You MUST approach differently from the above methods": ("text_grad_desc",),
    "called multiple times in the compound system": ("feedback_engine",),
}


@pytest.mark.criterion(9, "template fidelity: verbatim anchors present when required, absent otherwise")
def test_c9_anchors_in_assets():
    for anchor, assets in ANCHORS.items():
        for asset in assets:
            assert anchor in load(asset).body, (anchor, asset)


@pytest.mark.criterion(9, "template fidelity: verbatim anchors present when required, absent otherwise")
def test_c9_backward_prompts(oc_backends):
    pipe = build_pipeline("object_count")
    graph = ParameterGraph()
    losses = [pipe.forward(OC[0], graph, oc_backends.forward)]
    backend = oc_backends.backward
    selective_backward(graph, losses, 1.0, BackwardEngine(backend))
    loss_req, gen_req = [r.user_text for r in backend.calls("backward")]
    assert "OBJECTIVE_FUNCTION" in loss_req and "OBJECTIVE_FUNCTION" in gen_req
    assert "PEER_VARIABLE: EMPTY" in gen_req  # the few-shot demos peer is empty
    pipe.params["few_shot_demos"].data = "Q: two cats. A: 2"
    graph2 = ParameterGraph()
    selective_backward(graph2, [pipe.forward(OC[0], graph2, oc_backends.forward)], 1.0, BackwardEngine(backend))
    assert "PEER_VARIABLE: EMPTY" not in backend.calls("backward")[-1].user_text


@pytest.mark.criterion(9, "template fidelity: verbatim anchors present when required, absent otherwise")
def test_c9_optimizer_prompts():
    sh = [HistoryEntry(OBJECT_COUNT_PROMPT, 0.5, 0)]
    ch = [FailedProposal("Count things.", "rephrase")]

    def optimizer_prompt(pid, param, ch):
        pipe = build_pipeline(pid)
        backends = rag_backends()
        graph = ParameterGraph()
        loss = pipe.forward(HOTPOT[0], graph, backends.forward)
        loss.score = 0.0
        selective_backward(graph, [loss], 1.0, BackwardEngine(backends.backward))
        return render_optimizer_prompt(pipe.params[param], graph, sh, ch, 1)

    cyc = optimizer_prompt("multihop_rag_cycle", "query_instruction", ch)
    assert "called multiple times in the compound system" in cyc and CYCLE_CUE in cyc
    assert "You MUST approach differently from the above methods" in cyc
    flat = optimizer_prompt("multihop_rag", "query_instruction_0", [])
    assert "called multiple times in the compound system" not in flat
    assert "You MUST approach differently from the above methods" not in flat


# -- 10 -----------------------------------------------------------------------

@pytest.mark.criterion(10, "node census: object_count 1 call, multihop 3, cycle 2+1, agentic <= 4 planner calls")
def test_c10_census(oc_backends):
    g = ParameterGraph()
    build_pipeline("object_count").forward(OC[0], g, oc_backends.forward)
    assert llm_call_count(g) == 1

    g = ParameterGraph()
    build_pipeline("multihop_rag").forward(HOTPOT[0], g, rag_backends().forward)
    assert llm_call_count(g) == 3

    g = ParameterGraph()
    build_pipeline("multihop_rag_cycle").forward(HOTPOT[0], g, rag_backends().forward)
    c = census(g)
    assert (c["query_generator"], c["answer_generator"], llm_call_count(g)) == (2, 1, 3)

    pipe = build_pipeline("agentic_rag")
    backends = rag_backends()
    for s in HOTPOT:
        g = ParameterGraph()
        pipe.forward(s, g, backends.forward)
        assert 1 <= census(g)["planner"] <= MAX_AGENT_STEPS
