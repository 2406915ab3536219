import json

import pytest

from promptgrad.backends import ScriptedBackend, ScriptEntry
from promptgrad.components import generator_forward
from promptgrad.graph import Gradient, ParameterGraph, ParameterKind
from promptgrad.optimizer import (
    DEFAULT_CONSTRAINTS,
    FailedProposal,
    HistoryEntry,
    MalformedPayloadError,
    MissingKeyError,
    NoFencedBlockError,
    OptimizerConfig,
    Proposal,
    ProposalFailed,
    RevertError,
    apply_proposal,
    history_from_json,
    history_to_json,
    insert_history,
    parse_proposal,
    peers_of,
    propose,
    record_outcome,
    render_optimizer_prompt,
    revert,
    system_variables,
)

K = ParameterKind


def fenced(obj):
    return "```json\n" + json.dumps(obj) + "\n```"


GOOD = fenced({"reasoning": "be specific", "proposed_variable": "Count each item."})


@pytest.fixture
def setup():
    g = ParameterGraph()
    task = g.create_parameter(K.PROMPT, "task", data="Count.", requires_opt=True, role_desc="task instruction")
    fmt = g.create_parameter(K.PROMPT, "fmt", data="Answer: N", requires_opt=False)
    demos = g.create_parameter(K.DEMOS, "demos", data="", requires_opt=False)
    other = g.create_parameter(K.PROMPT, "elsewhere", data="Other step.", requires_opt=True)
    fwd = ScriptedBackend([ScriptEntry("forward", [], "Answer: 3")])
    generator_forward([task, fmt, demos], g.create_parameter(K.INPUT, "q", data="q"), fwd, g, "s1")
    task.record_gradient(Gradient("s1", 1, "o", "count multiples"))
    return g, task, fmt, demos, other


class TestParse:
    def test_ok(self):
        assert parse_proposal("noise " + GOOD + " trailing")["proposed_variable"] == "Count each item."

    def test_no_fence(self):
        with pytest.raises(NoFencedBlockError):
            parse_proposal('{"reasoning": "r", "proposed_variable": "v"}')

    def test_missing_key(self):
        with pytest.raises(MissingKeyError):
            parse_proposal(fenced({"reasoning": "r"}))

    def test_malformed(self):
        with pytest.raises(MalformedPayloadError):
            parse_proposal("```json\n{not json}\n```")

    def test_empty_value(self):
        with pytest.raises(MalformedPayloadError):
            parse_proposal(fenced({"reasoning": "r", "proposed_variable": "  "}))

    def test_errors_are_distinct(self):
        assert len({NoFencedBlockError, MissingKeyError, MalformedPayloadError}) == 3
        assert not issubclass(MissingKeyError, MalformedPayloadError)


class TestPropose:
    def test_one_call(self, setup):
        g, task, *_ = setup
        b = ScriptedBackend([ScriptEntry("optimizer", [], GOOD)])
        p = propose(task, g, [HistoryEntry("Count.", 0.5, 0)], [], 0, b)
        assert p.proposed_variable == "Count each item." and p.target_param == task.id
        assert len(b.history) == 1

    def test_one_reprompt(self, setup):
        g, task, *_ = setup
        b = ScriptedBackend([ScriptEntry("optimizer", ["could not be parsed"], GOOD),
                             ScriptEntry("optimizer", [], "no json here")])
        assert propose(task, g, [], [], 0, b).proposed_variable == "Count each item."
        assert len(b.history) == 2

    def test_second_failure_raises(self, setup):
        g, task, *_ = setup
        b = ScriptedBackend([ScriptEntry("optimizer", [], "still nothing")])
        with pytest.raises(ProposalFailed):
            propose(task, g, [], [], 0, b)
        assert len(b.history) == 2

    def test_fixed_param_refused(self, setup):
        g, task, fmt, *_ = setup
        with pytest.raises(ValueError):
            propose(fmt, g, [], [], 0, ScriptedBackend([]))


class TestPrompt:
    def test_contents(self, setup):
        g, task, fmt, demos, other = setup
        sh = [HistoryEntry("Count.", 0.5, 0)]
        ch = [FailedProposal("Count things carefully.", "tried rephrasing")]
        text = render_optimizer_prompt(task, g, sh, ch, 2)
        assert "Count." in text and "count multiples" in text
        assert "score higher than all past iterations" in text
        assert "You MUST approach differently from the above methods" in text
        assert "Count things carefully." in text
        assert DEFAULT_CONSTRAINTS.splitlines()[0] in text
        assert "Other step." in text  # system variable
        assert "PEER_VARIABLE" in text and "Answer: N" in text
        assert '"proposed_variable"' in text

    def test_sections_absent_when_empty(self, setup):
        g, task, *_ = setup
        text = render_optimizer_prompt(task, g, [], [], 0, OptimizerConfig(constraint_text=None))
        assert "You MUST approach differently" not in text
        assert "score higher than all past iterations" not in text
        assert "YOU MUST ENSURE" not in text

    def test_peers_and_system(self, setup):
        g, task, fmt, demos, other = setup
        peers = peers_of(task, g)
        assert {p.name for p in peers} == {"fmt", "demos"}
        assert [p.name for p in system_variables(task, g, peers)] == ["elsewhere"]


class TestApplyRevert:
    def test_roundtrip(self, setup):
        g, task, *_ = setup
        tok = apply_proposal(task, Proposal(task.id, "r", "New."))
        assert task.data == "New."
        revert(task, tok)
        assert task.data == "Count."

    def test_lifo(self, setup):
        g, task, *_ = setup
        t1 = apply_proposal(task, Proposal(task.id, "r", "One."))
        t2 = apply_proposal(task, Proposal(task.id, "r", "Two."))
        revert(task, t2)
        revert(task, t1)
        assert task.data == "Count."

    def test_stale(self, setup):
        g, task, *_ = setup
        t1 = apply_proposal(task, Proposal(task.id, "r", "One."))
        apply_proposal(task, Proposal(task.id, "r", "Two."))
        with pytest.raises(RevertError):
            revert(task, t1)

    def test_wrong_target(self, setup):
        g, task, fmt, *_ = setup
        with pytest.raises(RevertError):
            apply_proposal(fmt, Proposal(task.id, "r", "x"))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            Proposal("p", "r", " ")


class TestHistory:
    def test_sorted_desc(self):
        sh = [HistoryEntry("a", 0.76, 0)]
        sh = insert_history(sh, HistoryEntry("b", 0.84, 1))
        assert [h.val_score for h in sh] == [0.84, 0.76]

    def test_capacity(self):
        sh = []
        for i, s in enumerate([0.1, 0.5, 0.3, 0.9, 0.7, 0.2]):
            sh = insert_history(sh, HistoryEntry(str(i), s, i), capacity=5)
        assert [h.val_score for h in sh] == [0.9, 0.7, 0.5, 0.3, 0.2]

    def test_record_accept(self):
        sh = [HistoryEntry("a", 0.5, 0)]
        sh2, ch, ok = record_outcome(sh, [], Proposal("p", "r", "b"), True, 0.75, step=1)
        assert ok and sh2[0].value == "b" and ch == []

    def test_record_reject_paths(self):
        sh = [HistoryEntry("a", 0.5, 0)]
        _, ch, ok = record_outcome(sh, [], Proposal("p", "r", "b"), False, None)
        assert not ok and ch[0].value == "b"
        _, ch, ok = record_outcome(sh, [], Proposal("p", "r", "c"), True, 0.5)
        assert not ok and ch[0].value == "c"
        _, _, ok = record_outcome(sh, [], Proposal("p", "r", "c"), True, 0.5, strict=False)
        assert ok

    def test_json_roundtrip(self):
        sh = [HistoryEntry("x: y", 0.5, 2)]
        assert history_from_json(history_to_json(sh)) == sh

    def test_render_yaml(self):
        assert HistoryEntry("v", 0.123456, 0).render() == "value: v\neval_score: 0.1235"
