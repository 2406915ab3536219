from __future__ import annotations

import pytest

from promptgrad.backends import Backends, ScriptedBackend, ScriptEntry, UsageLedger
from promptgrad.fixtures import object_count_samples, object_count_script

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, text = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "FAIL"
        prev = _criteria.get(number)
        if prev is None or prev[0] == "PASS":
            _criteria[number] = (status, text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, text = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}: {text}")


@pytest.fixture
def oc_samples():
    return object_count_samples()


@pytest.fixture
def oc_backends(oc_samples):
    return Backends.scripted(object_count_script(oc_samples))


def scripted(*entries, ledger: UsageLedger | None = None) -> ScriptedBackend:
    return ScriptedBackend([e if isinstance(e, ScriptEntry) else ScriptEntry(*e) for e in entries],
                           ledger=ledger or UsageLedger())


def oc_entries(samples, optimizer=()):
    """Forward/backward entries of the object-count script with custom optimizer replies."""
    base = [e for e in object_count_script(samples) if e.role != "optimizer"]
    return base + list(optimizer)


def write_split(path, samples, ids=None):
    import json

    rows = [s for s in samples if ids is None or s["id"] in ids]
    path.write_text("".join(json.dumps({"id": s["id"], "question": s["question"], "answer": s["answer"]}) + "\n"
                            for s in rows), encoding="utf-8")
    return str(path)
