"""Model backends and token accounting.

Two implementations share one ``complete(request)`` contract: a scripted
backend that replays canned responses from a JSONL script (tests, fixtures,
desk-scale runs) and an HTTP client for OpenAI-style chat-completions servers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Protocol

import httpx

log = logging.getLogger(__name__)

ROLES = ("forward", "backward", "optimizer")
PHASES = ("forward", "backward", "propose", "validate")


class BackendError(Exception):
    """Transport or provider failure; safe to retry."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class UnscriptedRequestError(Exception):
    """The scripted backend has no entry for a request. Never retried."""


@dataclass
class ModelRequest:
    role: str
    user_text: str
    system_text: str = ""
    temperature: float | None = None
    top_p: float | None = None
    max_tokens: int | None = None
    stop: list[str] | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown request role {self.role!r}")
        if not self.user_text:
            raise ValueError("request user_text must be non-empty")
        if self.temperature is not None and not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature out of range: {self.temperature}")
        if self.top_p is not None and not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p out of range: {self.top_p}")

    def digest(self) -> str:
        h = hashlib.sha256(f"{self.role}\x00{self.system_text}\x00{self.user_text}".encode())
        return h.hexdigest()[:16]


@dataclass
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass
class ModelResponse:
    text: str
    usage: Usage = field(default_factory=Usage)
    latency: float = 0.0


class ModelBackend(Protocol):
    name: str

    def complete(self, request: ModelRequest) -> ModelResponse: ...


def whitespace_tokens(text: str) -> int:
    return len(text.split())


# ---------------------------------------------------------------------------
# usage ledger


@dataclass
class Counter:
    requests: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def add(self, other: "Counter | Usage", requests: int = 1) -> None:
        self.requests += other.requests if isinstance(other, Counter) else requests
        self.prompt_tokens += other.prompt_tokens
        self.completion_tokens += other.completion_tokens

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def as_dict(self) -> dict[str, int]:
        return {
            "requests": self.requests,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "total_tokens": self.total_tokens,
        }


class UsageLedger:
    """Per (backend, role, phase) request and token counters.

    The current phase is ambient: wrap work in ``with ledger.phase("validate"):``.
    """

    def __init__(self) -> None:
        self._entries: dict[tuple[str, str, str], Counter] = defaultdict(Counter)
        self._phase = threading.local()
        self._lock = threading.Lock()

    @property
    def current_phase(self) -> str:
        return getattr(self._phase, "name", "forward")

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        if name not in PHASES:
            raise ValueError(f"unknown phase {name!r}")
        prev = getattr(self._phase, "name", None)
        self._phase.name = name
        try:
            yield
        finally:
            if prev is None:
                del self._phase.name
            else:
                self._phase.name = prev

    def add(self, backend: str, role: str, usage: Usage, phase: str | None = None) -> None:
        key = (backend, role, phase or self.current_phase)
        with self._lock:
            self._entries[key].add(usage)

    def counter(self, *, backend: str | None = None, role: str | None = None,
                phase: str | None = None) -> Counter:
        total = Counter()
        for (b, r, p), c in self._entries.items():
            if backend not in (None, b) or role not in (None, r) or phase not in (None, p):
                continue
            total.add(c)
        return total

    def requests(self, **filters: str) -> int:
        return self.counter(**filters).requests

    def report(self) -> dict[str, Any]:
        by_phase = {p: self.counter(phase=p).as_dict() for p in PHASES}
        backends = sorted({b for b, _, _ in self._entries})
        by_backend = {b: self.counter(backend=b).as_dict() for b in backends}
        by_role = {r: self.counter(role=r).as_dict() for r in ROLES}
        return {
            "total": self.counter().as_dict(),
            "by_phase": by_phase,
            "by_role": by_role,
            "by_backend": by_backend,
        }

    def to_entries(self) -> list[dict[str, Any]]:
        return [
            {"backend": b, "role": r, "phase": p, **c.as_dict()}
            for (b, r, p), c in sorted(self._entries.items())
        ]

    @classmethod
    def from_entries(cls, entries: Iterable[dict[str, Any]]) -> "UsageLedger":
        ledger = cls()
        for e in entries:
            c = Counter(e["requests"], e["prompt_tokens"], e["completion_tokens"])
            ledger._entries[(e["backend"], e["role"], e["phase"])].add(c)
        return ledger


# ---------------------------------------------------------------------------
# scripted backend


@dataclass
class ScriptEntry:
    role: str
    contains: list[str]
    response: str
    max_uses: int | None = None
    uses: int = 0

    def matches(self, request: ModelRequest) -> bool:
        if self.role != request.role:
            return False
        if self.max_uses is not None and self.uses >= self.max_uses:
            return False
        return all(s in request.user_text for s in self.contains)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScriptEntry":
        return cls(
            role=d["role"],
            contains=list(d.get("contains", [])),
            response=d["response"],
            max_uses=d.get("max_uses"),
        )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"role": self.role, "contains": self.contains, "response": self.response}
        if self.max_uses is not None:
            d["max_uses"] = self.max_uses
        return d


def load_script(path: str | Path) -> list[ScriptEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(ScriptEntry.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad script entry: {exc}") from exc
    return entries


def dump_script(entries: Iterable[ScriptEntry], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_dict(), ensure_ascii=False) + "\n")


class ScriptedBackend:
    """Replays the first matching :class:`ScriptEntry` for each request."""

    def __init__(self, entries: Iterable[ScriptEntry | dict[str, Any]], name: str = "scripted",
                 ledger: UsageLedger | None = None):
        self.entries = [e if isinstance(e, ScriptEntry) else ScriptEntry.from_dict(e) for e in entries]
        self.name = name
        self.ledger = ledger
        self.history: list[ModelRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, **kw: Any) -> "ScriptedBackend":
        return cls(load_script(path), **kw)

    def complete(self, request: ModelRequest) -> ModelResponse:
        with self._lock:
            self.history.append(request)
            for entry in self.entries:
                if entry.matches(request):
                    entry.uses += 1
                    break
            else:
                raise UnscriptedRequestError(
                    f"unscripted {request.role} request (digest {request.digest()})"
                )
        usage = Usage(
            whitespace_tokens(request.system_text) + whitespace_tokens(request.user_text),
            whitespace_tokens(entry.response),
        )
        if self.ledger is not None:
            self.ledger.add(self.name, request.role, usage)
        return ModelResponse(entry.response, usage)

    def calls(self, role: str | None = None) -> list[ModelRequest]:
        return [r for r in self.history if role is None or r.role == role]


# ---------------------------------------------------------------------------
# HTTP backend


class HTTPBackend:
    """Minimal OpenAI-style chat-completions client with retry and backoff."""

    def __init__(
        self,
        model: str,
        endpoint: str = "https://api.openai.com/v1/chat/completions",
        api_key_env: str = "OPENAI_API_KEY",
        name: str | None = None,
        ledger: UsageLedger | None = None,
        defaults: dict[str, Any] | None = None,
        retries: int = 2,
        backoff: float = 1.0,
        timeout: float = 60.0,
        client: httpx.Client | None = None,
    ):
        self.model = model
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.name = name or f"http:{model}"
        self.ledger = ledger
        self.defaults = dict(defaults or {})
        self.retries = retries
        self.backoff = backoff
        self._client = client or httpx.Client(timeout=timeout)

    def payload(self, request: ModelRequest) -> dict[str, Any]:
        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        messages.append({"role": "user", "content": request.user_text})
        body: dict[str, Any] = {"model": self.model, "messages": messages}
        for key in ("temperature", "top_p", "max_tokens", "stop"):
            value = getattr(request, key)
            if value is None:
                value = self.defaults.get(key)
            if value is not None:
                body[key] = value
        return body

    def complete(self, request: ModelRequest) -> ModelResponse:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise BackendError(f"environment variable {self.api_key_env} is not set")
        headers = {"Authorization": f"Bearer {key}"}
        body = self.payload(request)
        last: BackendError | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1) * (0.5 + random.random()))
            start = time.monotonic()
            try:
                resp = self._client.post(self.endpoint, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last = BackendError(f"transport error: {exc}")
                log.warning("%s attempt %d failed: %s", self.name, attempt + 1, exc)
                continue
            if resp.status_code >= 400:
                last = BackendError(f"provider returned {resp.status_code}: {resp.text[:200]}",
                                    status=resp.status_code)
                if resp.status_code < 500 and resp.status_code != 429:
                    raise last
                continue
            data = resp.json()
            try:
                text = data["choices"][0]["message"]["content"] or ""
            except (KeyError, IndexError, TypeError) as exc:
                raise BackendError(f"malformed provider response: {exc}") from exc
            u = data.get("usage") or {}
            usage = Usage(int(u.get("prompt_tokens", 0)), int(u.get("completion_tokens", 0)))
            if self.ledger is not None:
                self.ledger.add(self.name, request.role, usage)
            return ModelResponse(text, usage, time.monotonic() - start)
        assert last is not None
        raise last


@dataclass
class Backends:
    """The three frozen engines a training run talks to, plus their shared ledger."""

    forward: ModelBackend
    backward: ModelBackend
    optimizer: ModelBackend
    ledger: UsageLedger = field(default_factory=UsageLedger)

    @classmethod
    def scripted(cls, entries: Iterable[ScriptEntry | dict[str, Any]], name: str = "scripted") -> "Backends":
        ledger = UsageLedger()
        backend = ScriptedBackend(entries, name=name, ledger=ledger)
        return cls(backend, backend, backend, ledger)
