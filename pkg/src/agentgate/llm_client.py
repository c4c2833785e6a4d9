"""Model backends: seeded scripted mocks and a remote chat-completion client.

Both expose ``complete(request) -> str``.  Requests are self-contained: the
full message list travels with every call, so sessions sharing a credential
slot never share context.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

MESSAGE_ROLES = ("system", "user", "assistant", "tool")
MALFORMED = "<<garbled model output>>"


class BackendUnavailable(RuntimeError):
    pass


class MalformedResponse(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelRequest:
    messages: tuple[tuple[str, str], ...]
    session_tag: str = ""
    temperature: float = 0.0
    credential_slot: int = 0

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.messages[0][0] != "system":
            raise ValueError("first message must be the system directive")
        for role, _ in self.messages:
            if role not in MESSAGE_ROLES:
                raise ValueError(f"unknown role {role!r}")

    def payload_text(self) -> str:
        """Everything the model will see, as one string (for leak audits)."""
        return "\n".join(text for _, text in self.messages)


class Backend(Protocol):
    def complete(self, request: ModelRequest) -> str: ...


# -- scripted mocks ---------------------------------------------------------

BEHAVIORS = ("slicer", "arithmetic", "complier", "refuser", "scripted")

_SLICE_RE = re.compile(r"token=(\S+?),?\s+return chars (\d+)\.\.(\d+)")
_SSN_RE = re.compile(r"(first three|last four) digits of (?:the )?SSN for user (\d+)", re.I)
_ARITH_RE = re.compile(r"(sum|product) of the numbers at indices (\d+) and (\d+)", re.I)
_COMMAND_RE = re.compile(r"^Command: (.+)$", re.M)


def _last(messages: Sequence[tuple[str, str]], role: str) -> Optional[str]:
    for r, text in reversed(messages):
        if r == role:
            return text
    return None


def _tool_results_since_user(messages: Sequence[tuple[str, str]]) -> list[str]:
    out = []
    for r, text in reversed(messages):
        if r == "user":
            break
        if r == "tool":
            out.append(text)
    return out[::-1]


def _grammar_wanted(messages: Sequence[tuple[str, str]]) -> bool:
    return "FINAL" in messages[0][1]


def _slicer(messages) -> str:
    prompt = _last(messages, "user") or ""
    m = _SLICE_RE.search(prompt)
    if m:
        token, i, j = m.group(1), int(m.group(2)), int(m.group(3))
        return f"FINAL {token[i:j]}"
    m = _SSN_RE.search(prompt)
    if m:
        results = _tool_results_since_user(messages)
        if not results:
            return f"ACTION fetch_ssn(user={int(m.group(2))})"
        token = results[-1].strip()
        part = token[:3] if m.group(1).lower().startswith("first") else token[-4:]
        return f"FINAL {part}"
    return "FINAL I could not find a slicing request."


def _arithmetic(messages) -> str:
    prompt = _last(messages, "user") or ""
    m = _ARITH_RE.search(prompt)
    if not m:
        return "FINAL I could not find an arithmetic request."
    results = _tool_results_since_user(messages)
    if not results:
        tool = "add" if m.group(1).lower() == "sum" else "mul"
        return f"ACTION {tool}(i={int(m.group(2))}, j={int(m.group(3))})"
    return f"FINAL {results[-1].strip()}"


def _complier(messages) -> str:
    prompt = _last(messages, "user") or ""
    m = _COMMAND_RE.search(prompt)
    if not m:
        return "FINAL Done."
    return f"ACTION bash(cmd={json.dumps(m.group(1).strip())})"


def _refuser(messages) -> str:
    return "FINAL I can't help with that."


def _scripted(messages) -> str:
    prompt = _last(messages, "user") or ""
    if _COMMAND_RE.search(prompt):
        return _complier(messages)
    if _ARITH_RE.search(prompt):
        return _arithmetic(messages)
    return _slicer(messages)


_BEHAVIOR_FNS: dict[str, Callable] = {
    "slicer": _slicer,
    "arithmetic": _arithmetic,
    "complier": _complier,
    "refuser": _refuser,
    "scripted": _scripted,
}


@dataclass(frozen=True)
class MockBackend:
    """Deterministic test double.

    ``failure_rate`` turns the mock into ``flaky(f)``: each request fails
    independently with probability ``f``, drawn from a generator keyed on
    ``(seed, request)`` so equal inputs give equal outputs.  The session tag
    is left out of the key, so a seeded run repeats across processes even
    though session ids are random.
    """

    behavior: str = "scripted"
    seed: int = 0
    failure_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.behavior not in _BEHAVIOR_FNS:
            raise ValueError(f"unknown mock behavior {self.behavior!r}")
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError("failure rate must lie in [0, 1]")

    @property
    def name(self) -> str:
        if self.failure_rate:
            return f"mock-flaky({self.failure_rate:g})/{self.behavior}"
        return f"mock-{self.behavior}"

    def _draw(self, request: ModelRequest) -> float:
        key = repr((self.seed, request.messages))
        if request.session_tag:
            key = key.replace(request.session_tag, "")
        h = hashlib.sha256(key.encode()).digest()
        return random.Random(h).random()

    def complete(self, request: ModelRequest) -> str:
        if self.failure_rate and self._draw(request) < self.failure_rate:
            return MALFORMED
        reply = _BEHAVIOR_FNS[self.behavior](request.messages)
        if not _grammar_wanted(request.messages) and reply.startswith("FINAL "):
            return reply[len("FINAL "):]
        return reply


_MOCK_SPEC_RE = re.compile(r"^(?:flaky\(([0-9.]+)\)(?:/(\w+))?|(\w+))(?::(-?\d+))?$")


def parse_mock_spec(spec: str, default_behavior: str = "scripted") -> MockBackend:
    """Parse ``<kind>[:seed]`` where kind is a behavior or ``flaky(f)[/<behavior>]``."""
    m = _MOCK_SPEC_RE.match(spec.strip())
    if m is None:
        raise ValueError(f"bad mock spec {spec!r}")
    seed = int(m.group(4)) if m.group(4) else 0
    if m.group(1) is not None:
        return MockBackend(m.group(2) or default_behavior, seed, float(m.group(1)))
    return MockBackend(m.group(3), seed)


# -- live client --------------------------------------------------------------


class LiveBackend:
    """Chat-completion client over HTTP with bearer credentials per slot.

    Request body: ``{"model", "messages": [{"role", "content"}], "temperature"}``;
    the reply text is read from ``choices[0].message.content``.  Tool
    feedback is sent as a user message prefixed ``[tool]``.
    """

    def __init__(
        self,
        endpoint: str,
        keys: dict[int, str],
        model: str = "gpt-3.5-turbo",
        timeout: float = 30.0,
        attempts: int = 3,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        if not keys:
            raise ValueError("at least one credential is required")
        self.endpoint = endpoint
        self.keys = dict(keys)
        self.model = model
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.sleep = sleep
        self._transport = transport
        self._clients: dict[int, httpx.Client] = {}
        self._lock = threading.Lock()

    @property
    def name(self) -> str:
        return self.model

    @classmethod
    def from_env(cls, environ: dict[str, str] | None = None, **kwargs) -> "LiveBackend":
        env = os.environ if environ is None else environ
        endpoint = env.get("AGENT_MODEL_ENDPOINT")
        if not endpoint:
            raise BackendUnavailable("AGENT_MODEL_ENDPOINT is not set")
        keys = {}
        for name, value in env.items():
            m = re.fullmatch(r"AGENT_MODEL_KEY_(\d+)", name)
            if m:
                keys[int(m.group(1))] = value
        if not keys:
            raise BackendUnavailable("no AGENT_MODEL_KEY_<slot> variables set")
        if "AGENT_MODEL_NAME" in env:
            kwargs.setdefault("model", env["AGENT_MODEL_NAME"])
        return cls(endpoint, keys, **kwargs)

    def _client(self, slot: int) -> tuple[httpx.Client, str]:
        slots = sorted(self.keys)
        key_slot = slot if slot in self.keys else slots[slot % len(slots)]
        with self._lock:
            client = self._clients.get(key_slot)
            if client is None:
                client = httpx.Client(timeout=self.timeout, transport=self._transport)
                self._clients[key_slot] = client
        return client, self.keys[key_slot]

    def body(self, request: ModelRequest) -> dict:
        messages = []
        for role, text in request.messages:
            if role == "tool":
                role, text = "user", f"[tool] {text}"
            messages.append({"role": role, "content": text})
        return {"model": self.model, "messages": messages, "temperature": request.temperature}

    def complete(self, request: ModelRequest) -> str:
        client, key = self._client(request.credential_slot)
        headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
        body = self.body(request)
        last_error: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = client.post(self.endpoint, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_error = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = BackendUnavailable(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                raise MalformedResponse("response lacks choices[0].message.content") from None
            if not isinstance(content, str):
                raise MalformedResponse("message content is not text")
            return content
        raise BackendUnavailable(f"gave up after {self.attempts} attempts: {last_error}")

    def close(self) -> None:
        for c in self._clients.values():
            c.close()
