"""Per-user sessions: working store, credential multiplexing, episodic archive."""

from __future__ import annotations

import json
import logging
import os
import re
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .state_core import AgentState, Output, StateStep, run

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY = 1024
DEFAULT_IDLE_TIMEOUT = 1800.0

SessionId = str

_WORD_RE = re.compile(r"[a-z0-9]+")


class SessionError(Exception):
    pass


class CapacityExceeded(SessionError):
    pass


class UnknownSession(SessionError, KeyError):
    def __str__(self) -> str:
        return f"unknown session {self.args[0]!r}"


class SessionClosed(SessionError):
    pass


def new_session_id() -> SessionId:
    return secrets.token_hex(16)


@dataclass
class SessionRecord:
    id: SessionId
    state: AgentState
    created_at: float
    last_active: float
    credential_slot: int
    status: str = "open"
    # Per-session secrets (shield ledger, vault); dropped on close.
    resources: dict[str, Any] = field(default_factory=dict, repr=False)
    step_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    turn_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


@dataclass(frozen=True)
class EpisodeEntry:
    session_id: SessionId
    closed_at: float
    transcript: tuple[tuple[str, str], ...]

    def to_json(self) -> str:
        return json.dumps(
            {
                "session_id": self.session_id,
                "closed_at": self.closed_at,
                "transcript": [{"role": r, "text": t} for r, t in self.transcript],
            },
            ensure_ascii=False,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "EpisodeEntry":
        obj = json.loads(line)
        return cls(
            obj["session_id"],
            obj["closed_at"],
            tuple((e["role"], e["text"]) for e in obj["transcript"]),
        )


@dataclass(frozen=True)
class ArchiveReceipt:
    session_id: SessionId
    offset: int  # entry index in the episodic log


class EpisodicStore:
    """Append-only log of archived transcripts, optionally persisted as NDJSON."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: list[EpisodeEntry] = []
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._entries.append(EpisodeEntry.from_json(line))

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[EpisodeEntry]:
        with self._lock:
            return list(self._entries)

    def append(self, entry: EpisodeEntry) -> int:
        with self._lock:
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(entry.to_json() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            self._entries.append(entry)
            return len(self._entries) - 1

    def write_memory(self, session_id: str, text: str) -> str:
        offset = self.append(EpisodeEntry(session_id, time.time(), (("assistant", text),)))
        return f"episode:{offset}"

    def recall(self, session_id: SessionId, query: str, k: int) -> list[str]:
        """Keyword retrieval over one session's archived snippets.

        Snippets sharing no keyword with the query are not returned.  Ties on
        overlap break toward the most recently archived snippet.
        """
        if k < 1:
            raise ValueError("k must be positive")
        words = set(_WORD_RE.findall(query.lower()))
        scored = []
        seq = 0
        for entry in self.entries():
            if entry.session_id != session_id:
                continue
            for _role, text in entry.transcript:
                overlap = len(words & set(_WORD_RE.findall(text.lower())))
                if overlap:
                    scored.append((overlap, seq, text))
                seq += 1
        scored.sort(key=lambda x: (-x[0], -x[1]))
        return [text for _, _, text in scored[:k]]


class SessionManager:
    """Working store of open sessions backed by an episodic archive.

    Steps for one session run one at a time; different sessions proceed in
    parallel.  ``clock`` is injectable for idle-reaping tests.
    """

    def __init__(
        self,
        capacity: int = DEFAULT_CAPACITY,
        idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
        credential_pool_size: int = 1,
        archive: EpisodicStore | None = None,
        clock: Callable[[], float] = time.time,
    ):
        if capacity < 1 or credential_pool_size < 1:
            raise ValueError("capacity and credential_pool_size must be positive")
        self.capacity = capacity
        self.idle_timeout = idle_timeout
        self.credential_pool_size = credential_pool_size
        self.archive = archive if archive is not None else EpisodicStore()
        self.clock = clock
        self._open: dict[SessionId, SessionRecord] = {}
        self._closed: set[SessionId] = set()
        self._lock = threading.RLock()
        self.opened = 0
        self.closed = 0

    def __len__(self) -> int:
        return len(self._open)

    def open_ids(self) -> list[SessionId]:
        with self._lock:
            return list(self._open)

    def _least_loaded_slot(self, pool_size: int) -> int:
        load = [0] * pool_size
        for rec in self._open.values():
            if rec.credential_slot < pool_size:
                load[rec.credential_slot] += 1
        return min(range(pool_size), key=lambda i: (load[i], i))

    def open_session(self, credential_pool_size: int | None = None) -> SessionId:
        pool = credential_pool_size or self.credential_pool_size
        with self._lock:
            if len(self._open) >= self.capacity:
                raise CapacityExceeded(f"{self.capacity} sessions open")
            sid = new_session_id()
            while sid in self._open or sid in self._closed:
                sid = new_session_id()
            now = self.clock()
            self._open[sid] = SessionRecord(sid, AgentState(), now, now, self._least_loaded_slot(pool))
            self.opened += 1
        logger.info("[session:%s] opened", sid)
        return sid

    def _get(self, sid: SessionId) -> SessionRecord:
        with self._lock:
            rec = self._open.get(sid)
            if rec is None:
                if sid in self._closed:
                    raise SessionClosed(sid)
                raise UnknownSession(sid)
            return rec

    def record(self, sid: SessionId) -> SessionRecord:
        return self._get(sid)

    def state(self, sid: SessionId) -> AgentState:
        return self._get(sid).state

    def with_session(self, sid: SessionId, step: StateStep) -> Output:
        """Run ``step`` on the session's own state and store the result.

        A failing step leaves the stored state untouched.
        """
        rec = self._get(sid)
        with rec.step_lock:
            if rec.status != "open":
                raise SessionClosed(sid)
            out, nxt = run(step, rec.state)
            rec.state = nxt
            rec.last_active = self.clock()
        return out

    def close_session(self, sid: SessionId) -> ArchiveReceipt:
        with self._lock:
            rec = self._open.get(sid)
            if rec is None:
                raise UnknownSession(sid)
        with rec.step_lock:
            with self._lock:
                if self._open.get(sid) is not rec:
                    raise UnknownSession(sid)
                del self._open[sid]
                self._closed.add(sid)
                self.closed += 1
                rec.status = "closed"
            rec.resources.clear()
            offset = self.archive.append(EpisodeEntry(sid, self.clock(), rec.state.transcript))
        logger.info("[session:%s] closed, archived at %d", sid, offset)
        return ArchiveReceipt(sid, offset)

    def reap_idle(self, now: float | None = None) -> list[SessionId]:
        now = self.clock() if now is None else now
        with self._lock:
            idle = [sid for sid, rec in self._open.items() if now - rec.last_active > self.idle_timeout]
        reaped = []
        for sid in idle:
            try:
                self.close_session(sid)
            except UnknownSession:
                continue
            reaped.append(sid)
        return reaped

    def close_all(self) -> list[ArchiveReceipt]:
        receipts = []
        for sid in self.open_ids():
            try:
                receipts.append(self.close_session(sid))
            except UnknownSession:
                pass
        return receipts

    def recall(self, sid: SessionId, query: str, k: int) -> list[str]:
        return self.archive.recall(sid, query, k)

    def write_memory(self, session_id: str, text: str) -> str:
        return self.archive.write_memory(session_id, text)
