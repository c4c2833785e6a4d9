"""Remote-access control: host white/blacklists and per-(session, host) token buckets."""

from __future__ import annotations

import fnmatch
import threading
from dataclasses import dataclass, field
from typing import Optional


_EPS = 1e-9


@dataclass
class TokenBucket:
    capacity: float
    refill_rate: float
    tokens: float = -1.0
    last: Optional[float] = None

    def __post_init__(self) -> None:
        if self.capacity <= 0 or self.refill_rate < 0:
            raise ValueError("capacity must be positive and refill rate non-negative")
        if self.tokens < 0:
            self.tokens = self.capacity

    def take(self, now: float) -> bool:
        if self.last is not None and now > self.last:
            self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.refill_rate)
        if self.last is None or now > self.last:
            self.last = now
        # tolerate float drift from summing many small refills
        if self.tokens >= 1.0 - _EPS:
            self.tokens = max(0.0, self.tokens - 1.0)
            return True
        return False


@dataclass(frozen=True)
class Decision:
    granted: bool
    reason: str = ""


GRANTED = Decision(True)


@dataclass
class NetworkPolicy:
    whitelist: tuple[str, ...] = ()
    blacklist: tuple[str, ...] = ()
    capacity: float = 10.0
    refill_rate: float = 1.0
    _buckets: dict = field(default_factory=dict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bucket(self, session: str, host: str) -> TokenBucket:
        key = (session, host.lower())
        b = self._buckets.get(key)
        if b is None:
            b = self._buckets[key] = TokenBucket(self.capacity, self.refill_rate)
        return b


def _matches(host: str, patterns: tuple[str, ...]) -> bool:
    host = host.lower()
    return any(fnmatch.fnmatchcase(host, p.lower()) for p in patterns)


def check_remote(policy: NetworkPolicy, session: str, host: str, now: float) -> Decision:
    if _matches(host, policy.blacklist):
        return Decision(False, "blacklisted")
    if policy.whitelist and not _matches(host, policy.whitelist):
        return Decision(False, "not_whitelisted")
    with policy._lock:
        if policy.bucket(session, host).take(now):
            return GRANTED
    return Decision(False, "rate_limited")
