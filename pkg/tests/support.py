"""Shared drivers for the isolation, leak-fuzzing and HTTP tests."""

from __future__ import annotations

import random
import re
import string
import threading
import time

from agentgate.agent_runtime import Agent
from agentgate.eval_harness import EVAL_REGISTRY
from agentgate.llm_client import MockBackend
from agentgate.privacy_shield import ShieldPolicy
from agentgate.session import SessionManager

ALNUM = string.digits + string.ascii_letters


class Recorder:
    """Collects every model-bound request, keyed by session tag."""

    def __init__(self):
        self.lock = threading.Lock()
        self.payloads: dict[str, list[str]] = {}
        self.findings = 0
        self.requests = 0

    def __call__(self, request, findings):
        with self.lock:
            self.payloads.setdefault(request.session_tag, []).append(request.payload_text())
            self.findings += len(findings)
            self.requests += 1


def isolation_trial(seed: int, n_sessions: int = 8, turns: int = 2) -> tuple[list[str], bool]:
    """Run ``n_sessions`` concurrent sessions in a seeded random interleaving.

    Returns (violations, conservation_held).  A violation is any token or
    secret of one session showing up in another session's transcript or
    model payload.
    """
    rng = random.Random(seed)
    sessions = SessionManager(capacity=n_sessions)
    rec = Recorder()
    agent = Agent(sessions, MockBackend("slicer"), EVAL_REGISTRY, on_model_request=rec)
    secrets_by_sid = {}
    for _ in range(n_sessions):
        sid = sessions.open_session()
        text = "".join(rng.choice(ALNUM) for _ in range(16))
        agent.vault(sid).put("secret", text, "fpets")
        secrets_by_sid[sid] = text
    conservation = [True]
    check_lock = threading.Lock()

    def checkpoint():
        with check_lock, sessions._lock:
            conservation[0] &= sessions.opened - sessions.closed == len(sessions._open)

    delays = {sid: [rng.random() * 0.002 for _ in range(turns)] for sid in secrets_by_sid}
    spans = {sid: [(i, rng.randrange(i + 3, 17)) for i in (rng.randrange(0, 13) for _ in range(turns))]
             for sid in secrets_by_sid}
    errors = []

    def worker(sid):
        try:
            for delay, (i, j) in zip(delays[sid], spans[sid]):
                time.sleep(delay)
                got = agent.run_turn(sid, f"token={{{{secret}}}}, return chars {i}..{j}").text
                if got != secrets_by_sid[sid][i:j]:
                    errors.append(f"{sid[:6]} wrong answer {got!r}")
                checkpoint()
        except Exception as exc:  # surfaced as a violation below
            errors.append(f"{sid[:6]} {type(exc).__name__}: {exc}")

    threads = [threading.Thread(target=worker, args=(sid,)) for sid in secrets_by_sid]
    order = list(threads)
    rng.shuffle(order)
    for t in order:
        t.start()
    for t in threads:
        t.join()

    violations = list(errors)
    own_tokens = {sid: [e.token for e in agent.ledger(sid).entries()] for sid in secrets_by_sid}
    for sid in secrets_by_sid:
        transcript = "\n".join(text for _, text in sessions.state(sid).transcript)
        seen = transcript + "\n".join(rec.payloads.get(sid, []))
        for other, tokens in own_tokens.items():
            if other == sid:
                continue
            for tok in tokens:
                if tok in seen:
                    violations.append(f"token of {other[:6]} in {sid[:6]}")
            if secrets_by_sid[other] in seen or other in seen:
                violations.append(f"secret or id of {other[:6]} in {sid[:6]}")
    for sid in list(secrets_by_sid):
        sessions.close_session(sid)
        checkpoint()
    checkpoint()
    return violations, conservation[0] and len(sessions) == 0


def _fuzz_text(rng: random.Random) -> str:
    """A user message mixing prose, SSNs, card numbers and noise."""
    parts = []
    for _ in range(rng.randint(1, 5)):
        pick = rng.random()
        if pick < 0.25:
            d = "".join(rng.choice(string.digits) for _ in range(9))
            parts.append(f"{d[:3]}-{d[3:5]}-{d[5:]}" if rng.random() < 0.7 else d)
        elif pick < 0.4:
            parts.append(luhn_number(rng, rng.choice((13, 15, 16, 19))))
        elif pick < 0.7:
            parts.append(rng.choice(["please", "summarize", "my", "ssn is", "card", "thanks", "record"]))
        else:
            parts.append("".join(rng.choice(ALNUM + " -_.,") for _ in range(rng.randint(1, 12))))
    return " ".join(parts)


def luhn_number(rng: random.Random, length: int) -> str:
    body = [rng.randrange(10) for _ in range(length - 1)]
    body[0] = rng.randrange(1, 10)
    total = 0
    for k, d in enumerate(reversed(body)):
        if k % 2 == 0:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return "".join(map(str, body)) + str((10 - total % 10) % 10)


def fuzz_leak_turns(n: int, seed: int) -> tuple[int, int, int]:
    """Run ``n`` shielded turns with fuzzed inputs.

    Returns (audit findings, independent hits, model requests).  Findings come
    from ``audit_leak`` on every model-bound payload; hits are a second,
    independent check that no long secret of the turn (vault strings, SSNs and
    card numbers in the prompt) appears verbatim in any payload of that turn.
    """
    rng = random.Random(seed)
    sessions = SessionManager()
    rec = Recorder()
    agent = Agent(sessions, MockBackend("scripted"), EVAL_REGISTRY, ShieldPolicy("fpets"),
                  on_model_request=rec, seed=seed)
    sid = sessions.open_session()
    hits = 0
    for k in range(n):
        if k % 25 == 0:
            sessions.close_session(sid)
            sid = sessions.open_session()
        fam = rng.choice(("slicing", "ssn", "fhe", "free"))
        vault = agent.vault(sid)
        noise = _fuzz_text(rng)
        secrets = [w for w in _SECRET_RE.findall(noise)]
        if fam == "slicing":
            text = "".join(rng.choice(ALNUM) for _ in range(16))
            vault.put("secret", text, "fpets")
            secrets.append(text)
            i = rng.randrange(0, 13)
            prompt = f"token={{{{secret}}}}, return chars {i}..{rng.randrange(i + 3, 17)} {noise}"
        elif fam == "ssn":
            ssns = []
            for _ in range(4):
                d = "".join(rng.choice(string.digits) for _ in range(9))
                ssns.append(f"{d[:3]}-{d[3:5]}-{d[5:]}")
            vault.put("ssns", ssns, "fpets")
            secrets.extend(ssns)
            group = rng.choice(("first three", "last four"))
            prompt = f"Give me the {group} digits of the SSN for user {rng.randint(1, 4)}. {noise}"
        elif fam == "fhe":
            vault.put("numbers", [rng.randrange(256) for _ in range(6)], "she")
            i, j = rng.sample(range(6), 2)
            op = rng.choice(("sum", "product"))
            prompt = f"What is the {op} of the numbers at indices {i} and {j}? The numbers are {{{{numbers}}}}. {noise}"
        else:
            prompt = noise
        before = len(rec.payloads.get(sid, []))
        try:
            agent.run_turn(sid, prompt)
        except Exception:
            # A PlaintextLeak is already counted by the recorder; other
            # failures say nothing about leakage.
            pass
        for payload in rec.payloads.get(sid, [])[before:]:
            hits += sum(1 for sec in secrets if sec in payload)
    sessions.close_all()
    return rec.findings, hits, rec.requests


_SECRET_RE = re.compile(r"(?<![A-Za-z0-9])(?:\d{3}-\d{2}-\d{4}|\d{9}|\d{13,19})(?![A-Za-z0-9])")
