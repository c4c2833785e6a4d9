"""End-to-end acceptance checks, one test per criterion.

Each test carries a ``criterion`` marker; ``conftest.py`` prints a PASS/FAIL
line per criterion in the terminal summary.  Run alone with
``pytest tests/test_acceptance.py -v``.
"""

import json
import os
import random
import re
import socket
import string
import time

import httpx
import pytest
from fastapi.testclient import TestClient

from agentgate import fpets, she
from agentgate.cli import main
from agentgate.eval_harness import (
    MODEL_CALLS_PER_TASK,
    binomial_interval,
    gen_tasks,
    render_report,
    run_eval,
    EvalReport,
)
from agentgate.gateway import GatewayConfig, build_gateway, create_app
from agentgate.llm_client import BackendUnavailable, LiveBackend, MockBackend
from agentgate.sandbox import TokenBucket, load_profile, run_attack_corpus
from agentgate.sandbox.corpus import ATTACK_CATEGORIES
from agentgate.session import EpisodicStore
from agentgate.state_core import AgentState, Output, answer, ask, bind, chain, memory_write, pure, run, same, tell, then
from agentgate.tasks import builtin_corpus

import support

criterion = pytest.mark.criterion
PRINTABLE = string.printable + "éß€"


def random_text(rng, max_len=64):
    return "".join(rng.choice(PRINTABLE) for _ in range(rng.randint(0, max_len)))


def random_key(rng):
    return fpets.FpetsKey(rng.randrange(10), rng.randrange(26), rng.randrange(26))


# -- 1, 2: FPETS --------------------------------------------------------------------


@criterion(1, "FPETS slicing law, 10,000 cases, < 1 s")
def test_fpets_slicing_law(record_property):
    rng = random.Random(1)
    cases = []
    for _ in range(10_000):
        m = random_text(rng)
        i = rng.randint(0, len(m))
        cases.append((random_key(rng), m, i, rng.randint(i, len(m))))
    started = time.perf_counter()
    failures = sum(1 for key, m, i, j in cases if fpets.encrypt(key, m[i:j]) != fpets.encrypt(key, m)[i:j])
    elapsed = time.perf_counter() - started
    record_property("detail", f"{10_000 - failures}/10000 in {elapsed:.2f}s")
    assert failures == 0
    assert elapsed < 1.0


@criterion(2, "FPETS round trip and format preservation, 10,000 strings, < 1 s")
def test_fpets_roundtrip_format(record_property):
    rng = random.Random(2)
    cases = [(random_key(rng), random_text(rng)) for _ in range(10_000)]
    started = time.perf_counter()
    failures = 0
    for key, m in cases:
        c = fpets.encrypt(key, m)
        failures += fpets.decrypt(key, c) != m or not fpets.same_format(m, c)
    elapsed = time.perf_counter() - started
    record_property("detail", f"{10_000 - failures}/10000 in {elapsed:.2f}s")
    assert failures == 0
    assert elapsed < 1.0


# -- 3, 4: SHE ----------------------------------------------------------------------


def random_circuit(key, rng, depth):
    t = key.params.t
    if depth == 0 or rng.random() < 0.3:
        m = rng.randrange(t)
        return m, she.encrypt(key, m, rng)
    (a, ca), (b, cb) = random_circuit(key, rng, depth - 1), random_circuit(key, rng, depth - 1)
    if rng.random() < 0.5:
        return (a * b) % t, she.mul(ca, cb)
    return (a + b) % t, she.add(ca, cb)


@criterion(3, "SHE add/mul homomorphism and depth-2 circuits, < 30 s")
def test_she_homomorphism(record_property):
    rng = random.Random(3)
    started = time.perf_counter()
    key = she.keygen(seed=rng.randrange(2**32))
    t = key.params.t
    assert key.p.bit_length() == 512 and t == 2**16
    bad = 0
    for op, ref in ((she.add, lambda a, b: (a + b) % t), (she.mul, lambda a, b: (a * b) % t)):
        for _ in range(1000):
            a, b = rng.randrange(t), rng.randrange(t)
            bad += she.decrypt(key, op(she.encrypt(key, a, rng), she.encrypt(key, b, rng))) != ref(a, b)
    for _ in range(200):
        want, ct = random_circuit(key, rng, 2)
        bad += she.decrypt(key, ct) != want
    elapsed = time.perf_counter() - started
    record_property("detail", f"{2200 - bad}/2200 in {elapsed:.1f}s")
    assert bad == 0
    assert elapsed < 30.0


@criterion(4, "SHE refuses over-budget ciphertexts, 100 constructed cases")
def test_she_noise_refusal(record_property):
    rng = random.Random(4)
    key = she.keygen(seed=rng.randrange(2**32))
    t = key.params.t
    cases = []
    for k in range(100):
        if k % 3 == 0:
            # four repeated squarings push the bound past p/2
            ct = she.encrypt(key, rng.randrange(t), rng)
            for _ in range(4):
                ct = she.mul(ct, ct)
        elif k % 3 == 1:
            # a product of eleven fresh ciphertexts
            ct = she.encrypt(key, rng.randrange(1, t), rng)
            for _ in range(10):
                ct = she.mul(ct, she.encrypt(key, rng.randrange(1, t), rng))
        else:
            ct = she.encrypt(key, rng.randrange(t), rng)
            ct = she.SheCiphertext(ct.c, key.p // 2 + rng.randrange(1, 2**64), ct.params_digest)
        cases.append(ct)
    refused = 0
    for ct in cases:
        try:
            she.decrypt(key, ct)
        except she.NoiseBudgetExceeded:
            refused += 1
    record_property("detail", f"{refused}/100 refused")
    assert refused == 100


# -- 5: privacy firewall --------------------------------------------------------------


@criterion(5, "no plaintext in model payloads over 500 fuzzed turns")
def test_privacy_firewall(record_property):
    findings, hits, requests = support.fuzz_leak_turns(500, seed=5)
    record_property("detail", f"{findings} findings, {hits} independent hits, {requests} payloads")
    assert requests >= 500
    assert findings == 0 and hits == 0


# -- 6, 7: round-trip success ---------------------------------------------------------

PERFECT = {"slicing": "slicer", "ssn": "slicer", "fhe": "arithmetic"}


@criterion(6, "Succ = 1.00 with perfect mocks (< 60 s); flaky(0.5) within the 99% interval")
def test_round_trip_machinery(record_property):
    started = time.perf_counter()
    details = []
    for family, behavior in PERFECT.items():
        tasks = gen_tasks(family, 100, seed=6)
        for mode in ("ciphertext", "plaintext"):
            row = run_eval(tasks, MockBackend(behavior), mode, seed=6).rows[0]
            assert (row.n, row.n_ok) == (100, 100), (family, mode, row)
    elapsed = time.perf_counter() - started
    details.append(f"600/600 in {elapsed:.1f}s")
    assert elapsed < 60.0
    for family in PERFECT:
        tasks = gen_tasks(family, 100, seed=6)
        row = run_eval(tasks, MockBackend("scripted", seed=6, failure_rate=0.5), "ciphertext", seed=6).rows[0]
        lo, hi = binomial_interval(100, 0.5 ** MODEL_CALLS_PER_TASK[family])
        details.append(f"{family} N'={row.n_ok} in [{lo}, {hi}]")
        assert lo <= row.n_ok <= hi
    record_property("detail", "; ".join(details))


def fake_live_model(request):
    """Stands in for a hosted model: slices whatever token it is shown."""
    body = json.loads(request.content)
    m = re.search(r"token=(\S+), return chars (\d+)\.\.(\d+)", body["messages"][-1]["content"])
    text = f"FINAL {m.group(1)[int(m.group(2)):int(m.group(3))]}" if m else "FINAL ?"
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


@criterion(7, "live mode renders the Succ table format (live figures are not reproducible offline)")
def test_live_mode_format(record_property, capsys, monkeypatch):
    for name in [n for n in os.environ if n.startswith("AGENT_MODEL_")]:
        monkeypatch.delenv(name)
    with pytest.raises(BackendUnavailable):
        LiveBackend.from_env({})
    assert main(["eval", "run", "--family", "slicing", "--n", "2", "--live"]) == 1
    capsys.readouterr()
    live = LiveBackend("http://model.invalid/v1/chat", {0: "k"}, model="gpt-4-turbo",
                       transport=httpx.MockTransport(fake_live_model))
    tasks = gen_tasks("slicing", 10, seed=7)
    report = EvalReport()
    for mode in ("ciphertext", "plaintext"):
        report.merge(run_eval(tasks, live, mode, model_name="gpt-4-turbo"))
    text = render_report(report, "table2")
    lines = text.splitlines()
    assert lines[0].split() == ["Agent", "Model", "SuccCiph", "SuccPlain"]
    assert re.fullmatch(r"Slicing\s+gpt-4-turbo\s+\d+\.\d%\s+\d+\.\d%", lines[1])
    assert lines[1].split()[2:] == ["100.0%", "100.0%"]
    record_property("detail", "format only, against an in-process transport")


# -- 8: sandbox efficacy --------------------------------------------------------------


@criterion(8, "secure profile #Exec = 0, plain executes every corpus task")
def test_sandbox_efficacy(record_property, tmp_path):
    corpus = builtin_corpus()
    secure = run_attack_corpus(load_profile("secure", tmp_path), corpus, MockBackend("complier"), workdir=tmp_path / "s")
    plain = run_attack_corpus(load_profile("plain", tmp_path), corpus, MockBackend("complier"), workdir=tmp_path / "p")
    for cat in ATTACK_CATEGORIES:
        assert secure.rows[cat].exec == 0
        assert plain.rows[cat].exec == plain.rows[cat].task
    text = render_report(EvalReport(attack=secure), "table1")
    assert text.splitlines()[0].split() == ["#Task", "#Gen", "#Exec", "Attacked"]
    record_property("detail", f"secure {secure.total.exec}/{secure.total.task}, plain {plain.total.exec}/{plain.total.task}")


# -- 9: session isolation -------------------------------------------------------------


@criterion(9, "100 interleavings of 8 sessions: no cross-session tokens, conservation holds")
def test_session_isolation(record_property):
    violations, broken = 0, 0
    for seed in range(100):
        v, conserved = support.isolation_trial(seed, n_sessions=8)
        violations += len(v)
        broken += not conserved
    record_property("detail", f"{violations} violations, {broken} conservation breaks")
    assert violations == 0 and broken == 0


# -- 10: token bucket ------------------------------------------------------------------


@criterion(10, "token bucket b=5, r=1: at most 15 grants per 10 s window, matches the oracle")
def test_token_bucket(record_property):
    times = [k / 20 for k in range(20 * 60)]  # requests every 50 ms for a minute
    bucket = TokenBucket(5, 1)
    got = [bucket.take(t) for t in times]
    grants, expected = 0, []
    for t in times:
        # the n-th grant happens at the first request with n <= b + r*t
        ok = grants + 1 <= 5 + 1 * t + 1e-9
        grants += ok
        expected.append(ok)
    assert got == expected
    granted = [t for t, ok in zip(times, got) if ok]
    worst = max(sum(1 for g in granted if s <= g < s + 10) for s in times)
    record_property("detail", f"{len(granted)} grants, worst window {worst}")
    assert worst <= 15


# -- 11: monad laws ----------------------------------------------------------------------


def echo_model(messages):
    return f"seen {len(messages)}: {messages[-1][1][:12]}"


def random_program(rng):
    words = ["".join(rng.choice("abcxyz 0123") for _ in range(rng.randint(0, 8))) for _ in range(6)]
    return [(rng.choice(("tell", "ask", "mem", "pure")), rng.choice(("user", "assistant", "tool")), w)
            for w in words[: rng.randint(1, 6)]]


def build(desc, sink):
    kind, role, text = desc
    if kind == "tell":
        return tell(role, text)
    if kind == "ask":
        return ask(echo_model, text)
    if kind == "mem":
        return memory_write(sink, "s", text)
    return pure(text)


def cont(descs, sink):
    return lambda out: then(tell("assistant", "got " + out.payload), chain([build(d, sink) for d in descs]))


def fresh(make, state):
    return run(make(EpisodicStore()), state)


@criterion(11, "monad laws on 200 random step programs")
def test_monad_laws(record_property):
    rng = random.Random(11)
    held = 0
    for _ in range(200):
        m, k1, k2 = random_program(rng), random_program(rng), random_program(rng)
        a = "".join(rng.choice("abc 01") for _ in range(rng.randint(0, 6)))
        s0 = AgentState(transcript=tuple(("user", w) for _, _, w in random_program(rng)[:3]), step_count=rng.randint(0, 5))

        def prog(sink):
            return chain([build(d, sink) for d in m])

        left = same(fresh(lambda sk: bind(pure(a), cont(k1, sk)), s0), fresh(lambda sk: cont(k1, sk)(answer(a)), s0))
        right = same(fresh(lambda sk: bind(prog(sk), pure), s0), fresh(prog, s0))
        assoc = same(
            fresh(lambda sk: bind(bind(prog(sk), cont(k1, sk)), cont(k2, sk)), s0),
            fresh(lambda sk: bind(prog(sk), lambda x: bind(cont(k1, sk)(x), cont(k2, sk))), s0),
        )
        held += left and right and assoc
    record_property("detail", f"{held}/200 programs")
    assert held == 200
    assert isinstance(run(pure(Output("answer", "x")), AgentState())[0], Output)


# -- 12: service contract ----------------------------------------------------------------


@pytest.fixture
def no_egress(monkeypatch):
    def refuse(self, address):
        if self.family in (socket.AF_INET, socket.AF_INET6):
            raise AssertionError(f"network egress attempted to {address}")
        return real(self, address)

    real = socket.socket.connect
    monkeypatch.setattr(socket.socket, "connect", refuse)


@criterion(12, "HTTP lifecycle 404/429/422 with the mock backend and no egress")
def test_service_contract(record_property, tmp_path, no_egress):
    cfg = GatewayConfig(fs_root=str(tmp_path), capacity=1024, reap_interval=3600, shield_mode="block")
    gw = build_gateway(cfg, MockBackend("scripted"))
    seen = {}
    with TestClient(create_app(cfg, gateway=gw)) as client:
        sid = client.post("/sessions").json()["session_id"]
        seen["message"] = client.post(f"/sessions/{sid}/messages", json={"text": "hello"}).status_code
        seen["blocked"] = client.post(f"/sessions/{sid}/messages", json={"text": "ssn 123-45-6789"}).status_code
        seen["delete"] = client.delete(f"/sessions/{sid}").status_code
        seen["delete again"] = client.delete(f"/sessions/{sid}").status_code
        seen["message closed"] = client.post(f"/sessions/{sid}/messages", json={"text": "x"}).status_code
        opens = [client.post("/sessions").status_code for _ in range(1025)]
        seen["open 1025th"] = opens[-1]
    record_property("detail", ", ".join(f"{k}={v}" for k, v in seen.items()))
    assert seen == {"message": 200, "blocked": 422, "delete": 200, "delete again": 404,
                    "message closed": 404, "open 1025th": 429}
    assert opens[:1024] == [200] * 1024
    assert gw.sessions.opened == gw.sessions.closed == 1025
