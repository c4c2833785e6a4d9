import json
import threading

import pytest

from agentgate.session import (
    CapacityExceeded,
    EpisodeEntry,
    EpisodicStore,
    SessionClosed,
    SessionManager,
    UnknownSession,
)
from agentgate.state_core import fail, tell

import support


class FakeClock:
    def __init__(self, t=1000.0):
        self.t = t

    def __call__(self):
        return self.t


def test_open_and_close_roundtrip(tmp_path):
    archive = EpisodicStore(tmp_path / "episodes.ndjson")
    mgr = SessionManager(archive=archive)
    sid = mgr.open_session()
    assert len(sid) == 32 and int(sid, 16) >= 0
    mgr.with_session(sid, tell("user", "hello"))
    receipt = mgr.close_session(sid)
    assert receipt.session_id == sid and receipt.offset == 0
    line = (tmp_path / "episodes.ndjson").read_text().strip()
    obj = json.loads(line)
    assert obj["session_id"] == sid
    assert obj["transcript"] == [{"role": "user", "text": "hello"}]


def test_ids_are_distinct():
    mgr = SessionManager()
    ids = {mgr.open_session() for _ in range(200)}
    assert len(ids) == 200


def test_capacity_guard():
    mgr = SessionManager(capacity=3)
    for _ in range(3):
        mgr.open_session()
    with pytest.raises(CapacityExceeded):
        mgr.open_session()
    mgr.close_session(mgr.open_ids()[0])
    mgr.open_session()


def test_unknown_and_closed():
    mgr = SessionManager()
    with pytest.raises(UnknownSession):
        mgr.with_session("nope", tell("user", "x"))
    sid = mgr.open_session()
    mgr.close_session(sid)
    with pytest.raises(SessionClosed):
        mgr.with_session(sid, tell("user", "x"))
    with pytest.raises(UnknownSession):
        mgr.close_session(sid)


def test_failed_step_leaves_state():
    mgr = SessionManager()
    sid = mgr.open_session()
    mgr.with_session(sid, tell("user", "a"))
    before = mgr.state(sid)
    with pytest.raises(Exception):
        mgr.with_session(sid, fail("nope"))
    assert mgr.state(sid) == before


def test_step_count_tracks_steps():
    mgr = SessionManager()
    sid = mgr.open_session()
    for k in range(5):
        mgr.with_session(sid, tell("user", str(k)))
    assert mgr.state(sid).step_count == 5


def test_idle_reaping_with_fake_clock():
    clock = FakeClock()
    mgr = SessionManager(idle_timeout=60, clock=clock)
    a, b = mgr.open_session(), mgr.open_session()
    clock.t += 45
    mgr.with_session(b, tell("user", "still here"))
    clock.t += 30
    assert mgr.reap_idle() == [a]
    assert mgr.open_ids() == [b]
    assert len(mgr.archive) == 1


def test_close_all_conserves():
    mgr = SessionManager()
    for _ in range(10):
        mgr.open_session()
    mgr.close_session(mgr.open_ids()[3])
    receipts = mgr.close_all()
    assert len(receipts) == 9
    assert mgr.opened - mgr.closed == len(mgr) == 0


def test_credential_slots_balanced():
    mgr = SessionManager(credential_pool_size=3)
    sids = [mgr.open_session() for _ in range(7)]
    slots = [mgr.record(s).credential_slot for s in sids]
    assert slots == [0, 1, 2, 0, 1, 2, 0]
    assert mgr.record(sids[0]).credential_slot == 0


def test_recall_ranking(tmp_path):
    store = EpisodicStore()
    store.append(EpisodeEntry("s1", 1.0, (("user", "the blue car is fast"), ("assistant", "red apples"))))
    store.append(EpisodeEntry("s2", 2.0, (("user", "blue car from another session"),)))
    store.append(EpisodeEntry("s1", 3.0, (("user", "blue sky"),)))
    assert store.recall("s1", "blue car", 5) == ["the blue car is fast", "blue sky"]
    assert store.recall("s1", "blue", 1) == ["blue sky"]
    assert store.recall("s1", "nothing matches", 3) == []
    with pytest.raises(ValueError):
        store.recall("s1", "x", 0)


def test_archive_reloads(tmp_path):
    path = tmp_path / "ep.ndjson"
    s = EpisodicStore(path)
    s.append(EpisodeEntry("sid", 5.0, (("user", "ünïcode ok"),)))
    again = EpisodicStore(path)
    assert again.entries() == s.entries()


def test_concurrent_steps_serialise_per_session():
    mgr = SessionManager()
    sid = mgr.open_session()

    def worker(k):
        for j in range(50):
            mgr.with_session(sid, tell("user", f"{k}:{j}"))

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    state = mgr.state(sid)
    assert state.step_count == 400 == len(state.transcript)


@pytest.mark.parametrize("seed", range(10))
def test_isolation_interleavings(seed):
    violations, conserved = support.isolation_trial(seed)
    assert violations == []
    assert conserved
