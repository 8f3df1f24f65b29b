import json
import random
import struct
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import scan_count, scan_known, scan_last
from ztiam.events import (
    AuditEvent,
    EventKind,
    EventLog,
    EventStore,
    QueueFull,
    StoreUnavailable,
    correlation_id,
    read_records,
)
from ztiam.geo import GeoPoint

T0 = 1_750_000_000.0
KINDS = list(EventKind)


def ev(kind=EventKind.AUTHZ_PERMIT, principal="u", ts=T0, **kw):
    return AuditEvent(kind, principal, ts, **kw)


def test_field_order_is_fixed():
    e = ev(resource_id="r", ip="1.2.3.4", geo=GeoPoint(1, 2), service_id="web", detail={"b": "2", "a": "1"}, event_id=7)
    payload = json.loads(e.encode())
    assert list(payload) == ["event_id", "kind", "principal", "resource_id", "timestamp", "ip", "geo", "service_id", "detail"]
    assert list(payload["detail"]) == ["a", "b"]
    assert AuditEvent.from_json(payload) == e


def test_sequence_numbers_are_gapless(tmp_path):
    store = EventStore(tmp_path / "log")
    out = [store.append(ev(ts=T0 + i)) for i in range(10)]
    assert [e.event_id for e in out] == list(range(1, 11))
    assert [e.event_id for e in store.since(4)] == list(range(5, 11))


def test_restart_preserves_acknowledged_events(tmp_path):
    path = tmp_path / "events.log"
    log = EventLog(EventStore(path), capacity=64)
    tickets = [log.record(EventKind.LOGIN_SUCCESS, f"u{i % 3}", timestamp=T0 + i, detail={"i": str(i)}) for i in range(50)]
    acked = [t.wait(5) for t in tickets]
    log.close()
    reopened = EventStore(path)
    assert [e.to_json() for e in reopened.snapshot()] == [e.to_json() for e in acked]
    # appends continue the sequence
    assert reopened.append(ev()).event_id == 51


def test_partial_trailing_record_discarded(tmp_path):
    path = tmp_path / "events.log"
    store = EventStore(path)
    for i in range(3):
        store.append(ev(ts=T0 + i))
    store.close()
    with open(path, "ab") as fh:
        fh.write(struct.pack(">I", 500) + b'{"event_id": 4')
    reopened = EventStore(path)
    assert len(reopened) == 3
    assert reopened.append(ev()).event_id == 4
    reopened.close()
    assert len(EventStore(path)) == 4


def test_reader_does_not_modify_file(tmp_path):
    path = tmp_path / "events.log"
    store = EventStore(path)
    store.append(ev())
    store.close()
    with open(path, "ab") as fh:
        fh.write(b"\x00\x00")
    size = path.stat().st_size
    events, offset = read_records(path)
    assert len(events) == 1 and offset == size - 2
    assert path.stat().st_size == size


def test_concurrent_producers_each_event_once(tmp_path):
    log = EventLog(EventStore(tmp_path / "events.log"), capacity=10_000)
    per, producers = 250, 8

    def produce(p):
        for i in range(per):
            log.record(EventKind.AUTHZ_PERMIT, f"p{p}", timestamp=T0 + i, detail={"i": str(i)})

    threads = [threading.Thread(target=produce, args=(p,)) for p in range(producers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    log.flush()
    events = log.store.snapshot()
    assert len(events) == per * producers
    assert [e.event_id for e in events] == list(range(1, per * producers + 1))
    for p in range(producers):
        # per-producer order preserved
        assert [e.detail["i"] for e in log.store.for_principal(f"p{p}")] == [str(i) for i in range(per)]
    log.close()


def test_queue_full_raises_instead_of_blocking():
    log = EventLog(EventStore(), capacity=3, start=False)
    for _ in range(3):
        log.record(EventKind.PENALTY, "u")
    with pytest.raises(QueueFull):
        log.record(EventKind.PENALTY, "u")
    log.start()
    log.flush()
    assert len(log.store) == 3
    log.close()


def test_outage_delays_but_does_not_drop():
    store = EventStore()
    log = EventLog(store)
    store.available = False
    ticket = log.record(EventKind.PENALTY, "u")
    assert ticket.wait(0.2) is None
    store.available = True
    assert ticket.wait(5).event_id == 1
    log.close()


def test_queries_fail_during_outage():
    store = EventStore()
    store.available = False
    with pytest.raises(StoreUnavailable):
        store.count("u", [EventKind.PENALTY])


def test_correlation_id_stamped():
    log = EventLog(EventStore())
    token = correlation_id.set("req-123")
    try:
        t = log.record(EventKind.PENALTY, "u")
    finally:
        correlation_id.reset(token)
    assert t.wait(5).detail["correlation_id"] == "req-123"
    log.close()


def test_count_window_is_half_open():
    store = EventStore()
    store.append(ev(ts=10.0))
    store.append(ev(ts=20.0))
    assert store.count("u", [EventKind.AUTHZ_PERMIT], 10.0, 20.0) == 1
    with pytest.raises(ValueError):
        store.count("u", [EventKind.AUTHZ_PERMIT], 5, 1)


event_dicts = st.fixed_dictionaries({
    "kind": st.sampled_from([k.value for k in KINDS]),
    "principal": st.sampled_from(["a", "b", "c"]),
    "timestamp": st.integers(0, 100).map(float),
    "resource_id": st.sampled_from([None, "r1", "r2"]),
    "ip": st.sampled_from([None, "10.0.0.1", "10.0.0.2"]),
    "service_id": st.sampled_from([None, "web", "cli"]),
})


@settings(max_examples=150)
@given(
    st.lists(event_dicts, max_size=60),
    st.sampled_from(["a", "b", "c"]),
    st.sets(st.sampled_from([k.value for k in KINDS]), min_size=1),
    st.integers(0, 100),
    st.integers(0, 100),
    st.sampled_from([None, "r1", "r2"]),
)
def test_queries_match_full_scan(records, principal, kinds, a, b, rid):
    store = EventStore()
    for r in records:
        store.append(AuditEvent(EventKind(r["kind"]), r["principal"], r["timestamp"], r["resource_id"], r["ip"], None, r["service_id"]))
    t0, t1 = float(min(a, b)), float(max(a, b))
    assert store.count(principal, [EventKind(k) for k in kinds], t0, t1, rid) == scan_count(records, principal, kinds, t0, t1, rid)
    for kind in kinds:
        got = store.last(principal, EventKind(kind))
        want = scan_last(records, principal, kind)
        assert (got is None) == (want is None)
        if got is not None:
            assert (got.timestamp, got.resource_id, got.ip) == (want["timestamp"], want["resource_id"], want["ip"])
    for field in ("ip", "service_id"):
        assert store.known_values(principal, field, t0, t1) == scan_known(records, principal, field, t0, t1)


def test_randomized_store_restart_equivalence(tmp_path):
    rng = random.Random(5)
    path = tmp_path / "events.log"
    store = EventStore(path)
    for _ in range(300):
        store.append(ev(rng.choice(KINDS), rng.choice("abc"), float(rng.randrange(1000)), ip=rng.choice([None, "10.0.0.1"])))
    store.close()
    again = EventStore(path)
    assert [e.to_json() for e in again.snapshot()] == [e.to_json() for e in store.snapshot()]
