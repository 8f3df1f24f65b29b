"""Append-only audit log.

Producers call :meth:`EventLog.emit`, which only enqueues. A single
consumer thread drains the bounded queue into an :class:`EventStore`,
assigning gapless sequence numbers in append order.

On-disk format: a sequence of records, each a 4-byte big-endian length
followed by that many bytes of UTF-8 JSON. The JSON object carries the
fields ``event_id, kind, principal, resource_id, timestamp, ip, geo,
service_id, detail`` in that order (``detail`` keys sorted, no
whitespace). A truncated final record left by a crash is discarded on
open.
"""

from __future__ import annotations

import contextvars
import enum
import json
import logging
import os
import queue
import struct
import threading
import time
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Optional

from ztiam.geo import GeoPoint

log = logging.getLogger(__name__)

_LEN = struct.Struct(">I")

#: set by the gateway per request; stamped into every event's detail map
correlation_id: contextvars.ContextVar[Optional[str]] = contextvars.ContextVar("correlation_id", default=None)


class EventKind(str, enum.Enum):
    REGISTER = "Register"
    LOGIN_SUCCESS = "LoginSuccess"
    LOGIN_FAILURE = "LoginFailure"
    MFA_FAILURE = "MfaFailure"
    AUTHZ_PERMIT = "AuthzPermit"
    AUTHZ_DENY = "AuthzDeny"
    PENALTY = "Penalty"
    DEVICE_ENROLLED = "DeviceEnrolled"
    DEVICE_AUTH_SUCCESS = "DeviceAuthSuccess"
    DEVICE_AUTH_FAILURE = "DeviceAuthFailure"
    POLICY_UPDATED = "PolicyUpdated"


@dataclass(frozen=True)
class AuditEvent:
    kind: EventKind
    principal: str
    timestamp: float
    resource_id: Optional[str] = None
    ip: Optional[str] = None
    geo: Optional[GeoPoint] = None
    service_id: Optional[str] = None
    detail: Mapping[str, str] = field(default_factory=dict)
    event_id: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EventKind(self.kind))
        object.__setattr__(self, "detail", MappingProxyType({str(k): str(v) for k, v in self.detail.items()}))

    def to_json(self) -> dict:
        return {
            "event_id": self.event_id,
            "kind": self.kind.value,
            "principal": self.principal,
            "resource_id": self.resource_id,
            "timestamp": self.timestamp,
            "ip": self.ip,
            "geo": None if self.geo is None else [self.geo.lat, self.geo.lon],
            "service_id": self.service_id,
            "detail": dict(sorted(self.detail.items())),
        }

    def encode(self) -> bytes:
        return json.dumps(self.to_json(), separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    @classmethod
    def from_json(cls, obj: dict) -> "AuditEvent":
        geo = obj.get("geo")
        return cls(
            kind=EventKind(obj["kind"]),
            principal=obj["principal"],
            timestamp=obj["timestamp"],
            resource_id=obj.get("resource_id"),
            ip=obj.get("ip"),
            geo=None if geo is None else GeoPoint(*geo),
            service_id=obj.get("service_id"),
            detail=obj.get("detail") or {},
            event_id=obj.get("event_id", 0),
        )


class StoreUnavailable(Exception):
    pass


class QueueFull(Exception):
    """The event queue is at capacity; the caller must back off."""


def read_records(path: str | os.PathLike, offset: int = 0) -> tuple[list[AuditEvent], int]:
    """Read complete records from ``offset`` without modifying the file.

    Returns the events and the offset just past the last complete record,
    so a follower can poll a log that another process is appending to.
    """
    with open(path, "rb") as fh:
        fh.seek(offset)
        data = fh.read()
    events = []
    pos = 0
    while pos + _LEN.size <= len(data):
        (n,) = _LEN.unpack_from(data, pos)
        end = pos + _LEN.size + n
        if end > len(data):
            break
        events.append(AuditEvent.from_json(json.loads(data[pos + _LEN.size : end])))
        pos = end
    return events, offset + pos


class EventStore:
    """Durable ordered event log with a per-principal index.

    With ``path=None`` the store is memory-only.
    """

    def __init__(self, path: Optional[str | os.PathLike] = None):
        self.path = None if path is None else os.fspath(path)
        self._lock = threading.RLock()
        self._events: list[AuditEvent] = []
        self._by_principal: dict[str, list[AuditEvent]] = {}
        self._fh = None
        self.available = True
        if self.path is not None:
            self._load()
            self._fh = open(self.path, "ab")

    def _load(self) -> None:
        if not os.path.exists(self.path):
            return
        events, pos = read_records(self.path)
        for e in events:
            self._index(e)
        size = os.path.getsize(self.path)
        if pos != size:
            log.warning("discarding %d trailing bytes of a partial record in %s", size - pos, self.path)
            with open(self.path, "r+b") as fh:
                fh.truncate(pos)

    def _index(self, event: AuditEvent) -> None:
        expected = len(self._events) + 1
        if event.event_id != expected:
            raise ValueError(f"event log gap: expected sequence {expected}, found {event.event_id}")
        self._events.append(event)
        self._by_principal.setdefault(event.principal, []).append(event)

    def _check(self) -> None:
        if not self.available:
            raise StoreUnavailable("event store unavailable")

    def append(self, event: AuditEvent) -> AuditEvent:
        with self._lock:
            self._check()
            stored = replace(event, event_id=len(self._events) + 1)
            if self._fh is not None:
                payload = stored.encode()
                self._fh.write(_LEN.pack(len(payload)) + payload)
                self._fh.flush()
            self._index(stored)
            return stored

    def sync(self) -> None:
        with self._lock:
            if self._fh is not None:
                os.fsync(self._fh.fileno())

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()
                os.fsync(self._fh.fileno())
                self._fh.close()
                self._fh = None

    def __len__(self) -> int:
        return len(self._events)

    # -- queries ----------------------------------------------------------

    def snapshot(self) -> tuple[AuditEvent, ...]:
        with self._lock:
            self._check()
            return tuple(self._events)

    def since(self, after: int = 0) -> list[AuditEvent]:
        """Events with sequence number greater than ``after``."""
        with self._lock:
            self._check()
            return self._events[after:]

    def for_principal(self, principal: str) -> list[AuditEvent]:
        with self._lock:
            self._check()
            return list(self._by_principal.get(principal, ()))

    def count(
        self,
        principal: str,
        kinds: Iterable[EventKind],
        t0: float = float("-inf"),
        t1: float = float("inf"),
        resource_id: Optional[str] = None,
    ) -> int:
        """Events of ``principal`` with kind in ``kinds`` and timestamp in ``[t0, t1)``."""
        if t0 > t1:
            raise ValueError("window start after end")
        wanted = {EventKind(k) for k in kinds}
        return sum(
            1
            for e in self.for_principal(principal)
            if e.kind in wanted
            and t0 <= e.timestamp < t1
            and (resource_id is None or e.resource_id == resource_id)
        )

    def last(self, principal: str, kind: EventKind) -> Optional[AuditEvent]:
        kind = EventKind(kind)
        for e in reversed(self.for_principal(principal)):
            if e.kind is kind:
                return e
        return None

    def known_values(
        self, principal: str, field_name: str, t0: float = float("-inf"), t1: float = float("inf")
    ) -> set[str]:
        if field_name not in ("ip", "service_id"):
            raise ValueError("known_values supports 'ip' and 'service_id'")
        out = set()
        for e in self.for_principal(principal):
            v = getattr(e, field_name)
            if v is not None and t0 <= e.timestamp < t1:
                out.add(v)
        return out


class Ticket:
    """Enqueue acknowledgment; :meth:`wait` blocks until the event is stored."""

    __slots__ = ("_done", "event")

    def __init__(self) -> None:
        self._done = threading.Event()
        self.event: Optional[AuditEvent] = None

    def _resolve(self, event: AuditEvent) -> None:
        self.event = event
        self._done.set()

    def wait(self, timeout: Optional[float] = None) -> Optional[AuditEvent]:
        self._done.wait(timeout)
        return self.event


_STOP = object()


class EventLog:
    """Bounded asynchronous front end to an :class:`EventStore`."""

    def __init__(self, store: EventStore, capacity: int = 4096, *, start: bool = True, clock=time.time):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.store = store
        self.capacity = capacity
        self.clock = clock
        self._queue: queue.Queue = queue.Queue(maxsize=capacity)
        self._thread: Optional[threading.Thread] = None
        self._stopping = threading.Event()
        if start:
            self.start()

    def start(self) -> None:
        if self._thread is not None and self._thread.is_alive():
            return
        self._stopping.clear()
        self._thread = threading.Thread(target=self._drain, name="event-log-consumer", daemon=True)
        self._thread.start()

    def _drain(self) -> None:
        while True:
            item = self._queue.get()
            try:
                if item is _STOP:
                    return
                event, ticket = item
                while True:
                    try:
                        ticket._resolve(self.store.append(event))
                        break
                    except StoreUnavailable:
                        if self._stopping.is_set():
                            log.error("dropping %s on shutdown: store unavailable", event.kind.value)
                            break
                        time.sleep(0.05)
            finally:
                self._queue.task_done()

    def emit(self, event: AuditEvent) -> Ticket:
        """Enqueue ``event`` without waiting for persistence.

        Raises :class:`QueueFull` instead of blocking or dropping.
        """
        cid = correlation_id.get()
        if cid is not None and "correlation_id" not in event.detail:
            event = replace(event, detail={**event.detail, "correlation_id": cid})
        ticket = Ticket()
        try:
            self._queue.put_nowait((event, ticket))
        except queue.Full:
            raise QueueFull(f"event queue at capacity ({self.capacity})") from None
        return ticket

    def record(self, kind: EventKind, principal: str, **fields) -> Ticket:
        fields.setdefault("timestamp", self.clock())
        return self.emit(AuditEvent(kind=kind, principal=principal, **fields))

    def pending(self) -> int:
        return self._queue.qsize()

    def flush(self) -> None:
        """Wait until every enqueued event is persisted and synced."""
        if self._thread is None or not self._thread.is_alive():
            raise RuntimeError("event log consumer is not running")
        self._queue.join()
        self.store.sync()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stopping.set()
        self._queue.put(_STOP)
        self._thread.join()
        self._thread = None
        self.store.sync()

    def close(self) -> None:
        self.stop()
        self.store.close()
