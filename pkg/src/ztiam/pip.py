"""Policy information point: per-user aggregates over the audit log."""

from __future__ import annotations

import logging
import threading
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Callable, Mapping, Optional

from ztiam.events import AuditEvent, EventKind, EventStore, StoreUnavailable

log = logging.getLogger(__name__)

PENALTY_KINDS = frozenset({EventKind.PENALTY, EventKind.MFA_FAILURE})
AUTHZ_KINDS = frozenset({EventKind.AUTHZ_PERMIT, EventKind.AUTHZ_DENY})


@dataclass(frozen=True)
class TrustProfile:
    """Aggregated behaviour of one user as of ``as_of``.

    ``per_resource_success`` counts permits inside the trailing cycle
    window; ``per_resource_requests`` and ``total_successful_authz`` are
    all-time. ``stale`` is set when the snapshot could not be refreshed.
    """

    user_id: str
    as_of: float
    total_successful_authz: int = 0
    per_resource_success: Mapping[str, int] = field(default_factory=dict)
    per_resource_requests: Mapping[str, int] = field(default_factory=dict)
    penalties_in_window: int = 0
    known_ips: frozenset = frozenset()
    known_services: frozenset = frozenset()
    last_login_at: Optional[float] = None
    usual_hours: frozenset = frozenset()
    first_granted: frozenset = frozenset()
    stale: bool = False

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "as_of": self.as_of,
            "total_successful_authz": self.total_successful_authz,
            "per_resource_success": dict(sorted(self.per_resource_success.items())),
            "per_resource_requests": dict(sorted(self.per_resource_requests.items())),
            "penalties_in_window": self.penalties_in_window,
            "known_ips": sorted(self.known_ips),
            "known_services": sorted(self.known_services),
            "last_login_at": self.last_login_at,
            "usual_hours": sorted(self.usual_hours),
            "first_granted": sorted(self.first_granted),
            "stale": self.stale,
        }


@dataclass(frozen=True)
class PipConfig:
    refresh_interval: float = 60.0
    staleness_bound: Optional[float] = None
    usual_hour_min_logins: int = 3

    def __post_init__(self) -> None:
        if self.refresh_interval <= 0:
            raise ValueError("pip refresh_interval must be positive")
        if self.staleness_bound is None:
            object.__setattr__(self, "staleness_bound", 2 * self.refresh_interval)
        if self.staleness_bound < self.refresh_interval:
            raise ValueError("pip staleness_bound must be >= refresh_interval")


def build_profile(
    user_id: str,
    events: list[AuditEvent],
    now: float,
    *,
    cycle_window: float,
    penalty_window: float,
    usual_hour_min_logins: int = 3,
) -> TrustProfile:
    """Aggregate one principal's events (timestamps ``<= now``) into a profile."""
    cycle_start = now - cycle_window
    penalty_start = now - penalty_window
    total = 0
    in_cycle: Counter = Counter()
    requests: Counter = Counter()
    granted: set[str] = set()
    penalties = 0
    ips: set[str] = set()
    services: set[str] = set()
    last_login = None
    hours: Counter = Counter()

    for e in events:
        ts = e.timestamp
        if ts > now:
            continue
        if e.kind in AUTHZ_KINDS and e.resource_id is not None:
            requests[e.resource_id] += 1
        if e.kind is EventKind.AUTHZ_PERMIT:
            total += 1
            if e.resource_id is not None:
                granted.add(e.resource_id)
                if ts >= cycle_start:
                    in_cycle[e.resource_id] += 1
        elif e.kind in PENALTY_KINDS:
            if ts >= penalty_start:
                penalties += 1
        elif e.kind is EventKind.LOGIN_SUCCESS and e.detail.get("stage") != "password":
            last_login = ts if last_login is None else max(last_login, ts)
            if ts >= cycle_start:
                hours[datetime.fromtimestamp(ts, tz=timezone.utc).hour] += 1
        if ts >= penalty_start:
            if e.ip is not None:
                ips.add(e.ip)
            if e.service_id is not None:
                services.add(e.service_id)

    return TrustProfile(
        user_id=user_id,
        as_of=now,
        total_successful_authz=total,
        per_resource_success=dict(in_cycle),
        per_resource_requests=dict(requests),
        penalties_in_window=penalties,
        known_ips=frozenset(ips),
        known_services=frozenset(services),
        last_login_at=last_login,
        usual_hours=frozenset(h for h, n in hours.items() if n >= usual_hour_min_logins),
        first_granted=frozenset(granted),
    )


class PolicyInformationPoint:
    """Caches :class:`TrustProfile` snapshots built from the event store.

    ``windows`` returns ``(cycle_window, penalty_window)`` in seconds; it
    is a callable so a reloaded trust configuration takes effect on the
    next refresh.
    """

    def __init__(
        self,
        store: EventStore,
        windows: Callable[[], tuple[float, float]],
        config: PipConfig = PipConfig(),
        clock: Callable[[], float] = time.time,
    ):
        self.store = store
        self.windows = windows
        self.config = config
        self.clock = clock
        self._lock = threading.Lock()
        self._cache: dict[str, TrustProfile] = {}
        self._bg: Optional[threading.Thread] = None
        self._bg_stop = threading.Event()
        self.refreshes = 0

    def _compute(self, user_id: str, now: float) -> TrustProfile:
        cycle, penalty = self.windows()
        events = self.store.for_principal(user_id)
        return build_profile(
            user_id, events, now, cycle_window=cycle, penalty_window=penalty,
            usual_hour_min_logins=self.config.usual_hour_min_logins,
        )

    def _install(self, profile: TrustProfile) -> TrustProfile:
        with self._lock:
            self.refreshes += 1
            held = self._cache.get(profile.user_id)
            if held is None or held.stale or held.as_of <= profile.as_of:
                self._cache[profile.user_id] = profile
        return profile

    def refresh(self, user_id: str, now: Optional[float] = None) -> TrustProfile:
        """Recompute from the store; on outage serve the last snapshot marked stale."""
        now = self.clock() if now is None else now
        try:
            profile = self._compute(user_id, now)
        except StoreUnavailable:
            with self._lock:
                held = self._cache.get(user_id)
            if held is None:
                raise
            log.warning("event store unavailable; serving stale profile for %s", user_id)
            return replace(held, stale=True)
        self._install(profile)
        return profile

    def get(self, user_id: str, now: Optional[float] = None) -> TrustProfile:
        now = self.clock() if now is None else now
        with self._lock:
            held = self._cache.get(user_id)
        if held is not None and not held.stale and 0 <= now - held.as_of <= self.config.staleness_bound:
            return held
        return self.refresh(user_id, now)

    def force_refresh(self, user_id: str, now: Optional[float] = None) -> TrustProfile:
        return self.refresh(user_id, now)

    def cached(self, user_id: str) -> Optional[TrustProfile]:
        with self._lock:
            return self._cache.get(user_id)

    # -- periodic refresh --------------------------------------------------

    def refresh_all(self) -> None:
        with self._lock:
            users = list(self._cache)
        for u in users:
            try:
                self.refresh(u)
            except StoreUnavailable:
                pass

    def start(self) -> None:
        if self._bg is not None:
            return
        self._bg_stop.clear()

        def loop() -> None:
            while not self._bg_stop.wait(self.config.refresh_interval):
                self.refresh_all()

        self._bg = threading.Thread(target=loop, name="pip-refresh", daemon=True)
        self._bg.start()

    def stop(self) -> None:
        if self._bg is None:
            return
        self._bg_stop.set()
        self._bg.join()
        self._bg = None

