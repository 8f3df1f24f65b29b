"""Trust scoring and the hybrid criteria/score authorization decision."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Optional

from ztiam.events import EventKind, EventLog
from ztiam.geo import GeoPoint, geo_distance_km
from ztiam.pip import TrustProfile
from ztiam.policy.functions import RuntimeTypeError, in_daily_window, parse_clock
from ztiam.policy.model import Decision, PolicySet, RequestContext
from ztiam.policy.pdp import evaluate

FACTOR_NAMES = ("geo", "res", "hist", "pen", "meta")


class EvaluationMode(str, enum.Enum):
    CRITERIA = "Criteria"
    SCORE_BASED = "ScoreBased"


class Outcome(str, enum.Enum):
    ALLOW = "Allow"
    DENY = "Deny"
    REEVALUATE = "Reevaluate"


@dataclass(frozen=True)
class TrustConfig:
    weights: tuple[float, float, float, float, float] = (0.25, 0.20, 0.15, 0.25, 0.15)
    threshold: float = 0.6
    d0_km: float = 100.0
    dmax_km: float = 1000.0
    k_res: int = 5
    k_hist: int = 20
    promote_n: int = 10
    cycle_window: float = 7 * 86400.0
    penalty_window: float = 7 * 86400.0
    demote_penalties: int = 3
    # optional global daily access window ("HH:MM", "HH:MM"), UTC
    access_window: Optional[tuple[str, str]] = None

    def __post_init__(self) -> None:
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if len(w) != 5:
            raise ValueError("trust weights need exactly five entries (geo, res, hist, pen, meta)")
        if any(x < 0 or not math.isfinite(x) for x in w):
            raise ValueError("trust weights must be non-negative")
        if abs(math.fsum(w) - 1.0) > 1e-9:
            raise ValueError(f"trust weights must sum to 1, got {math.fsum(w)!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("trust threshold must lie in [0, 1]")
        if not 0 < self.d0_km < self.dmax_km:
            raise ValueError("need 0 < d0_km < dmax_km")
        for name in ("k_res", "k_hist", "promote_n", "demote_penalties"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.cycle_window <= 0 or self.penalty_window <= 0:
            raise ValueError("cycle and penalty windows must be positive")
        if self.access_window is not None:
            try:
                start, end = self.access_window
                parse_clock(start)
                parse_clock(end)
            except (RuntimeTypeError, ValueError, TypeError) as exc:
                raise ValueError(f"access_window: {exc}") from None


@dataclass(frozen=True)
class TrustSignals:
    request_time: float
    service_id: str = ""
    ip: str = ""
    geo: Optional[GeoPoint] = None
    distance_km: Optional[float] = None
    prior_requests_same_resource: int = 0
    prior_successful_authz_total: int = 0
    penalties_in_window: int = 0
    ip_seen_before: bool = False
    service_seen_before: bool = False
    time_in_usual_band: bool = False
    mfa_verified_this_session: bool = False

    def __post_init__(self) -> None:
        for name in ("prior_requests_same_resource", "prior_successful_authz_total", "penalties_in_window"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.distance_km is not None and not self.distance_km >= 0:
            raise ValueError("distance_km must be non-negative")


@dataclass(frozen=True)
class TrustFactors:
    geo: float
    res: float
    hist: float
    pen: float
    meta: float

    def __post_init__(self) -> None:
        for name in FACTOR_NAMES:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"factor {name}={v!r} outside [0, 1]")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, n) for n in FACTOR_NAMES)

    def to_json(self) -> dict:
        return {f"f_{n}": getattr(self, n) for n in FACTOR_NAMES}


@dataclass(frozen=True)
class FinalDecision:
    outcome: Outcome
    mode_used: EvaluationMode
    pdp: Decision
    score: Optional[float] = None
    reasons: tuple[str, ...] = field(default_factory=tuple)

    @property
    def allowed(self) -> bool:
        return self.outcome is Outcome.ALLOW

    def to_json(self) -> dict:
        out = {
            "decision": "ALLOW" if self.allowed else "DENY",
            "mode": self.mode_used.value,
            "pdp": self.pdp.value,
            "reasons": list(self.reasons),
        }
        if self.score is not None:
            out["score"] = self.score
        return out


def geo_factor(distance_km: Optional[float], cfg: TrustConfig) -> float:
    if distance_km is None:
        return 0.0
    if distance_km <= cfg.d0_km:
        return 1.0
    if distance_km >= cfg.dmax_km:
        return 0.0
    return (cfg.dmax_km - distance_km) / (cfg.dmax_km - cfg.d0_km)


def normalize_factors(s: TrustSignals, cfg: TrustConfig) -> TrustFactors:
    n = s.prior_requests_same_resource
    m = s.prior_successful_authz_total
    return TrustFactors(
        geo=geo_factor(s.distance_km, cfg),
        res=n / (n + cfg.k_res),
        hist=m / (m + cfg.k_hist),
        pen=1.0 / (1.0 + s.penalties_in_window),
        meta=0.5 * s.ip_seen_before + 0.25 * s.service_seen_before + 0.25 * s.time_in_usual_band,
    )


def trust_score(f: TrustFactors, cfg: TrustConfig) -> float:
    # weights sum to 1 only within 1e-9; dividing by their sum keeps the
    # extremes exact (all ones -> 1.0, all zeros -> 0.0)
    score = math.fsum(w * x for w, x in zip(cfg.weights, f.as_tuple())) / math.fsum(cfg.weights)
    return min(1.0, max(0.0, score))


def criteria_gate(s: TrustSignals, cfg: TrustConfig) -> tuple[bool, list[str]]:
    """Strict all-criteria check used for principals without history."""
    failed = []
    if s.distance_km is None:
        failed.append("GEO_UNKNOWN")
    elif s.distance_km > cfg.d0_km:
        failed.append("GEO_OUT_OF_PERIMETER")
    if s.penalties_in_window != 0:
        failed.append("PENALTY_PRESENT")
    if not s.mfa_verified_this_session:
        failed.append("MFA_NOT_VERIFIED")
    if cfg.access_window is not None and not in_daily_window(int(s.request_time), *cfg.access_window):
        failed.append("OUTSIDE_ACCESS_WINDOW")
    return not failed, failed


def combine_decision(pdp: Decision, score: float, threshold: float) -> Outcome:
    passes = score >= threshold
    if pdp is Decision.PERMIT:
        return Outcome.ALLOW if passes else Outcome.DENY
    if pdp is Decision.INDETERMINATE:
        return Outcome.REEVALUATE if passes else Outcome.DENY
    # Deny, and NotApplicable under deny-by-default
    return Outcome.DENY


def determine_mode(profile: TrustProfile, resource_id: str, now: float, cfg: TrustConfig) -> EvaluationMode:
    if resource_id not in profile.first_granted:
        return EvaluationMode.CRITERIA
    if profile.per_resource_success.get(resource_id, 0) < cfg.promote_n:
        return EvaluationMode.CRITERIA
    if profile.penalties_in_window >= cfg.demote_penalties:
        return EvaluationMode.CRITERIA
    return EvaluationMode.SCORE_BASED


def resource_id_of(ctx: RequestContext) -> str:
    v = ctx.resource.get("id")
    return "" if v is None else str(v.value)


def signals_for(
    ctx: RequestContext,
    profile: TrustProfile,
    *,
    now: float,
    ip: str = "",
    service_id: str = "",
    mfa_verified: bool = False,
) -> TrustSignals:
    """Assemble trust inputs from a request context and the user's profile.

    Distance is measured from ``subject.geo`` to ``resource.geo``.
    """
    sgeo, rgeo = ctx.subject.get("geo"), ctx.resource.get("geo")
    geo = sgeo.value if sgeo is not None and sgeo.type == "geo" else None
    distance = None
    if geo is not None and rgeo is not None and rgeo.type == "geo":
        distance = geo_distance_km(geo, rgeo.value)
    hour = datetime.fromtimestamp(now, tz=timezone.utc).hour
    return TrustSignals(
        request_time=now,
        service_id=service_id,
        ip=ip,
        geo=geo,
        distance_km=distance,
        prior_requests_same_resource=profile.per_resource_requests.get(resource_id_of(ctx), 0),
        prior_successful_authz_total=profile.total_successful_authz,
        penalties_in_window=profile.penalties_in_window,
        ip_seen_before=bool(ip) and ip in profile.known_ips,
        service_seen_before=bool(service_id) and service_id in profile.known_services,
        time_in_usual_band=hour in profile.usual_hours,
        mfa_verified_this_session=mfa_verified,
    )


PdpFn = Callable[[PolicySet, RequestContext], Decision]


def authorize(
    ctx: RequestContext,
    s: TrustSignals,
    profile: TrustProfile,
    policy_set: PolicySet,
    cfg: TrustConfig,
    *,
    pdp: PdpFn = evaluate,
    refresh: Optional[Callable[[], RequestContext]] = None,
    events: Optional[EventLog] = None,
) -> FinalDecision:
    """Final access decision for one request.

    ``refresh`` is called at most once, on a Reevaluate outcome; it must
    force a PIP refresh and return the rebuilt request context. The PDP
    is therefore run at most twice, always on ``policy_set``.
    """
    resource_id = resource_id_of(ctx)
    mode = determine_mode(profile, resource_id, s.request_time, cfg)
    reasons: list[str] = []
    score = None

    if mode is EvaluationMode.CRITERIA:
        ok, failed = criteria_gate(s, cfg)
        reasons.extend(failed)
        decision = pdp(policy_set, ctx)
        if decision is not Decision.PERMIT:
            reasons.append(f"PDP_{decision.name}")
        outcome = Outcome.ALLOW if ok and decision is Decision.PERMIT else Outcome.DENY
    else:
        score = trust_score(normalize_factors(s, cfg), cfg)
        decision = pdp(policy_set, ctx)
        outcome = combine_decision(decision, score, cfg.threshold)
        if outcome is Outcome.REEVALUATE:
            reasons.append("REEVALUATED")
            retry_ctx = refresh() if refresh is not None else ctx
            decision = pdp(policy_set, retry_ctx)
            outcome = combine_decision(decision, score, cfg.threshold)
            if outcome is Outcome.REEVALUATE:
                outcome = Outcome.DENY
        if decision is not Decision.PERMIT:
            reasons.append(f"PDP_{decision.name}")
        if score < cfg.threshold:
            reasons.append("SCORE_BELOW_THRESHOLD")

    # both factors are a precondition in every mode
    if not s.mfa_verified_this_session:
        outcome = Outcome.DENY
        if "MFA_NOT_VERIFIED" not in reasons:
            reasons.append("MFA_NOT_VERIFIED")

    final = FinalDecision(outcome, mode, decision, score, tuple(reasons))
    if events is not None:
        record_decision(events, profile.user_id, resource_id, s, final)
    return final


def record_decision(events: EventLog, principal: str, resource_id: str, s: TrustSignals, final: FinalDecision) -> None:
    detail = {"mode": final.mode_used.value, "pdp": final.pdp.value, "reasons": ",".join(final.reasons)}
    if final.score is not None:
        detail["score"] = repr(final.score)
    common = dict(
        principal=principal,
        timestamp=s.request_time,
        resource_id=resource_id or None,
        ip=s.ip or None,
        geo=s.geo,
        service_id=s.service_id or None,
    )
    kind = EventKind.AUTHZ_PERMIT if final.allowed else EventKind.AUTHZ_DENY
    events.record(kind, detail=detail, **common)
    if not final.allowed:
        events.record(EventKind.PENALTY, detail={"cause": "AuthzDeny"}, **common)
