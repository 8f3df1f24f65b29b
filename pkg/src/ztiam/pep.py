"""Policy enforcement point: assembles context and trust inputs for each request."""

from __future__ import annotations

import logging
import time
from typing import Callable, Mapping, Optional

from ztiam.authn.context import LoginContext
from ztiam.authn.service import UserAccount
from ztiam.events import EventLog, QueueFull, StoreUnavailable
from ztiam.pip import PolicyInformationPoint, TrustProfile
from ztiam.policy.model import AttributeValue, Decision, RequestContext
from ztiam.policy.pdp import PolicyDecisionPoint, PolicyStoreUnavailable
from ztiam.trust import (
    EvaluationMode,
    FinalDecision,
    Outcome,
    TrustConfig,
    authorize,
    record_decision,
    resource_id_of,
    signals_for,
)

log = logging.getLogger(__name__)


def subject_attributes(account: UserAccount, login: LoginContext, profile: TrustProfile) -> dict[str, AttributeValue]:
    """Subject bag built only from server-side state, never from the request body."""
    bag = {
        "id": AttributeValue("string", account.user_id),
        "username": AttributeValue("string", account.username),
        "org": AttributeValue("string", account.org),
        "ip": AttributeValue("string", login.ip),
        "penalties": AttributeValue("integer", profile.penalties_in_window),
        "successful_authz": AttributeValue("integer", profile.total_successful_authz),
    }
    if login.geo is not None:
        bag["geo"] = AttributeValue("geo", login.geo)
    if login.service_id:
        bag["service"] = AttributeValue("string", login.service_id)
    return bag


class PolicyEnforcementPoint:
    def __init__(
        self,
        pdp: PolicyDecisionPoint,
        pip: PolicyInformationPoint,
        events: EventLog,
        trust_config: Callable[[], TrustConfig],
        clock: Callable[[], float] = time.time,
    ):
        self.pdp = pdp
        self.pip = pip
        self.events = events
        self.trust_config = trust_config
        self.clock = clock

    def _context(self, account, login, profile, resource, action, environment, now) -> RequestContext:
        env = dict(environment)
        env["time"] = AttributeValue.time(now)
        return RequestContext(
            subject=subject_attributes(account, login, profile), resource=resource, action=action, environment=env
        )

    def authorize(
        self,
        account: UserAccount,
        login: LoginContext,
        resource: Mapping[str, AttributeValue],
        action: Mapping[str, AttributeValue],
        environment: Mapping[str, AttributeValue] = {},
        *,
        mfa_verified: bool = True,
    ) -> FinalDecision:
        """Decide one request; fails closed with ``STORE_UNAVAILABLE``."""
        now = self.clock()
        cfg = self.trust_config()
        try:
            policy_set = self.pdp.snapshot()
            profile = self.pip.get(account.user_id, now)
            if profile.stale:
                raise StoreUnavailable("profile is stale")
        except (PolicyStoreUnavailable, StoreUnavailable) as exc:
            log.error("failing closed for %s: %s", account.user_id, exc)
            return FinalDecision(Outcome.DENY, EvaluationMode.CRITERIA, Decision.INDETERMINATE, None, ("STORE_UNAVAILABLE",))

        ctx = self._context(account, login, profile, resource, action, environment, now)
        signals = signals_for(ctx, profile, now=now, ip=login.ip, service_id=login.service_id, mfa_verified=mfa_verified)

        def refresh() -> RequestContext:
            fresh = self.pip.force_refresh(account.user_id, now)
            return self._context(account, login, fresh, resource, action, environment, now)

        final = authorize(ctx, signals, profile, policy_set, cfg, pdp=self.pdp.evaluate, refresh=refresh)
        try:
            record_decision(self.events, account.user_id, resource_id_of(ctx), signals, final)
        except QueueFull:
            log.error("audit queue full; denying %s", account.user_id)
            return FinalDecision(Outcome.DENY, final.mode_used, final.pdp, final.score, final.reasons + ("AUDIT_UNAVAILABLE",))
        return final
