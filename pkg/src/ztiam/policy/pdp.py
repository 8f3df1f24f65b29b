"""Policy decision point: expression, rule and policy-set evaluation."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Union

from ztiam.policy.functions import FUNCTIONS, RuntimeTypeError
from ztiam.policy.model import (
    Apply,
    Attribute,
    AttributeRef,
    AttributeValue,
    CombiningAlgorithm,
    Decision,
    Expression,
    Literal,
    Policy,
    PolicySet,
    RequestContext,
    Rule,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MissingAttribute:
    """Evaluation produced no usable value.

    ``reason`` is ``"missing"`` for an absent attribute and
    ``"type-error"`` when a function rejected its argument types.
    """

    ref: Optional[AttributeRef] = None
    reason: str = "missing"
    detail: str = ""


def evaluate_expression(expr: Expression, ctx: RequestContext) -> Union[AttributeValue, MissingAttribute]:
    if isinstance(expr, Literal):
        return expr.value
    if isinstance(expr, Attribute):
        found = ctx.lookup(expr.ref)
        return MissingAttribute(expr.ref) if found is None else found
    assert isinstance(expr, Apply)
    # strict: every argument is evaluated and any miss poisons the result
    args = [evaluate_expression(a, ctx) for a in expr.args]
    for a in args:
        if isinstance(a, MissingAttribute):
            return a
    try:
        return FUNCTIONS[expr.function_id].impl(args)
    except RuntimeTypeError as exc:
        log.warning("runtime type error in %s: %s", expr.function_id, exc)
        return MissingAttribute(reason="type-error", detail=f"{expr.function_id}: {exc}")


def _truth(expr: Optional[Expression], ctx: RequestContext) -> Optional[bool]:
    """True/False, or None when the value is missing or not boolean."""
    if expr is None:
        return True
    v = evaluate_expression(expr, ctx)
    if isinstance(v, MissingAttribute) or v.type != "boolean":
        return None
    return v.value


def evaluate_rule(rule: Rule, ctx: RequestContext) -> Decision:
    t = _truth(rule.condition, ctx)
    if t is None:
        return Decision.INDETERMINATE
    return rule.effect.decision if t else Decision.NOT_APPLICABLE


def _overrides(decisions: list[Decision], winner: Decision, loser: Decision) -> Decision:
    if winner in decisions:
        return winner
    if Decision.INDETERMINATE in decisions:
        return Decision.INDETERMINATE
    if loser in decisions:
        return loser
    return Decision.NOT_APPLICABLE


def combine(decisions: Iterable[Decision], alg: CombiningAlgorithm) -> Decision:
    ds = list(decisions)
    if alg is CombiningAlgorithm.DENY_OVERRIDES:
        return _overrides(ds, Decision.DENY, Decision.PERMIT)
    if alg is CombiningAlgorithm.PERMIT_OVERRIDES:
        return _overrides(ds, Decision.PERMIT, Decision.DENY)
    for d in ds:
        if d is not Decision.NOT_APPLICABLE:
            return d
    return Decision.NOT_APPLICABLE


def evaluate_policy(policy: Policy, ctx: RequestContext) -> Decision:
    t = _truth(policy.target, ctx)
    if t is None:
        return Decision.INDETERMINATE
    if not t:
        return Decision.NOT_APPLICABLE
    return combine((evaluate_rule(r, ctx) for r in policy.rules), policy.combining)


def evaluate(policy_set: PolicySet, ctx: RequestContext) -> Decision:
    return combine((evaluate_policy(p, ctx) for p in policy_set.policies), policy_set.combining)


EMPTY_POLICY_SET = PolicySet("empty", CombiningAlgorithm.DENY_OVERRIDES)


class PolicyStoreUnavailable(Exception):
    pass


class PolicyStore:
    """Holds the current immutable policy set; the PAP publishes new versions."""

    def __init__(self, initial: Optional[PolicySet] = None):
        self._lock = threading.Lock()
        self._current = initial or EMPTY_POLICY_SET
        self.available = True

    def current(self) -> PolicySet:
        if not self.available:
            raise PolicyStoreUnavailable("policy store unavailable")
        return self._current

    def publish(self, policy_set: PolicySet) -> PolicySet:
        with self._lock:
            published = replace(policy_set, version=self._current.version + 1)
            self._current = published
            return published


class PolicyDecisionPoint:
    """Evaluates requests against a policy set and counts evaluations."""

    def __init__(self, store: PolicyStore):
        self.store = store
        self._lock = threading.Lock()
        self.evaluations = 0

    def snapshot(self) -> PolicySet:
        return self.store.current()

    def evaluate(self, policy_set: PolicySet, ctx: RequestContext) -> Decision:
        with self._lock:
            self.evaluations += 1
        return evaluate(policy_set, ctx)
