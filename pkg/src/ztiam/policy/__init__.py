"""Attribute-based access-control policy engine."""

from ztiam.policy.document import (
    ArityMismatch,
    DuplicateId,
    PolicyError,
    PolicySyntaxError,
    TypeMismatch,
    UnknownFunction,
    context_from_json,
    parse_policy_set,
    serialize_policy_set,
)
from ztiam.policy.model import (
    Apply,
    Attribute,
    AttributeRef,
    AttributeValue,
    CombiningAlgorithm,
    Decision,
    Effect,
    Literal,
    Policy,
    PolicySet,
    RequestContext,
    Rule,
)
from ztiam.policy.pdp import (
    MissingAttribute,
    PolicyDecisionPoint,
    PolicyStore,
    PolicyStoreUnavailable,
    combine,
    evaluate,
    evaluate_expression,
    evaluate_rule,
)

__all__ = [
    "Apply", "ArityMismatch", "Attribute", "AttributeRef", "AttributeValue",
    "CombiningAlgorithm", "Decision", "DuplicateId", "Effect", "Literal",
    "MissingAttribute", "Policy", "PolicyDecisionPoint", "PolicyError", "PolicySet",
    "PolicyStore", "PolicyStoreUnavailable", "PolicySyntaxError", "RequestContext",
    "Rule", "TypeMismatch", "UnknownFunction", "combine", "context_from_json",
    "evaluate", "evaluate_expression", "evaluate_rule", "parse_policy_set",
    "serialize_policy_set",
]
