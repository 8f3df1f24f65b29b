"""Policy document format: parsing, validation and serialization.

A document is JSON text::

    {"policy_set_id": "...", "combining": "deny-overrides",
     "policies": [{"policy_id": "...", "combining": "...", "target": <expr>|null,
                   "rules": [{"rule_id": "...", "effect": "Permit"|"Deny",
                              "condition": <expr>|null}]}]}

Expressions are ``{"fn": id, "args": [...]}``, ``{"attr": "category.key"}``
or ``{"value": {"type": ..., "v": ...}}``.
"""

from __future__ import annotations

import json
from typing import Any, Mapping, Optional

from ztiam.policy.functions import FUNCTIONS, NUMERIC
from ztiam.policy.model import (
    CATEGORIES,
    Apply,
    Attribute,
    AttributeRef,
    AttributeValue,
    CombiningAlgorithm,
    Effect,
    Expression,
    Literal,
    Policy,
    PolicySet,
    RequestContext,
    Rule,
)


class PolicyError(Exception):
    """Base class for policy document errors.

    ``code`` is a stable machine-readable name; ``location`` is either a
    ``line:column`` pair (syntax errors) or a path into the document.
    """

    code = "POLICY_ERROR"

    def __init__(self, message: str, location: str = ""):
        self.message = message
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)

    def to_json(self) -> dict:
        return {"error": self.code, "message": self.message, "location": self.location}


class PolicySyntaxError(PolicyError):
    code = "SyntaxError"

    def __init__(self, message: str, location: str = "", line: int = 0, column: int = 0):
        super().__init__(message, location)
        self.line = line
        self.column = column


class UnknownFunction(PolicyError):
    code = "UnknownFunction"


class ArityMismatch(PolicyError):
    code = "ArityMismatch"


class TypeMismatch(PolicyError):
    code = "TypeMismatch"


class DuplicateId(PolicyError):
    code = "DuplicateId"


# -- parsing ---------------------------------------------------------------


def _fields(obj: Any, path: str, required: set[str], optional: set[str] = frozenset()) -> dict:
    if not isinstance(obj, dict):
        raise PolicySyntaxError(f"expected an object, got {type(obj).__name__}", path)
    missing = required - obj.keys()
    if missing:
        raise PolicySyntaxError(f"missing field(s) {sorted(missing)}", path)
    extra = obj.keys() - required - optional
    if extra:
        raise PolicySyntaxError(f"unexpected field(s) {sorted(extra)}", path)
    return obj


def _string(obj: Any, path: str) -> str:
    if not isinstance(obj, str) or not obj:
        raise PolicySyntaxError("expected a non-empty string", path)
    return obj


def _enum(cls, obj: Any, path: str):
    try:
        return cls(obj)
    except ValueError:
        allowed = ", ".join(repr(m.value) for m in cls)
        raise PolicySyntaxError(f"{obj!r} is not one of {allowed}", path) from None


def _parse_expr(obj: Any, path: str) -> Expression:
    if not isinstance(obj, dict) or len(obj) == 0:
        raise PolicySyntaxError("expected an expression object", path)
    if "fn" in obj:
        _fields(obj, path, {"fn", "args"})
        fid = obj["fn"]
        if not isinstance(fid, str):
            raise PolicySyntaxError("function id must be a string", f"{path}.fn")
        if not isinstance(obj["args"], list):
            raise PolicySyntaxError("args must be an array", f"{path}.args")
        args = tuple(_parse_expr(a, f"{path}.args[{i}]") for i, a in enumerate(obj["args"]))
        return Apply(fid, args)
    if "attr" in obj:
        _fields(obj, path, {"attr"})
        try:
            return Attribute(AttributeRef.parse(obj["attr"]))
        except (ValueError, AttributeError) as exc:
            raise PolicySyntaxError(str(exc), f"{path}.attr") from None
    if "value" in obj:
        _fields(obj, path, {"value"})
        try:
            return Literal(AttributeValue.from_json(obj["value"]))
        except (ValueError, TypeError) as exc:
            raise PolicySyntaxError(str(exc), f"{path}.value") from None
    raise PolicySyntaxError('expression needs one of "fn", "attr", "value"', path)


def _static_type(expr: Expression) -> Optional[str]:
    """Type known before evaluation, or None for attribute references."""
    if isinstance(expr, Literal):
        return expr.value.type
    if isinstance(expr, Apply):
        return FUNCTIONS[expr.function_id].signature.returns
    return None


def check_expression(expr: Expression, path: str = "$") -> None:
    """Registry, arity and static type checks, depth first."""
    if not isinstance(expr, Apply):
        return
    fn = FUNCTIONS.get(expr.function_id)
    if fn is None:
        raise UnknownFunction(f"unknown function {expr.function_id!r}", f"{path}.fn")
    sig = fn.signature
    if not sig.accepts_arity(len(expr.args)):
        raise ArityMismatch(
            f"{expr.function_id} takes {sig.describe_arity()} argument(s), got {len(expr.args)}",
            f"{path}.args",
        )
    for i, arg in enumerate(expr.args):
        apath = f"{path}.args[{i}]"
        check_expression(arg, apath)
        want = sig.param_types(i)
        got = _static_type(arg)
        if got is not None and got not in want:
            raise TypeMismatch(
                f"{expr.function_id} argument {i} expects {'/'.join(sorted(want))}, got {got}", apath
            )
        if fn.check_literal and isinstance(arg, Literal):
            problem = fn.check_literal(i, arg.value)
            if problem:
                raise TypeMismatch(f"{expr.function_id} argument {i}: {problem}", apath)


def _check_boolean(expr: Optional[Expression], path: str) -> None:
    if expr is None:
        return
    check_expression(expr, path)
    t = _static_type(expr)
    if t is not None and t != "boolean":
        raise TypeMismatch(f"expected a boolean expression, got {t}", path)


def _parse_rule(obj: Any, path: str) -> Rule:
    _fields(obj, path, {"rule_id", "effect"}, {"condition"})
    cond = obj.get("condition")
    condition = None if cond is None else _parse_expr(cond, f"{path}.condition")
    _check_boolean(condition, f"{path}.condition")
    return Rule(_string(obj["rule_id"], f"{path}.rule_id"), _enum(Effect, obj["effect"], f"{path}.effect"), condition)


def _parse_policy(obj: Any, path: str) -> Policy:
    _fields(obj, path, {"policy_id", "combining", "rules"}, {"target"})
    tgt = obj.get("target")
    target = None if tgt is None else _parse_expr(tgt, f"{path}.target")
    _check_boolean(target, f"{path}.target")
    rules_raw = obj["rules"]
    if not isinstance(rules_raw, list) or not rules_raw:
        raise PolicySyntaxError("rules must be a non-empty array", f"{path}.rules")
    rules = tuple(_parse_rule(r, f"{path}.rules[{i}]") for i, r in enumerate(rules_raw))
    seen: set[str] = set()
    for i, r in enumerate(rules):
        if r.rule_id in seen:
            raise DuplicateId(f"duplicate rule_id {r.rule_id!r}", f"{path}.rules[{i}].rule_id")
        seen.add(r.rule_id)
    return Policy(
        policy_id=_string(obj["policy_id"], f"{path}.policy_id"),
        combining=_enum(CombiningAlgorithm, obj["combining"], f"{path}.combining"),
        rules=rules,
        target=target,
    )


def policy_set_from_json(obj: Any) -> PolicySet:
    _fields(obj, "$", {"policy_set_id", "combining", "policies"}, {"version"})
    raw = obj["policies"]
    if not isinstance(raw, list):
        raise PolicySyntaxError("policies must be an array", "$.policies")
    policies = tuple(_parse_policy(p, f"$.policies[{i}]") for i, p in enumerate(raw))
    seen: set[str] = set()
    for i, p in enumerate(policies):
        if p.policy_id in seen:
            raise DuplicateId(f"duplicate policy_id {p.policy_id!r}", f"$.policies[{i}].policy_id")
        seen.add(p.policy_id)
    version = obj.get("version", 0)
    if isinstance(version, bool) or not isinstance(version, int) or version < 0:
        raise PolicySyntaxError("version must be a non-negative integer", "$.version")
    return PolicySet(
        policy_set_id=_string(obj["policy_set_id"], "$.policy_set_id"),
        combining=_enum(CombiningAlgorithm, obj["combining"], "$.combining"),
        policies=policies,
        version=version,
    )


def parse_policy_set(document: str | bytes) -> PolicySet:
    """Parse and validate a policy document."""
    if isinstance(document, bytes):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PolicySyntaxError(f"document is not UTF-8: {exc.reason}") from None
    try:
        obj = json.loads(document)
    except json.JSONDecodeError as exc:
        raise PolicySyntaxError(exc.msg, f"{exc.lineno}:{exc.colno}", exc.lineno, exc.colno) from None
    return policy_set_from_json(obj)


# -- serialization ---------------------------------------------------------


def expression_to_json(expr: Expression) -> dict:
    if isinstance(expr, Literal):
        return {"value": expr.value.to_json()}
    if isinstance(expr, Attribute):
        return {"attr": str(expr.ref)}
    return {"fn": expr.function_id, "args": [expression_to_json(a) for a in expr.args]}


def _opt(expr: Optional[Expression]) -> Optional[dict]:
    return None if expr is None else expression_to_json(expr)


def policy_set_to_json(ps: PolicySet) -> dict:
    return {
        "policy_set_id": ps.policy_set_id,
        "combining": ps.combining.value,
        "version": ps.version,
        "policies": [
            {
                "policy_id": p.policy_id,
                "combining": p.combining.value,
                "target": _opt(p.target),
                "rules": [
                    {"rule_id": r.rule_id, "effect": r.effect.value, "condition": _opt(r.condition)}
                    for r in p.rules
                ],
            }
            for p in ps.policies
        ],
    }


def serialize_policy_set(ps: PolicySet) -> str:
    return json.dumps(policy_set_to_json(ps), indent=2, ensure_ascii=False) + "\n"


# -- request contexts ------------------------------------------------------


def _bare_value(v: Any) -> AttributeValue:
    if isinstance(v, dict):
        return AttributeValue.from_json(v)
    if isinstance(v, (bool, int, float, str)):
        return AttributeValue.of(v)
    raise ValueError(f"unsupported attribute value {v!r}; use a typed value")


def attribute_bag_from_json(obj: Any, category: str) -> dict[str, AttributeValue]:
    """Decode one attribute bag.

    Values are either typed (``{"type": ..., "v": ...}``) or bare JSON
    strings, numbers and booleans; geo and time values must be typed.
    """
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ValueError(f"{category} must be an object")
    bag = {}
    for k, v in obj.items():
        if not isinstance(k, str) or not k:
            raise ValueError(f"{category} has an empty key")
        try:
            bag[k] = _bare_value(v)
        except (ValueError, TypeError) as exc:
            raise ValueError(f"{category}.{k}: {exc}") from None
    return bag


def context_from_json(obj: Mapping[str, Any], now: float) -> RequestContext:
    if not isinstance(obj, Mapping):
        raise ValueError("context must be an object")
    unknown = set(obj) - set(CATEGORIES)
    if unknown:
        raise ValueError(f"unknown context categories {sorted(unknown)}")
    bags = {c: attribute_bag_from_json(obj.get(c), c) for c in CATEGORIES}
    return RequestContext.build(now=now, **bags)
