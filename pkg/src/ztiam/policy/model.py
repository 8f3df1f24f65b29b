"""Policy AST, attribute values and request contexts."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from types import MappingProxyType
from typing import Any, Mapping, Optional, Union

from ztiam.geo import GeoPoint

CATEGORIES = ("subject", "resource", "action", "environment")
VALUE_TYPES = ("string", "double", "integer", "boolean", "geo", "time")


class Decision(str, enum.Enum):
    PERMIT = "Permit"
    DENY = "Deny"
    INDETERMINATE = "Indeterminate"
    NOT_APPLICABLE = "NotApplicable"


class Effect(str, enum.Enum):
    PERMIT = "Permit"
    DENY = "Deny"

    @property
    def decision(self) -> Decision:
        return Decision(self.value)


class CombiningAlgorithm(str, enum.Enum):
    DENY_OVERRIDES = "deny-overrides"
    PERMIT_OVERRIDES = "permit-overrides"
    FIRST_APPLICABLE = "first-applicable"


@dataclass(frozen=True)
class AttributeValue:
    """A typed attribute value.

    ``type`` is one of :data:`VALUE_TYPES`. Times are whole UTC epoch
    seconds; geo values are :class:`GeoPoint`.
    """

    type: str
    value: Any

    def __post_init__(self) -> None:
        t, v = self.type, self.value
        if t == "string":
            ok = isinstance(v, str)
        elif t == "double":
            ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
            if ok:
                object.__setattr__(self, "value", float(v))
        elif t == "integer":
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif t == "boolean":
            ok = isinstance(v, bool)
        elif t == "geo":
            ok = isinstance(v, GeoPoint)
        elif t == "time":
            ok = isinstance(v, int) and not isinstance(v, bool) and v >= 0
        else:
            raise ValueError(f"unknown attribute type {t!r}")
        if not ok:
            raise ValueError(f"invalid {t} value: {v!r}")

    @classmethod
    def of(cls, value: Any) -> "AttributeValue":
        """Wrap a plain Python value, inferring its attribute type."""
        if isinstance(value, AttributeValue):
            return value
        if isinstance(value, bool):
            return cls("boolean", value)
        if isinstance(value, int):
            return cls("integer", value)
        if isinstance(value, float):
            return cls("double", value)
        if isinstance(value, str):
            return cls("string", value)
        if isinstance(value, GeoPoint):
            return cls("geo", value)
        if isinstance(value, datetime):
            if value.tzinfo is None:
                value = value.replace(tzinfo=timezone.utc)
            return cls("time", int(value.timestamp()))
        raise TypeError(f"cannot infer attribute type for {type(value).__name__}")

    @classmethod
    def time(cls, epoch_seconds: float) -> "AttributeValue":
        return cls("time", int(epoch_seconds))

    def to_json(self) -> dict:
        if self.type == "geo":
            v: Any = [self.value.lat, self.value.lon]
        else:
            v = self.value
        return {"type": self.type, "v": v}

    @classmethod
    def from_json(cls, obj: Any) -> "AttributeValue":
        if not isinstance(obj, dict) or set(obj) != {"type", "v"}:
            raise ValueError('typed value must be {"type": ..., "v": ...}')
        t, v = obj["type"], obj["v"]
        if t == "geo":
            if not (isinstance(v, list) and len(v) == 2):
                raise ValueError("geo value must be [lat, lon]")
            if any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in v):
                raise ValueError("geo coordinates must be numbers")
            return cls("geo", GeoPoint(v[0], v[1]))
        if t == "double" and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        return cls(t, v)


@dataclass(frozen=True)
class AttributeRef:
    category: str
    key: str

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown attribute category {self.category!r}")
        if not self.key:
            raise ValueError("attribute key must be non-empty")

    @classmethod
    def parse(cls, dotted: str) -> "AttributeRef":
        category, sep, key = dotted.partition(".")
        if not sep:
            raise ValueError(f"attribute reference {dotted!r} lacks a category prefix")
        return cls(category, key)

    def __str__(self) -> str:
        return f"{self.category}.{self.key}"


@dataclass(frozen=True)
class Literal:
    value: AttributeValue


@dataclass(frozen=True)
class Attribute:
    ref: AttributeRef


@dataclass(frozen=True)
class Apply:
    function_id: str
    args: tuple["Expression", ...]


Expression = Union[Literal, Attribute, Apply]


@dataclass(frozen=True)
class Rule:
    rule_id: str
    effect: Effect
    condition: Optional[Expression] = None


@dataclass(frozen=True)
class Policy:
    policy_id: str
    combining: CombiningAlgorithm
    rules: tuple[Rule, ...]
    target: Optional[Expression] = None


@dataclass(frozen=True)
class PolicySet:
    policy_set_id: str
    combining: CombiningAlgorithm
    policies: tuple[Policy, ...] = ()
    version: int = 0


def _freeze(bag: Optional[Mapping[str, Any]]) -> Mapping[str, AttributeValue]:
    return MappingProxyType({k: AttributeValue.of(v) for k, v in (bag or {}).items()})


@dataclass(frozen=True)
class RequestContext:
    """Attribute bags for one authorization request.

    Values may be given as plain Python objects; they are wrapped with
    :meth:`AttributeValue.of`. ``environment.time`` is filled from
    ``now`` when absent.
    """

    subject: Mapping[str, AttributeValue] = field(default_factory=dict)
    resource: Mapping[str, AttributeValue] = field(default_factory=dict)
    action: Mapping[str, AttributeValue] = field(default_factory=dict)
    environment: Mapping[str, AttributeValue] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for cat in CATEGORIES:
            object.__setattr__(self, cat, _freeze(getattr(self, cat)))

    @classmethod
    def build(cls, *, now: float, subject=None, resource=None, action=None, environment=None) -> "RequestContext":
        env = dict(environment or {})
        env.setdefault("time", AttributeValue.time(now))
        return cls(subject=subject or {}, resource=resource or {}, action=action or {}, environment=env)

    def lookup(self, ref: AttributeRef) -> Optional[AttributeValue]:
        return getattr(self, ref.category).get(ref.key)

    def with_bag(self, category: str, values: Mapping[str, Any]) -> "RequestContext":
        bags = {c: dict(getattr(self, c)) for c in CATEGORIES}
        bags[category].update(values)
        return RequestContext(**bags)

    def to_json(self) -> dict:
        return {cat: {k: v.to_json() for k, v in getattr(self, cat).items()} for cat in CATEGORIES}
