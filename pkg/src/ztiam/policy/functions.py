"""The registered function set available to policy expressions.

Every function is total over type-correct arguments. Runtime type
problems raise :class:`RuntimeTypeError`, which the evaluator folds into
a missing value.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Optional, Sequence

from ztiam.geo import geo_distance_km
from ztiam.policy.model import AttributeValue

NUMERIC = frozenset({"double", "integer"})

_CLOCK = re.compile(r"^([01]\d|2[0-3]):([0-5]\d)(?::([0-5]\d))?$")


class RuntimeTypeError(Exception):
    pass


@dataclass(frozen=True)
class Signature:
    params: tuple[frozenset, ...]
    returns: str
    # when set, the last param type repeats and at least ``min_args`` are required
    variadic: bool = False
    min_args: int = 0

    def accepts_arity(self, n: int) -> bool:
        if self.variadic:
            return n >= self.min_args
        return n == len(self.params)

    def param_types(self, index: int) -> frozenset:
        if index < len(self.params):
            return self.params[index]
        return self.params[-1]

    def describe_arity(self) -> str:
        if self.variadic:
            return f"at least {self.min_args}"
        return str(len(self.params))


@dataclass(frozen=True)
class Function:
    function_id: str
    signature: Signature
    impl: Callable[[Sequence[AttributeValue]], AttributeValue]
    # extra static check for literal arguments (e.g. clock-string format)
    check_literal: Optional[Callable[[int, AttributeValue], Optional[str]]] = None


def _t(*names: str) -> frozenset:
    return frozenset(names)


def _expect(arg: AttributeValue, types: frozenset) -> None:
    if arg.type not in types:
        raise RuntimeTypeError(f"expected {'/'.join(sorted(types))}, got {arg.type}")


def _typed(sig: Signature, fn: Callable[..., object], returns_type: str) -> Callable:
    def run(args: Sequence[AttributeValue]) -> AttributeValue:
        for i, a in enumerate(args):
            _expect(a, sig.param_types(i))
        return AttributeValue(returns_type, fn(*(a.value for a in args)))

    return run


def parse_clock(text: str) -> int:
    """``HH:MM`` or ``HH:MM:SS`` to seconds since midnight."""
    m = _CLOCK.match(text)
    if not m:
        raise RuntimeTypeError(f"bad clock time {text!r}, expected HH:MM[:SS]")
    return int(m.group(1)) * 3600 + int(m.group(2)) * 60 + int(m.group(3) or 0)


def in_daily_window(epoch_seconds: int, start: str, end: str) -> bool:
    """Whether the UTC time of day lies in ``[start, end)``.

    A window with ``start > end`` wraps past midnight; ``start == end``
    covers the whole day.
    """
    lo, hi = parse_clock(start), parse_clock(end)
    tod = datetime.fromtimestamp(epoch_seconds, tz=timezone.utc)
    s = tod.hour * 3600 + tod.minute * 60 + tod.second
    if lo == hi:
        return True
    if lo < hi:
        return lo <= s < hi
    return s >= lo or s < hi


def _clock_literal(index: int, value: AttributeValue) -> Optional[str]:
    if index in (1, 2) and value.type == "string":
        try:
            parse_clock(value.value)
        except RuntimeTypeError as exc:
            return str(exc)
    return None


def _build() -> dict[str, Function]:
    reg: dict[str, Function] = {}

    def add(fid, params, returns, fn, variadic=False, min_args=0, check_literal=None):
        sig = Signature(tuple(params), returns, variadic, min_args)
        reg[fid] = Function(fid, sig, _typed(sig, fn, returns), check_literal)

    S, I, D, B = _t("string"), _t("integer"), NUMERIC, _t("boolean")

    add("string-equal", [S, S], "boolean", lambda a, b: a == b)
    add("string-one-of", [S, S], "boolean", lambda a, *opts: a in opts, variadic=True, min_args=2)
    add("integer-equal", [I, I], "boolean", lambda a, b: a == b)
    add("integer-le", [I, I], "boolean", lambda a, b: a <= b)
    add("integer-ge", [I, I], "boolean", lambda a, b: a >= b)
    add("double-le", [D, D], "boolean", lambda a, b: float(a) <= float(b))
    add("double-ge", [D, D], "boolean", lambda a, b: float(a) >= float(b))
    add("double-lt", [D, D], "boolean", lambda a, b: float(a) < float(b))
    add("double-gt", [D, D], "boolean", lambda a, b: float(a) > float(b))
    add("and", [B], "boolean", lambda *xs: all(xs), variadic=True, min_args=1)
    add("or", [B], "boolean", lambda *xs: any(xs), variadic=True, min_args=1)
    add("not", [B], "boolean", lambda x: not x)
    add("geo-distance-km", [_t("geo"), _t("geo")], "double", geo_distance_km)
    add("time-in-range", [_t("time"), S, S], "boolean", in_daily_window, check_literal=_clock_literal)
    return reg


FUNCTIONS: dict[str, Function] = _build()
