"""Service configuration (TOML).

Recognised keys::

    [server]  listen, admin_token, data_dir, issuer
    [tls]     enabled, cert_file, key_file, require_client_cert, ca_file
    [trust]   weights.{geo,res,hist,pen,meta}, threshold, d0_km, dmax_km, k_res,
              k_hist, promote_n, cycle_days, penalty_window_days,
              demote_penalties, access_window = ["HH:MM", "HH:MM"]
    [pip]     refresh_seconds, staleness_seconds
    [events]  queue_capacity
    [gateway] trusted_proxies, rate_per_second, rate_burst
    [geo]     "<address or CIDR>" = [lat, lon]

``ZTIAM_ADMIN_TOKEN`` overrides ``server.admin_token``.
"""

from __future__ import annotations

import ipaddress
import os
import re
import threading
from dataclasses import dataclass, field
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ztiam.geo import GeoPoint
from ztiam.pip import PipConfig
from ztiam.trust import FACTOR_NAMES, TrustConfig

CONFIG_ENV = "ZTIAM_CONFIG"
ADMIN_TOKEN_ENV = "ZTIAM_ADMIN_TOKEN"
DAY = 86400.0

_KNOWN = {
    "server": {"listen", "admin_token", "data_dir", "issuer"},
    "tls": {"enabled", "cert_file", "key_file", "require_client_cert", "ca_file"},
    "trust": {
        "weights", "threshold", "d0_km", "dmax_km", "k_res", "k_hist", "promote_n", "cycle_days",
        "penalty_window_days", "demote_penalties", "access_window",
    },
    "pip": {"refresh_seconds", "staleness_seconds"},
    "events": {"queue_capacity"},
    "gateway": {"trusted_proxies", "rate_per_second", "rate_burst"},
    "geo": None,
}


class ConfigError(Exception):
    def __init__(self, message: str, path: str = "<config>", line: Optional[int] = None):
        self.message = message
        self.path = path
        self.line = line
        where = f"{path}:{line}" if line else path
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class TlsConfig:
    enabled: bool = False
    cert_file: Optional[str] = None
    key_file: Optional[str] = None
    require_client_cert: bool = False
    ca_file: Optional[str] = None


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    admin_token: str = ""
    data_dir: Optional[str] = None
    issuer: str = "ztiam"
    tls: TlsConfig = TlsConfig()
    trust: TrustConfig = TrustConfig()
    pip: PipConfig = PipConfig()
    queue_capacity: int = 4096
    trusted_proxies: tuple[str, ...] = ()
    rate_per_second: float = 10.0
    rate_burst: int = 20
    geo_table: dict = field(default_factory=dict)


def _line_of(text: str, dotted: str) -> Optional[int]:
    """Best-effort line number of a key in TOML source."""
    parts = dotted.split(".")
    table, leaf = parts[0], parts[-1]
    current = None
    table_line = None
    header = re.compile(r"^\s*\[\s*([^\]]+?)\s*\]")
    for i, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if current == dotted:
                return i
            if current == table and table_line is None:
                table_line = i
            continue
        stripped = line.split("#", 1)[0]
        key = stripped.split("=", 1)[0].strip().strip('"')
        if "=" not in stripped:
            continue
        full = f"{current}.{key}" if current else key
        if full == dotted or full.startswith(dotted + ".") or key == dotted:
            return i
        if current == table and key.split(".")[-1] == leaf:
            return i
    # key absent: point at its section
    return table_line


def parse_config(
    text: str, path: str = "<config>", env: Optional[dict] = None, *, require_admin: bool = True
) -> ServiceConfig:
    env = os.environ if env is None else env
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(str(exc), path, int(m.group(1)) if m else None) from None

    def fail(key: str, msg: str):
        raise ConfigError(f"{key}: {msg}", path, _line_of(text, key))

    for table, value in raw.items():
        if table not in _KNOWN:
            fail(table, "unknown section")
        if not isinstance(value, dict):
            fail(table, "expected a table")
        allowed = _KNOWN[table]
        if allowed is not None:
            for k in value:
                if k not in allowed:
                    fail(f"{table}.{k}", "unknown key")

    def get(table: str, key: str, kind, default):
        v = raw.get(table, {}).get(key, default)
        if v is default:
            return v
        if kind is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, kind) or (kind is int and isinstance(v, bool)):
            fail(f"{table}.{key}", f"expected {kind.__name__}, got {type(v).__name__}")
        return v

    listen = get("server", "listen", str, "127.0.0.1:8080")
    host, _, port_s = listen.rpartition(":")
    if not host or not port_s.isdigit() or not 0 < int(port_s) < 65536:
        fail("server.listen", f"expected host:port, got {listen!r}")

    # trust
    tdefault = TrustConfig()
    weights_raw = raw.get("trust", {}).get("weights", {})
    if not isinstance(weights_raw, dict):
        fail("trust.weights", "expected a table of factor weights")
    unknown = set(weights_raw) - set(FACTOR_NAMES)
    if unknown:
        fail(f"trust.weights.{sorted(unknown)[0]}", "unknown factor")
    weights = []
    for name, dflt in zip(FACTOR_NAMES, tdefault.weights):
        w = weights_raw.get(name, dflt)
        if isinstance(w, bool) or not isinstance(w, (int, float)):
            fail(f"trust.weights.{name}", "expected a number")
        weights.append(float(w))
    access = get("trust", "access_window", list, None)
    if access is not None and (len(access) != 2 or not all(isinstance(a, str) for a in access)):
        fail("trust.access_window", 'expected ["HH:MM", "HH:MM"]')
    trust_kwargs = dict(
        weights=tuple(weights),
        threshold=get("trust", "threshold", float, tdefault.threshold),
        d0_km=get("trust", "d0_km", float, tdefault.d0_km),
        dmax_km=get("trust", "dmax_km", float, tdefault.dmax_km),
        k_res=get("trust", "k_res", int, tdefault.k_res),
        k_hist=get("trust", "k_hist", int, tdefault.k_hist),
        promote_n=get("trust", "promote_n", int, tdefault.promote_n),
        cycle_window=get("trust", "cycle_days", float, tdefault.cycle_window / DAY) * DAY,
        penalty_window=get("trust", "penalty_window_days", float, tdefault.penalty_window / DAY) * DAY,
        demote_penalties=get("trust", "demote_penalties", int, tdefault.demote_penalties),
        access_window=None if access is None else tuple(access),
    )
    try:
        trust = TrustConfig(**trust_kwargs)
    except ValueError as exc:
        msg = str(exc)
        key = "trust.weights" if "weight" in msg else "trust." + next(
            (k for k in ("threshold", "d0_km", "dmax_km", "k_res", "k_hist", "promote_n", "demote_penalties",
                         "access_window") if k in msg),
            "threshold",
        )
        fail(key, msg)

    refresh = get("pip", "refresh_seconds", float, 60.0)
    staleness = get("pip", "staleness_seconds", float, None)
    try:
        pip = PipConfig(refresh_interval=refresh, staleness_bound=staleness)
    except ValueError as exc:
        fail("pip.staleness_seconds" if staleness is not None else "pip.refresh_seconds", str(exc))

    cap = get("events", "queue_capacity", int, 4096)
    if cap < 1:
        fail("events.queue_capacity", "must be positive")

    tls = TlsConfig(
        enabled=get("tls", "enabled", bool, False),
        cert_file=get("tls", "cert_file", str, None),
        key_file=get("tls", "key_file", str, None),
        require_client_cert=get("tls", "require_client_cert", bool, False),
        ca_file=get("tls", "ca_file", str, None),
    )
    if tls.enabled and not (tls.cert_file and tls.key_file):
        fail("tls.enabled", "TLS needs cert_file and key_file")
    if tls.require_client_cert and not (tls.enabled and tls.ca_file):
        fail("tls.require_client_cert", "client certificates need tls.enabled and tls.ca_file")

    proxies = get("gateway", "trusted_proxies", list, [])
    for p in proxies:
        try:
            ipaddress.ip_network(p, strict=False)
        except (ValueError, TypeError):
            fail("gateway.trusted_proxies", f"not an address or network: {p!r}")
    rate = get("gateway", "rate_per_second", float, 10.0)
    burst = get("gateway", "rate_burst", int, 20)
    if rate <= 0 or burst < 1:
        fail("gateway.rate_per_second", "rate and burst must be positive")

    geo_table = {}
    for net, point in raw.get("geo", {}).items():
        try:
            ipaddress.ip_network(net, strict=False)
            lat, lon = point
            geo_table[net] = GeoPoint(lat, lon)
        except (ValueError, TypeError):
            fail(f"geo.{net}", "expected \"<cidr>\" = [lat, lon]")

    admin = env.get(ADMIN_TOKEN_ENV) or get("server", "admin_token", str, "")
    if not admin and require_admin:
        fail("server.admin_token", f"an admin token is required (or set {ADMIN_TOKEN_ENV})")

    return ServiceConfig(
        host=host,
        port=int(port_s),
        admin_token=admin,
        data_dir=get("server", "data_dir", str, None),
        issuer=get("server", "issuer", str, "ztiam"),
        tls=tls,
        trust=trust,
        pip=pip,
        queue_capacity=cap,
        trusted_proxies=tuple(proxies),
        rate_per_second=rate,
        rate_burst=burst,
        geo_table=geo_table,
    )


def load_config(path: str, env: Optional[dict] = None, *, require_admin: bool = True) -> ServiceConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_config(text, path, env, require_admin=require_admin)


class TrustConfigHolder:
    """Atomically swappable trust configuration (hot reload)."""

    def __init__(self, config: TrustConfig, path: Optional[str] = None):
        self._config = config
        self.path = path
        self._lock = threading.Lock()

    def __call__(self) -> TrustConfig:
        return self._config

    def set(self, config: TrustConfig) -> None:
        with self._lock:
            self._config = config

    def reload(self) -> TrustConfig:
        """Re-read the config file; on error the current config stays in force."""
        if self.path is None:
            return self._config
        new = load_config(self.path, require_admin=False).trust
        self.set(new)
        return new

