"""Request context extraction: client IP, geolocation, server time, service id."""

from __future__ import annotations

import ipaddress
import logging
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Protocol

from ztiam.geo import GeoPoint

log = logging.getLogger(__name__)

SERVICE_HEADER = "x-service-id"
FORWARDED_HEADER = "x-forwarded-for"


@dataclass(frozen=True)
class LoginContext:
    ip: str
    timestamp: float
    geo: Optional[GeoPoint] = None
    service_id: str = ""

    def to_json(self) -> dict:
        return {
            "ip": self.ip,
            "timestamp": self.timestamp,
            "geo": None if self.geo is None else [self.geo.lat, self.geo.lon],
            "service_id": self.service_id,
        }


class GeoResolver(Protocol):
    def resolve(self, ip: str) -> Optional[GeoPoint]: ...


class NullResolver:
    def resolve(self, ip: str) -> Optional[GeoPoint]:
        return None


class StaticGeoResolver:
    """Maps addresses or CIDR networks to fixed points; first match wins."""

    def __init__(self, table: Mapping[str, GeoPoint | tuple[float, float]]):
        self._entries = []
        for net, point in table.items():
            if not isinstance(point, GeoPoint):
                point = GeoPoint(*point)
            self._entries.append((ipaddress.ip_network(net, strict=False), point))

    def resolve(self, ip: str) -> Optional[GeoPoint]:
        addr = ipaddress.ip_address(ip)
        for net, point in self._entries:
            if addr.version == net.version and addr in net:
                return point
        return None


def _client_ip(peer_ip: str, forwarded: Optional[str], proxies: list) -> str:
    if not proxies or forwarded is None:
        return peer_ip

    def trusted(ip: str) -> bool:
        try:
            a = ipaddress.ip_address(ip)
        except ValueError:
            return False
        return any(a.version == n.version and a in n for n in proxies)

    if not trusted(peer_ip):
        return peer_ip
    # walk right to left past our own proxies
    hops = [h.strip() for h in forwarded.split(",") if h.strip()]
    for hop in reversed(hops):
        if not trusted(hop):
            try:
                ipaddress.ip_address(hop)
            except ValueError:
                return peer_ip
            return hop
    return hops[0] if hops else peer_ip


def extract_context(
    peer_ip: str,
    headers: Mapping[str, str],
    *,
    resolver: GeoResolver = NullResolver(),
    clock: Callable[[], float] = time.time,
    trusted_proxies: Iterable[str] = (),
) -> LoginContext:
    """Build the server-side context for a request.

    Header names are matched case-insensitively. Client-supplied time
    headers are never consulted.
    """
    lower = {k.lower(): v for k, v in headers.items()}
    proxies = [ipaddress.ip_network(p, strict=False) for p in trusted_proxies]
    ip = _client_ip(peer_ip, lower.get(FORWARDED_HEADER), proxies)
    try:
        geo = resolver.resolve(ip)
    except Exception:  # resolver is pluggable; any failure means unknown location
        log.warning("geo resolver failed for %s", ip, exc_info=True)
        geo = None
    return LoginContext(ip=ip, timestamp=clock(), geo=geo, service_id=lower.get(SERVICE_HEADER, ""))
