"""Wiring of all components behind the gateway."""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from ztiam.authn.context import GeoResolver, NullResolver, StaticGeoResolver
from ztiam.authn.service import AuthConfig, AuthService
from ztiam.events import EventLog, EventStore
from ztiam.gateway.config import ServiceConfig, TrustConfigHolder
from ztiam.pep import PolicyEnforcementPoint
from ztiam.pip import PolicyInformationPoint
from ztiam.pki.ca import CA_KEY_ENTRY, CertificateAuthority
from ztiam.pki.keystore import Keystore
from ztiam.policy.document import parse_policy_set, serialize_policy_set
from ztiam.policy.model import PolicySet
from ztiam.policy.pdp import PolicyDecisionPoint, PolicyStore

log = logging.getLogger(__name__)


class PersistentPolicyStore(PolicyStore):
    """Policy store that writes each published version to disk."""

    def __init__(self, path: Optional[str] = None):
        initial = None
        if path is not None and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                initial = parse_policy_set(fh.read())
        super().__init__(initial)
        self.path = path
        self._write_lock = threading.Lock()

    def publish(self, policy_set: PolicySet) -> PolicySet:
        with self._write_lock:
            published = super().publish(policy_set)
            if self.path is not None:
                tmp = self.path + ".tmp"
                with open(tmp, "w", encoding="utf-8") as fh:
                    fh.write(serialize_policy_set(published))
                os.replace(tmp, self.path)
            return published


@dataclass
class Services:
    config: ServiceConfig
    store: EventStore
    events: EventLog
    keystore: Keystore
    auth: AuthService
    ca: CertificateAuthority
    policies: PolicyStore
    pdp: PolicyDecisionPoint
    pip: PolicyInformationPoint
    pep: PolicyEnforcementPoint
    trust: TrustConfigHolder
    resolver: GeoResolver
    clock: Callable[[], float]

    def close(self) -> None:
        self.pip.stop()
        self.events.close()


def build_services(
    config: ServiceConfig,
    master_key: bytes,
    *,
    clock: Callable[[], float] = time.time,
    auth_config: Optional[AuthConfig] = None,
    resolver: Optional[GeoResolver] = None,
    config_path: Optional[str] = None,
    start_background: bool = False,
) -> Services:
    data = config.data_dir
    if data is not None:
        os.makedirs(data, exist_ok=True)

    def at(name: str) -> Optional[str]:
        return None if data is None else os.path.join(data, name)

    store = EventStore(at("events.log"))
    events = EventLog(store, config.queue_capacity, clock=clock)
    keystore = Keystore(master_key, at("keystore.bin"))
    ca = CertificateAuthority(keystore, at("ca.json"), events=events, clock=clock)
    if CA_KEY_ENTRY not in keystore:
        ca.init_ca(f"{config.issuer} internal CA")
    auth = AuthService(keystore, events, auth_config or AuthConfig(issuer=config.issuer), clock, at("accounts.json"))
    policies = PersistentPolicyStore(at("policies.json"))
    pdp = PolicyDecisionPoint(policies)
    trust = TrustConfigHolder(config.trust, config_path)
    pip = PolicyInformationPoint(
        store, lambda: (trust().cycle_window, trust().penalty_window), config.pip, clock
    )
    if start_background:
        pip.start()
    pep = PolicyEnforcementPoint(pdp, pip, events, trust, clock)
    if resolver is None:
        resolver = StaticGeoResolver(config.geo_table) if config.geo_table else NullResolver()
    return Services(config, store, events, keystore, auth, ca, policies, pdp, pip, pep, trust, resolver, clock)
