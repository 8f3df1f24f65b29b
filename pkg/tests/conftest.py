from __future__ import annotations

import os
import sys
import warnings
from pathlib import Path

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from ztiam.authn.service import AuthConfig  # noqa: E402
from ztiam.gateway.config import ServiceConfig  # noqa: E402
from ztiam.geo import GeoPoint  # noqa: E402
from ztiam.pki.keystore import generate_master_key  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
GEO_POLICY_FILE = ROOT / "policies" / "fig2-geo-read.policy"

NOVI_SAD = GeoPoint(45.2671, 19.8335)
BELGRADE = GeoPoint(44.7866, 20.4489)
# about 200 km from Belgrade
NIS = GeoPoint(43.3209, 21.8958)

CLIENT_IP = "203.0.113.7"
ADMIN = "admin-token-for-tests"
PASSWORD = "correct horse battery"

# cheap scrypt for tests that are not about password hashing
FAST_KDF = {"n": 2**10, "r": 8, "p": 1}


class Clock:
    def __init__(self, t: float = 1_750_000_000.0):
        self.t = t

    def __call__(self) -> float:
        return self.t

    def advance(self, dt: float) -> float:
        self.t += dt
        return self.t


@pytest.fixture
def clock() -> Clock:
    return Clock()


@pytest.fixture(scope="session")
def master_key() -> bytes:
    return generate_master_key()


@pytest.fixture
def geo_policy_text() -> str:
    return GEO_POLICY_FILE.read_text()


def make_gateway(tmp_path, clock=None, *, data=True, kdf=FAST_KDF, **overrides):
    """Services plus a TestClient whose peer address resolves to Novi Sad."""
    from fastapi.testclient import TestClient

    from ztiam.gateway.app import create_app
    from ztiam.gateway.services import build_services

    cfg = ServiceConfig(
        admin_token=ADMIN,
        data_dir=str(tmp_path / "data") if data else None,
        geo_table={"203.0.113.0/24": NOVI_SAD},
        **overrides,
    )
    services = build_services(
        cfg,
        generate_master_key(),
        clock=clock or Clock(),
        auth_config=AuthConfig(kdf_cost=dict(kdf)),
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        client = TestClient(create_app(services), client=(CLIENT_IP, 5000))
    return services, client


def admin_headers() -> dict:
    return {"Authorization": f"Bearer {ADMIN}"}


def login_user(client, services, username="alice", org="org-a", password=PASSWORD, register=True):
    """Register (optionally), log in with both factors; returns (user_id, bearer headers)."""
    from ztiam.authn.totp import totp_code

    if register:
        r = client.post("/v1/auth/register", json={"username": username, "password": password, "org": org}, headers=admin_headers())
        assert r.status_code == 200, r.text
    account = services.auth.account_by_name(username)
    r = client.post("/v1/auth/login", json={"username": username, "password": password})
    assert r.status_code == 200, r.text
    pending = r.json()["pending_id"]
    code = totp_code(services.auth.totp_secret(account.user_id), services.clock())
    r = client.post("/v1/auth/totp", json={"pending_id": pending, "code": code})
    assert r.status_code == 200, r.text
    return account.user_id, {"Authorization": f"Bearer {r.json()['token']}"}


def read_request(org="org-a", geo=BELGRADE, resource_id="doc-1"):
    return {
        "resource": {"id": resource_id, "org": org, "geo": {"type": "geo", "v": [geo.lat, geo.lon]}},
        "action": {"id": "READ"},
    }
