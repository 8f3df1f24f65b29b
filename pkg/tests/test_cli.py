import contextlib
import json
import socket
import ssl
import threading
import time

import httpx
import pytest
from click.testing import CliRunner
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from conftest import ADMIN, BELGRADE, NIS, NOVI_SAD, ROOT
from ztiam.cli import cli
from ztiam.gateway.config import ServiceConfig
from ztiam.pki.keystore import generate_master_key

GEO_POLICY = str(ROOT / "policies" / "fig2-geo-read.policy")


@pytest.fixture
def run():
    runner = CliRunner()

    def invoke(*args, **kw):
        return runner.invoke(cli, [str(a) for a in args], catch_exceptions=False, **kw)

    return invoke


def write_context(tmp_path, resource_geo, org="org-a"):
    ctx = {
        "subject": {"org": "org-a", "geo": {"type": "geo", "v": [NOVI_SAD.lat, NOVI_SAD.lon]}},
        "resource": {"id": "doc-1", "org": org, "geo": {"type": "geo", "v": [resource_geo.lat, resource_geo.lon]}},
        "action": {"id": "READ"},
    }
    path = tmp_path / "ctx.json"
    path.write_text(json.dumps(ctx))
    return path


# -- policy ------------------------------------------------------------------


def test_lint_ok(run):
    r = run("policy", "lint", "--file", GEO_POLICY)
    assert r.exit_code == 0
    assert r.output.strip() == f"{GEO_POLICY}: ok (fig2-geo-read: 1 policies, 1 rules)"


def test_lint_reports_arity_mismatch(run, tmp_path):
    doc = json.loads(open(GEO_POLICY).read())
    cond = doc["policies"][0]["rules"][0]["condition"]
    cond["args"] = cond["args"][:1]
    path = tmp_path / "bad.policy"
    path.write_text(json.dumps(doc))
    r = run("policy", "lint", "--file", path)
    assert r.exit_code == 1
    assert "ArityMismatch" in r.output and "double-le" in r.output
    assert "$.policies[0].rules[0].condition" in r.output


def test_lint_structured(run, tmp_path):
    r = run("policy", "lint", "--file", GEO_POLICY, "--output", "structured")
    rec = json.loads(r.output)
    assert rec["ok"] is True and rec["rules"] == 1


def test_eval(run, tmp_path):
    r = run("policy", "eval", "--file", GEO_POLICY, "--context", write_context(tmp_path, BELGRADE))
    assert (r.exit_code, r.output.strip()) == (0, "Permit")
    r = run("policy", "eval", "--file", GEO_POLICY, "--context", write_context(tmp_path, NIS))
    assert r.output.strip() == "NotApplicable"
    r = run("policy", "eval", "--file", GEO_POLICY, "--context", write_context(tmp_path, BELGRADE, org="org-b"), "--output", "structured")
    assert json.loads(r.output) == {"decision": "NotApplicable"}


def test_eval_bad_context(run, tmp_path):
    path = tmp_path / "ctx.json"
    path.write_text("{nope")
    r = run("policy", "eval", "--file", GEO_POLICY, "--context", path)
    assert r.exit_code == 1 and "not JSON" in r.output


# -- trust -------------------------------------------------------------------


FACTORS = "f_geo=1.0,f_res=0.5,f_hist=0.8,f_pen=1.0,f_meta=0.0"


def test_trust_score_text(run):
    r = run("trust", "score", "--factors", FACTORS)
    assert r.exit_code == 0
    lines = r.output.splitlines()
    assert lines[0] == "score      0.720000"
    assert lines[1] == "threshold  0.600000"
    assert "PERMIT         -> Allow" in lines
    assert "DENY           -> Deny" in lines


def test_trust_score_structured(run):
    rec = json.loads(run("trust", "score", "--factors", FACTORS, "--output", "structured").output)
    assert rec["score"] == pytest.approx(0.72, abs=1e-9)
    assert rec["outcomes"]["NotApplicable"] == "Deny"


@pytest.mark.parametrize(
    "factors",
    [
        "f_geo=1.5,f_res=0.5,f_hist=0.6,f_pen=1.0,f_meta=0.25",
        "f_geo=1.0,f_res=0.5,f_hist=0.6,f_pen=1.0",
        "f_geo=1.0,f_geo=1.0,f_res=0.5,f_hist=0.6,f_pen=1.0,f_meta=0.25",
        "f_geo=x,f_res=0.5,f_hist=0.6,f_pen=1.0,f_meta=0.25",
    ],
)
def test_trust_score_rejects_bad_factors(run, factors):
    r = CliRunner().invoke(cli, ["trust", "score", "--factors", factors])
    assert r.exit_code == 2


def test_trust_score_uses_config(run, tmp_path):
    cfg = tmp_path / "svc.toml"
    cfg.write_text("[trust]\nthreshold = 0.8\n")
    r = run("trust", "score", "--factors", FACTORS, "--config", cfg)
    assert "threshold  0.800000" in r.output
    assert "PERMIT         -> Deny" in r.output


# -- serve -------------------------------------------------------------------


def test_serve_rejects_bad_config(run, tmp_path):
    cfg = tmp_path / "svc.toml"
    cfg.write_text('[server]\nadmin_token = "x"\n\n[trust]\nthreshold = 2.0\n')
    r = CliRunner().invoke(cli, ["serve", "--config", str(cfg)])
    assert r.exit_code == 1
    assert f"{cfg}:5:" in r.output and "threshold" in r.output


def test_serve_needs_master_key(tmp_path, monkeypatch):
    cfg = tmp_path / "svc.toml"
    cfg.write_text(f'[server]\nadmin_token = "x"\ndata_dir = "{tmp_path / "d"}"\n')
    monkeypatch.delenv("ZTIAM_MASTER_KEY", raising=False)
    r = CliRunner().invoke(cli, ["serve", "--config", str(cfg)])
    assert r.exit_code == 1 and "cannot start" in r.output


# -- against a live server ---------------------------------------------------


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@contextlib.contextmanager
def live_server(tmp_path, **uvicorn_kwargs):
    import uvicorn

    from ztiam.gateway.app import create_app
    from ztiam.gateway.services import build_services

    port = free_port()
    cfg = ServiceConfig(admin_token=ADMIN, data_dir=str(tmp_path / "data"), port=port)
    services = build_services(cfg, generate_master_key())
    extra = uvicorn_kwargs.pop("services_hook", None)
    if extra:
        uvicorn_kwargs.update(extra(services))
    server = uvicorn.Server(uvicorn.Config(create_app(services), host="127.0.0.1", port=port, log_level="error", **uvicorn_kwargs))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not server.started and time.time() < deadline:
        time.sleep(0.02)
    assert server.started
    try:
        yield services, port
    finally:
        server.should_exit = True
        thread.join(10)
        services.close()


def pub_pem(key) -> bytes:
    return key.public_key().public_bytes(serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo)


@pytest.mark.integration
def test_device_enroll_and_events_tail(run, tmp_path):
    key = Ed25519PrivateKey.generate()
    (tmp_path / "dev.pub").write_bytes(pub_pem(key))
    with live_server(tmp_path) as (services, port):
        url = f"http://127.0.0.1:{port}"
        r = run(
            "device", "enroll", "--id", "sensor-7", "--pubkey", tmp_path / "dev.pub",
            "--out", tmp_path / "sensor-7.pem", "--ca-out", tmp_path / "ca.pem", "--url", url, "--token", ADMIN,
        )
        assert r.exit_code == 0, r.output
        assert "(chain Valid)" in r.output
        assert "BEGIN CERTIFICATE" in (tmp_path / "sensor-7.pem").read_text()
        r = CliRunner().invoke(cli, ["device", "enroll", "--id", "sensor-7", "--pubkey", str(tmp_path / "dev.pub"), "--url", url, "--token", ADMIN])
        assert r.exit_code == 1 and "409" in r.output

        r = run("events", "tail", "--url", url, "--token", ADMIN)
        kinds = [json.loads(line)["kind"] for line in r.output.splitlines()]
        assert "DeviceEnrolled" in kinds
        services.events.flush()

    r = run("events", "tail", "--file", tmp_path / "data" / "events.log", "--after", 0)
    assert "DeviceEnrolled" in r.output


def test_events_tail_file_shows_logins(run, tmp_path, clock, geo_policy_text):
    from conftest import login_user, make_gateway

    services, client = make_gateway(tmp_path, clock)
    login_user(client, services)
    services.close()
    r = run("events", "tail", "--file", tmp_path / "data" / "events.log", "--output", "structured")
    recs = [json.loads(line) for line in r.output.splitlines()]
    assert "LoginSuccess" in {x["kind"] for x in recs}
    r = run("events", "tail", "--file", tmp_path / "data" / "events.log", "--after", 1, "--limit", 1)
    assert json.loads(r.output)["event_id"] == 2


def test_events_tail_needs_token(tmp_path, monkeypatch):
    monkeypatch.delenv("ZTIAM_ADMIN_TOKEN", raising=False)
    r = CliRunner().invoke(cli, ["events", "tail"])
    assert r.exit_code == 2


@pytest.mark.integration
def test_mutual_tls(tmp_path):
    """The listener refuses clients without a certificate from the internal CA."""
    files = {}

    def tls(services):
        key_pem, cert_pem = services.ca.issue_server_certificate(["127.0.0.1", "localhost"])
        for name, data in (("srv.key", key_pem), ("srv.pem", cert_pem), ("ca.pem", services.ca.ca_pem().encode())):
            (tmp_path / name).write_bytes(data)
        client_key = Ed25519PrivateKey.generate()
        ident = services.ca.enroll_device("client-1", pub_pem(client_key).decode())
        (tmp_path / "client.pem").write_bytes(ident.certificate.public_bytes(serialization.Encoding.PEM))
        (tmp_path / "client.key").write_bytes(
            client_key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption())
        )
        files["ca"] = str(tmp_path / "ca.pem")
        return {
            "ssl_certfile": str(tmp_path / "srv.pem"),
            "ssl_keyfile": str(tmp_path / "srv.key"),
            "ssl_cert_reqs": ssl.CERT_REQUIRED,
            "ssl_ca_certs": files["ca"],
        }

    with live_server(tmp_path, services_hook=tls) as (_, port):
        url = f"https://127.0.0.1:{port}/healthz"
        ctx = ssl.create_default_context(cafile=files["ca"])
        ctx.load_cert_chain(str(tmp_path / "client.pem"), str(tmp_path / "client.key"))
        assert httpx.get(url, verify=ctx).json() == {"status": "ok"}

        bare = ssl.create_default_context(cafile=files["ca"])
        with pytest.raises(httpx.HTTPError):
            httpx.get(url, verify=bare)

        # a certificate from some other CA is refused as well
        from ztiam.pki import CertificateAuthority, Keystore

        rogue = CertificateAuthority(Keystore(generate_master_key()))
        rogue.init_ca("rogue")
        k = Ed25519PrivateKey.generate()
        ident = rogue.enroll_device("client-1", pub_pem(k).decode())
        (tmp_path / "rogue.pem").write_bytes(ident.certificate.public_bytes(serialization.Encoding.PEM))
        (tmp_path / "rogue.key").write_bytes(
            k.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption())
        )
        other = ssl.create_default_context(cafile=files["ca"])
        other.load_cert_chain(str(tmp_path / "rogue.pem"), str(tmp_path / "rogue.key"))
        with pytest.raises(httpx.HTTPError):
            httpx.get(url, verify=other)
