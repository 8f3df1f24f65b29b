"""``ztiam`` administrator command line.

Pure verbs (policy lint, policy eval, trust score) run the engines
in-process. Stateful verbs (device enroll, events tail over HTTP) talk to
a running gateway. Exit codes: 0 success, 1 operational error, 2 usage.
"""

from __future__ import annotations

import json
import logging
import os
import signal
import sys
import time
from typing import Optional

import click

from ztiam.policy.document import PolicyError, context_from_json, parse_policy_set
from ztiam.policy.model import Decision
from ztiam.policy.pdp import evaluate
from ztiam.trust import FACTOR_NAMES, TrustConfig, TrustFactors, combine_decision, trust_score

log = logging.getLogger("ztiam.cli")

URL_ENV = "ZTIAM_URL"


def _emit(structured: bool, record: dict, text: str) -> None:
    if structured:
        click.echo(json.dumps(record, sort_keys=True, separators=(",", ":")))
    else:
        click.echo(text)


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise click.ClickException(f"{path}: {exc.strerror}") from None


output_option = click.option(
    "--output",
    type=click.Choice(["text", "structured"]),
    default="text",
    show_default=True,
    help="structured: one JSON record per line",
)


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def cli(verbose: int) -> None:
    """Zero-trust identity and access management."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# -- serve -------------------------------------------------------------------


def _ensure_tls_files(services, cfg) -> None:
    """Issue a server certificate from the internal CA if none is on disk."""
    tls = cfg.tls
    if not os.path.exists(tls.cert_file) or not os.path.exists(tls.key_file):
        key_pem, cert_pem = services.ca.issue_server_certificate([cfg.host, "localhost"])
        with open(tls.cert_file, "wb") as fh:
            fh.write(cert_pem)
        fd = os.open(tls.key_file, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(key_pem)
        log.warning("issued server certificate %s from the internal CA", tls.cert_file)
    if tls.ca_file and not os.path.exists(tls.ca_file):
        with open(tls.ca_file, "w", encoding="utf-8") as fh:
            fh.write(services.ca.ca_pem())


@cli.command()
@click.option("--config", "config_path", envvar="ZTIAM_CONFIG", required=True, help="TOML config (or $ZTIAM_CONFIG).")
@output_option
def serve(config_path: str, output: str) -> None:
    """Run the gateway until SIGINT/SIGTERM. SIGHUP reloads the trust settings."""
    import ssl

    import uvicorn

    from ztiam.gateway.app import create_app
    from ztiam.gateway.config import ConfigError, load_config
    from ztiam.gateway.services import build_services
    from ztiam.pki.keystore import KeystoreError, master_key_from_env

    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from None
    try:
        services = build_services(cfg, master_key_from_env(), config_path=config_path, start_background=True)
    except (KeystoreError, OSError, ValueError) as exc:
        raise click.ClickException(f"cannot start: {exc}") from None

    def reload(signum, frame):
        try:
            new = services.trust.reload()
            log.warning("trust configuration reloaded (threshold %.3f)", new.threshold)
        except ConfigError as exc:
            log.error("reload rejected, keeping current trust configuration: %s", exc)

    if hasattr(signal, "SIGHUP"):
        signal.signal(signal.SIGHUP, reload)

    kwargs = {}
    if cfg.tls.enabled:
        _ensure_tls_files(services, cfg)
        kwargs = {"ssl_certfile": cfg.tls.cert_file, "ssl_keyfile": cfg.tls.key_file}
        if cfg.tls.require_client_cert:
            kwargs.update(ssl_cert_reqs=ssl.CERT_REQUIRED, ssl_ca_certs=cfg.tls.ca_file)
    scheme = "https" if cfg.tls.enabled else "http"
    _emit(
        output == "structured",
        {"event": "listening", "url": f"{scheme}://{cfg.host}:{cfg.port}", "mtls": cfg.tls.require_client_cert},
        f"listening on {scheme}://{cfg.host}:{cfg.port}",
    )
    server = uvicorn.Server(uvicorn.Config(create_app(services), host=cfg.host, port=cfg.port, log_level="warning", **kwargs))
    try:
        server.run()
    finally:
        services.close()


# -- policy ------------------------------------------------------------------


@cli.group()
def policy() -> None:
    """Policy authoring tools (offline)."""


@policy.command("lint")
@click.option("--file", "path", required=True, help="Policy document (JSON).")
@output_option
def policy_lint(path: str, output: str) -> None:
    """Parse and type-check a policy document."""
    structured = output == "structured"
    try:
        ps = parse_policy_set(_read(path))
    except PolicyError as exc:
        _emit(structured, {"file": path, "ok": False, **exc.to_json()}, f"{path}: {exc.location or '$'}: {exc.code}: {exc.message}")
        sys.exit(1)
    n_rules = sum(len(p.rules) for p in ps.policies)
    _emit(
        structured,
        {"file": path, "ok": True, "policy_set_id": ps.policy_set_id, "policies": len(ps.policies), "rules": n_rules},
        f"{path}: ok ({ps.policy_set_id}: {len(ps.policies)} policies, {n_rules} rules)",
    )


@policy.command("eval")
@click.option("--file", "path", required=True, help="Policy document (JSON).")
@click.option("--context", "context_path", required=True, help="Request context: subject/resource/action/environment bags.")
@click.option("--time", "at", type=float, default=None, help="Evaluation time (epoch seconds) if the context has none.")
@output_option
def policy_eval(path: str, context_path: str, at: Optional[float], output: str) -> None:
    """Evaluate a request context against a policy document."""
    try:
        ps = parse_policy_set(_read(path))
    except PolicyError as exc:
        raise click.ClickException(f"{path}: {exc.location or '$'}: {exc.code}: {exc.message}") from None
    try:
        ctx = context_from_json(json.loads(_read(context_path)), time.time() if at is None else at)
    except json.JSONDecodeError as exc:
        raise click.ClickException(f"{context_path}: not JSON: {exc}") from None
    except (ValueError, TypeError) as exc:
        raise click.ClickException(f"{context_path}: {exc}") from None
    decision = evaluate(ps, ctx)
    _emit(output == "structured", {"decision": decision.value}, decision.value)


# -- trust -------------------------------------------------------------------


def _parse_factors(ctx, param, value: str) -> TrustFactors:
    seen = {}
    for item in value.split(","):
        name, sep, num = item.strip().partition("=")
        key = name.strip().removeprefix("f_")
        if not sep or key not in FACTOR_NAMES:
            raise click.BadParameter(f"expected f_<name>=<value> with name in {', '.join(FACTOR_NAMES)}, got {item!r}")
        if key in seen:
            raise click.BadParameter(f"factor {name} given twice")
        try:
            x = float(num)
        except ValueError:
            raise click.BadParameter(f"{name}: not a number: {num!r}") from None
        if not 0.0 <= x <= 1.0:
            raise click.BadParameter(f"{name}={num} is outside [0, 1]")
        seen[key] = x
    missing = [f"f_{n}" for n in FACTOR_NAMES if n not in seen]
    if missing:
        raise click.BadParameter(f"missing {', '.join(missing)}")
    return TrustFactors(**seen)


@cli.group()
def trust() -> None:
    """Trust-score what-ifs (offline)."""


@trust.command("score")
@click.option("--factors", required=True, callback=_parse_factors, help="f_geo=..,f_res=..,f_hist=..,f_pen=..,f_meta=..")
@click.option("--config", "config_path", default=None, help="Read weights and threshold from this config.")
@output_option
def trust_score_cmd(factors: TrustFactors, config_path: Optional[str], output: str) -> None:
    """Score normalized factors and show the outcome for each PDP decision."""
    cfg = TrustConfig()
    if config_path:
        from ztiam.gateway.config import ConfigError, load_config

        try:
            cfg = load_config(config_path, require_admin=False).trust
        except ConfigError as exc:
            raise click.ClickException(str(exc)) from None
    score = trust_score(factors, cfg)
    outcomes = {d.value: combine_decision(d, score, cfg.threshold).value for d in Decision}
    if output == "structured":
        _emit(True, {"score": score, "threshold": cfg.threshold, "outcomes": outcomes, "factors": factors.to_json()}, "")
        return
    click.echo(f"score      {score:.6f}")
    click.echo(f"threshold  {cfg.threshold:.6f}")
    for d, o in outcomes.items():
        click.echo(f"{d.upper():<14} -> {o}")


# -- HTTP verbs --------------------------------------------------------------


def _client(url: str, token: Optional[str], cacert: Optional[str], cert: Optional[str], key: Optional[str]):
    import httpx

    headers = {"Authorization": f"Bearer {token}"} if token else {}
    kwargs = {}
    if cacert:
        kwargs["verify"] = cacert
    if cert:
        import ssl

        sslctx = ssl.create_default_context(cafile=cacert) if cacert else ssl.create_default_context()
        sslctx.load_cert_chain(cert, key)
        kwargs["verify"] = sslctx
    return httpx.Client(base_url=url, headers=headers, timeout=10.0, **kwargs)


def _api_error(resp) -> click.ClickException:
    try:
        body = resp.json()
        detail = f"{body.get('error')}: {body.get('message')}"
    except ValueError:
        detail = resp.text[:200]
    return click.ClickException(f"HTTP {resp.status_code}: {detail}")


def http_options(f):
    f = click.option("--key", "client_key", default=None, help="Client key for mTLS.")(f)
    f = click.option("--cert", "client_cert", default=None, help="Client certificate for mTLS.")(f)
    f = click.option("--cacert", default=None, help="CA bundle for verifying the gateway.")(f)
    f = click.option("--token", envvar="ZTIAM_ADMIN_TOKEN", default=None, help="Admin token (or $ZTIAM_ADMIN_TOKEN).")(f)
    f = click.option("--url", envvar=URL_ENV, default="http://127.0.0.1:8080", show_default=True, help=f"Gateway base URL (or ${URL_ENV}).")(f)
    return f


@cli.group()
def device() -> None:
    """Device enrollment."""


@device.command("enroll")
@click.option("--id", "device_id", required=True, help="Device identifier (certificate CN).")
@click.option("--pubkey", required=True, help="Ed25519 public key, PEM file.")
@click.option("--out", default=None, help="Where to write the certificate (default <id>.pem).")
@click.option("--ca-out", default=None, help="Also write the CA certificate here.")
@click.option("--days", type=click.FloatRange(min=0, min_open=True), default=365, show_default=True)
@http_options
@output_option
def device_enroll(device_id, pubkey, out, ca_out, days, url, token, cacert, client_cert, client_key, output):
    """Have the gateway's CA issue a device certificate."""
    import httpx

    from ztiam.pki.ca import verify_certificate

    if not token:
        raise click.UsageError("an admin token is required (--token or $ZTIAM_ADMIN_TOKEN)")
    pem = _read(pubkey)
    out = out or f"{device_id}.pem"
    try:
        with _client(url, token, cacert, client_cert, client_key) as http:
            resp = http.post("/v1/device/enroll", json={"device_id": device_id, "public_key": pem, "validity_days": days})
            if resp.status_code != 200:
                raise _api_error(resp)
            issued = resp.json()
            ca = http.get("/v1/pki/ca")
            if ca.status_code != 200:
                raise _api_error(ca)
    except httpx.HTTPError as exc:
        raise click.ClickException(f"cannot reach {url}: {exc}") from None
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(issued["certificate"])
    if ca_out:
        with open(ca_out, "w", encoding="utf-8") as fh:
            fh.write(ca.text)
    status = verify_certificate(issued["certificate"], ca.text)
    _emit(
        output == "structured",
        {"device_id": device_id, "serial": issued["serial"], "certificate": out, "chain": status.value},
        f"enrolled {device_id} serial {issued['serial']} -> {out} (chain {status.value})",
    )
    if status.value != "Valid":
        sys.exit(1)


@cli.group()
def events() -> None:
    """Audit event export."""


@events.command("tail")
@click.option("--file", "path", default=None, help="Read a local event log instead of the API.")
@click.option("--after", type=click.IntRange(min=0), default=0, help="Start after this sequence number.")
@click.option("-f", "--follow", is_flag=True, help="Keep polling for new events.")
@click.option("--interval", type=click.FloatRange(min=0.05), default=1.0, show_default=True)
@click.option("--limit", type=click.IntRange(min=1), default=None, help="Stop after this many events.")
@http_options
@output_option
def events_tail(path, after, follow, interval, limit, url, token, cacert, client_cert, client_key, output):
    """Stream audit events as newline-delimited JSON.

    Both output modes print NDJSON; --output is accepted for uniformity.
    """
    import httpx

    from ztiam.events import AuditEvent, read_records

    emitted = 0
    offset = 0
    http = None
    if path is None:
        if not token:
            raise click.UsageError("an admin token is required (--token or $ZTIAM_ADMIN_TOKEN) unless --file is given")
        http = _client(url, token, cacert, client_cert, client_key)

    def batch() -> list[dict]:
        nonlocal offset
        if http is None:
            try:
                evs, offset = read_records(path, offset)
            except FileNotFoundError:
                return []
            except OSError as exc:
                raise click.ClickException(f"{path}: {exc.strerror}") from None
            return [e.to_json() for e in evs if e.event_id > after]
        try:
            resp = http.get("/v1/events", params={"after": after, "limit": 1000})
        except httpx.HTTPError as exc:
            raise click.ClickException(f"cannot reach {url}: {exc}") from None
        if resp.status_code != 200:
            raise _api_error(resp)
        return [AuditEvent.from_json(json.loads(line)).to_json() for line in resp.text.splitlines() if line]

    try:
        while True:
            for rec in batch():
                click.echo(json.dumps(rec, separators=(",", ":")))
                after = rec["event_id"]
                emitted += 1
                if limit is not None and emitted >= limit:
                    return
            sys.stdout.flush()
            if not follow:
                return
            time.sleep(interval)
    except KeyboardInterrupt:
        pass
    finally:
        if http is not None:
            http.close()


def main() -> None:
    cli(prog_name="ztiam")


if __name__ == "__main__":
    main()
