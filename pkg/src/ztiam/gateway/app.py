"""HTTP API. Request and response bodies are JSON; see docs/api.md."""

from __future__ import annotations

import base64
import binascii
import hmac
import json
import logging
import re
import uuid
from typing import Any, Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse, Response
from starlette.concurrency import run_in_threadpool

from ztiam.authn.context import LoginContext, extract_context
from ztiam.authn.service import (
    AccountLocked,
    AuthError,
    BadCredentials,
    SessionToken,
    UserAccount,
    UsernameTaken,
    WeakPassword,
)
from ztiam.events import EventKind, QueueFull, correlation_id
from ztiam.gateway.ratelimit import TokenBucketLimiter
from ztiam.gateway.services import Services
from ztiam.pki.ca import DeviceAuthError, DuplicateDevice, MalformedKey, PkiError, UnknownDevice
from ztiam.policy.document import PolicyError, attribute_bag_from_json, parse_policy_set, serialize_policy_set
from ztiam.trust import TrustSignals, determine_mode, normalize_factors, trust_score

log = logging.getLogger(__name__)

CORRELATION_HEADER = "X-Correlation-Id"
_CID = re.compile(r"^[A-Za-z0-9._-]{1,64}$")


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str = "", **extra: Any):
        self.status = status
        self.code = code
        self.message = message or code
        self.extra = extra
        super().__init__(message)


class CorrelationMiddleware:
    """Assigns each request a correlation id, echoed in the response and audit events."""

    def __init__(self, app):
        self.app = app

    async def __call__(self, scope, receive, send):
        if scope["type"] != "http":
            return await self.app(scope, receive, send)
        supplied = None
        for k, v in scope.get("headers", []):
            if k.decode("latin-1").lower() == CORRELATION_HEADER.lower():
                supplied = v.decode("latin-1")
        cid = supplied if supplied and _CID.match(supplied) else uuid.uuid4().hex
        token = correlation_id.set(cid)

        async def send_with_id(message):
            if message["type"] == "http.response.start":
                message.setdefault("headers", [])
                message["headers"] = list(message["headers"]) + [(CORRELATION_HEADER.lower().encode(), cid.encode())]
            await send(message)

        try:
            await self.app(scope, receive, send_with_id)
        finally:
            correlation_id.reset(token)


_AUTH_STATUS = {
    "BAD_CREDENTIALS": 401,
    "ACCOUNT_LOCKED": 423,
    "CODE_INVALID": 401,
    "PENDING_EXPIRED": 401,
    "TOO_MANY_ATTEMPTS": 401,
    "USERNAME_TAKEN": 409,
    "WEAK_PASSWORD": 400,
}


def create_app(services: Services) -> FastAPI:
    app = FastAPI(title="ztiam", docs_url=None, redoc_url=None, openapi_url=None)
    app.state.services = services
    cfg = services.config
    limiter = TokenBucketLimiter(cfg.rate_per_second, cfg.rate_burst)

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse({"error": exc.code, "message": exc.message, **exc.extra}, status_code=exc.status)

    @app.exception_handler(QueueFull)
    async def _queue_full(request: Request, exc: QueueFull):
        return JSONResponse({"error": "AUDIT_BACKPRESSURE", "message": str(exc)}, status_code=503)

    # -- helpers -----------------------------------------------------------

    async def body_json(request: Request) -> dict:
        raw = await request.body()
        try:
            obj = json.loads(raw or b"null")
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise ApiError(400, "MALFORMED_BODY", "request body is not valid JSON") from None
        if not isinstance(obj, dict):
            raise ApiError(400, "MALFORMED_BODY", "request body must be a JSON object")
        return obj

    def field(obj: dict, name: str, kind=str) -> Any:
        v = obj.get(name)
        if not isinstance(v, kind) or (kind is str and not v):
            raise ApiError(400, "MALFORMED_BODY", f"field {name!r} is required")
        return v

    def context_of(request: Request) -> LoginContext:
        peer = request.client.host if request.client else "0.0.0.0"
        return extract_context(
            peer, request.headers, resolver=services.resolver, clock=services.clock, trusted_proxies=cfg.trusted_proxies
        )

    def rate_limit(request: Request) -> None:
        peer = request.client.host if request.client else "unknown"
        if not limiter.allow(peer):
            raise ApiError(429, "RATE_LIMITED", "too many requests")

    def bearer(request: Request) -> str:
        h = request.headers.get("authorization", "")
        scheme, _, token = h.partition(" ")
        if scheme.lower() != "bearer" or not token.strip():
            raise ApiError(401, "UNAUTHENTICATED", "bearer token required")
        return token.strip()

    def require_admin(request: Request) -> None:
        token = bearer(request)
        if hmac.compare_digest(token.encode(), cfg.admin_token.encode()):
            return
        if services.auth.session(token) is not None:
            raise ApiError(403, "FORBIDDEN", "administrator token required")
        raise ApiError(401, "UNAUTHENTICATED", "invalid token")

    def require_session(request: Request) -> tuple[SessionToken, UserAccount]:
        session = services.auth.session(bearer(request))
        if session is None:
            raise ApiError(401, "SESSION_INVALID", "session missing or expired")
        account = services.auth.account(session.user_id)
        if account is None:
            raise ApiError(401, "SESSION_INVALID", "unknown account")
        return session, account

    def auth_error(exc: AuthError) -> ApiError:
        return ApiError(_AUTH_STATUS.get(exc.code, 401), exc.code, str(exc))

    # -- routes ------------------------------------------------------------

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok"}

    @app.post("/v1/auth/register")
    async def register(request: Request):
        require_admin(request)
        body = await body_json(request)
        username, password, org = field(body, "username"), field(body, "password"), field(body, "org")
        try:
            account, uri = await run_in_threadpool(services.auth.register, username, password, org)
        except (UsernameTaken, WeakPassword) as exc:
            raise auth_error(exc) from None
        return {"user_id": account.user_id, "username": account.username, "provisioning_uri": uri}

    @app.post("/v1/auth/login")
    async def login(request: Request):
        rate_limit(request)
        body = await body_json(request)
        username, password = field(body, "username"), field(body, "password")
        ctx = context_of(request)
        try:
            pending = await run_in_threadpool(services.auth.start_login, username, password, ctx)
        except (BadCredentials, AccountLocked) as exc:
            raise auth_error(exc) from None
        return {"pending_id": pending.pending_id, "expires_at": pending.expires_at}

    @app.post("/v1/auth/totp")
    async def totp(request: Request):
        rate_limit(request)
        body = await body_json(request)
        pending_id, code = field(body, "pending_id"), field(body, "code")
        try:
            session = await run_in_threadpool(services.auth.verify_totp, pending_id, code)
        except AuthError as exc:
            raise auth_error(exc) from None
        return {"token": session.token, "token_type": "bearer", "expires_at": session.expires_at}

    @app.post("/v1/authorize")
    async def authorize(request: Request):
        session, account = require_session(request)
        body = await body_json(request)
        try:
            # the body's subject bag, if any, is deliberately ignored
            resource = attribute_bag_from_json(body.get("resource"), "resource")
            action = attribute_bag_from_json(body.get("action"), "action")
            environment = attribute_bag_from_json(body.get("environment"), "environment")
        except ValueError as exc:
            raise ApiError(400, "MALFORMED_BODY", str(exc)) from None
        environment.pop("time", None)
        if "id" not in resource:
            raise ApiError(400, "MALFORMED_BODY", "resource.id is required")
        ctx = context_of(request)
        final = await run_in_threadpool(services.pep.authorize, account, ctx, resource, action, environment)
        status = 503 if "STORE_UNAVAILABLE" in final.reasons else 200
        return JSONResponse(final.to_json(), status_code=status)

    @app.post("/v1/device/enroll")
    async def device_enroll(request: Request):
        require_admin(request)
        body = await body_json(request)
        device_id, public_key = field(body, "device_id"), field(body, "public_key")
        days = body.get("validity_days", 365)
        if isinstance(days, bool) or not isinstance(days, (int, float)) or days <= 0:
            raise ApiError(400, "MALFORMED_BODY", "validity_days must be positive")
        try:
            identity = await run_in_threadpool(services.ca.enroll_device, device_id, public_key, days)
        except DuplicateDevice as exc:
            raise ApiError(409, exc.code, str(exc)) from None
        except MalformedKey as exc:
            raise ApiError(400, exc.code, str(exc)) from None
        return {"device_id": device_id, "serial": identity.serial, "certificate": identity.certificate_pem()}

    @app.post("/v1/device/challenge")
    async def device_challenge(request: Request):
        rate_limit(request)
        body = await body_json(request)
        try:
            rec = services.ca.create_challenge(field(body, "device_id"))
        except UnknownDevice as exc:
            raise ApiError(404, exc.code, str(exc)) from None
        except DeviceAuthError as exc:
            raise ApiError(401, exc.code, str(exc)) from None
        return {
            "challenge_id": rec.challenge_id,
            "nonce": base64.b64encode(rec.nonce).decode("ascii"),
            "expires_at": rec.expires_at,
        }

    @app.post("/v1/device/respond")
    async def device_respond(request: Request):
        rate_limit(request)
        body = await body_json(request)
        challenge_id, sig_b64 = field(body, "challenge_id"), field(body, "signature")
        try:
            signature = base64.b64decode(sig_b64, validate=True)
        except binascii.Error:
            raise ApiError(400, "MALFORMED_BODY", "signature must be base64") from None
        try:
            session = await run_in_threadpool(services.ca.verify_challenge_response, challenge_id, signature)
        except DeviceAuthError as exc:
            raise ApiError(401, exc.code, str(exc)) from None
        return {"device_id": session.device_id, "token": session.token, "expires_at": session.expires_at}

    @app.post("/v1/device/revoke")
    async def device_revoke(request: Request):
        require_admin(request)
        body = await body_json(request)
        try:
            services.ca.revoke_device(field(body, "device_id"), str(body.get("reason", "unspecified")))
        except PkiError as exc:
            raise ApiError(404, exc.code, str(exc)) from None
        return {"revoked": body["device_id"]}

    @app.get("/v1/pki/ca")
    async def ca_certificate():
        return PlainTextResponse(services.ca.ca_pem(), media_type="application/x-pem-file")

    @app.put("/v1/policies")
    async def put_policies(request: Request):
        require_admin(request)
        raw = await request.body()
        try:
            parsed = parse_policy_set(raw)
        except PolicyError as exc:
            raise ApiError(422, exc.code, exc.message, location=exc.location) from None
        published = services.policies.publish(parsed)
        services.events.record(
            EventKind.POLICY_UPDATED,
            "admin",
            detail={"policy_set_id": published.policy_set_id, "version": str(published.version)},
        )
        return {"policy_set_id": published.policy_set_id, "version": published.version}

    @app.get("/v1/policies")
    async def get_policies(request: Request):
        require_admin(request)
        return Response(serialize_policy_set(services.policies.current()), media_type="application/json")

    @app.get("/v1/trust/{user}")
    async def trust_view(request: Request, user: str):
        """What-if view of a user's trust inputs; no side effects."""
        require_admin(request)
        account = services.auth.account(user) or services.auth.account_by_name(user)
        user_id = account.user_id if account else user
        q = request.query_params
        now = services.clock()
        profile = services.pip.get(user_id, now)
        resource_id = q.get("resource_id", "")
        distance = _float_param(q.get("distance_km"))
        ip, service_id = q.get("ip", ""), q.get("service_id", "")
        hour = int((now // 3600) % 24)
        signals = TrustSignals(
            request_time=now,
            service_id=service_id,
            ip=ip,
            distance_km=distance,
            prior_requests_same_resource=profile.per_resource_requests.get(resource_id, 0),
            prior_successful_authz_total=profile.total_successful_authz,
            penalties_in_window=profile.penalties_in_window,
            ip_seen_before=bool(ip) and ip in profile.known_ips,
            service_seen_before=bool(service_id) and service_id in profile.known_services,
            time_in_usual_band=hour in profile.usual_hours,
        )
        tcfg = services.trust()
        factors = normalize_factors(signals, tcfg)
        return {
            "profile": profile.to_json(),
            "factors": factors.to_json(),
            "score": trust_score(factors, tcfg),
            "threshold": tcfg.threshold,
            "mode": determine_mode(profile, resource_id, now, tcfg).value if resource_id else None,
        }

    @app.get("/v1/events")
    async def events_since(request: Request):
        require_admin(request)
        after = _int_param(request.query_params.get("after"), 0)
        limit = _int_param(request.query_params.get("limit"), 1000)
        batch = services.store.since(after)[:limit]
        body = "".join(json.dumps(e.to_json(), separators=(",", ":")) + "\n" for e in batch)
        return Response(body, media_type="application/x-ndjson")

    app.add_middleware(CorrelationMiddleware)
    return app


def _float_param(v: Optional[str]) -> Optional[float]:
    if v is None or v == "":
        return None
    try:
        f = float(v)
    except ValueError:
        raise ApiError(400, "BAD_QUERY", f"not a number: {v!r}") from None
    if not f >= 0:
        raise ApiError(400, "BAD_QUERY", "distance must be non-negative")
    return f


def _int_param(v: Optional[str], default: int) -> int:
    if v is None:
        return default
    try:
        n = int(v)
    except ValueError:
        raise ApiError(400, "BAD_QUERY", f"not an integer: {v!r}") from None
    if n < 0:
        raise ApiError(400, "BAD_QUERY", "must be non-negative")
    return n
