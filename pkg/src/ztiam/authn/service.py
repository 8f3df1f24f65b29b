"""Two-stage user login: password, then TOTP soft token."""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import logging
import os
import secrets
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional

from ztiam.authn.context import LoginContext
from ztiam.authn.passwords import DEFAULT_COST, PasswordRecord, hash_password, verify_password
from ztiam.authn.totp import provisioning_uri, verify_code
from ztiam.events import EventKind, EventLog
from ztiam.pki.keystore import Keystore

log = logging.getLogger(__name__)


class AuthError(Exception):
    code = "AUTH_ERROR"


class BadCredentials(AuthError):
    code = "BAD_CREDENTIALS"

    def __init__(self) -> None:
        super().__init__("invalid username or password")


class AccountLocked(AuthError):
    code = "ACCOUNT_LOCKED"


class UsernameTaken(AuthError):
    code = "USERNAME_TAKEN"


class WeakPassword(AuthError):
    code = "WEAK_PASSWORD"


class CodeInvalid(AuthError):
    code = "CODE_INVALID"


class PendingExpired(AuthError):
    code = "PENDING_EXPIRED"


class TooManyAttempts(AuthError):
    code = "TOO_MANY_ATTEMPTS"


class AccountStatus(str, enum.Enum):
    ACTIVE = "Active"
    LOCKED = "Locked"


@dataclass(frozen=True)
class AuthConfig:
    issuer: str = "ztiam"
    min_password_length: int = 12
    lockout_failures: int = 5
    lockout_window: float = 900.0
    lockout_duration: float = 900.0
    pending_ttl: float = 120.0
    max_totp_attempts: int = 3
    totp_step: int = 30
    totp_digits: int = 6
    totp_skew: int = 1
    session_ttl: float = 3600.0
    kdf_cost: dict = field(default_factory=lambda: dict(DEFAULT_COST))


@dataclass
class UserAccount:
    user_id: str
    username: str
    password: PasswordRecord
    org: str
    created_at: float
    totp_entry: str
    totp_confirmed: bool = False
    status: AccountStatus = AccountStatus.ACTIVE
    locked_until: float = 0.0
    failures: list[float] = field(default_factory=list)

    def public(self) -> dict:
        return {
            "user_id": self.user_id,
            "username": self.username,
            "org": self.org,
            "created_at": self.created_at,
            "status": self.status.value,
            "totp_confirmed": self.totp_confirmed,
        }


@dataclass
class PendingLogin:
    pending_id: str
    user_id: str
    context: LoginContext
    issued_at: float
    expires_at: float
    attempts: int = 0
    consumed: bool = False


@dataclass(frozen=True)
class SessionToken:
    token: str
    user_id: str
    issued_at: float
    expires_at: float
    context: LoginContext


def _token_key(token: str) -> str:
    return hashlib.sha256(token.encode("utf-8")).hexdigest()


class AuthService:
    def __init__(
        self,
        keystore: Keystore,
        events: Optional[EventLog] = None,
        config: AuthConfig = AuthConfig(),
        clock: Callable[[], float] = time.time,
        path: Optional[str] = None,
    ):
        self.keystore = keystore
        self.path = path
        self.events = events
        self.config = config
        self.clock = clock
        self._lock = threading.RLock()
        self._accounts: dict[str, UserAccount] = {}
        self._by_name: dict[str, str] = {}
        self._pending: dict[str, PendingLogin] = {}
        # keyed by sha256(token)
        self._sessions: dict[str, SessionToken] = {}
        # burned on unknown usernames so failure timing matches a real check
        self._decoy = hash_password(secrets.token_hex(16), config.kdf_cost)
        if path is not None and os.path.exists(path):
            self._load()

    # -- persistence (password digests and public fields; TOTP secrets stay sealed) --

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for row in json.load(fh):
                pw = row["password"]
                record = PasswordRecord(
                    pw["kdf"], base64.b64decode(pw["salt"]), pw["n"], pw["r"], pw["p"], base64.b64decode(pw["digest"])
                )
                acct = UserAccount(
                    row["user_id"], row["username"], record, row["org"], row["created_at"], row["totp_entry"],
                    row["totp_confirmed"], AccountStatus(row["status"]), row["locked_until"], list(row["failures"]),
                )
                self._accounts[acct.user_id] = acct
                self._by_name[acct.username] = acct.user_id

    def _save(self) -> None:
        if self.path is None:
            return
        rows = []
        for a in self._accounts.values():
            pw = a.password
            rows.append({
                **a.public(),
                "totp_entry": a.totp_entry,
                "locked_until": a.locked_until,
                "failures": a.failures,
                "password": {
                    "kdf": pw.kdf, "salt": base64.b64encode(pw.salt).decode(), "n": pw.n, "r": pw.r, "p": pw.p,
                    "digest": base64.b64encode(pw.digest).decode(),
                },
            })
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=1)
        os.replace(tmp, self.path)

    def _emit(self, kind: EventKind, principal: str, ctx: Optional[LoginContext], **detail: str) -> None:
        if self.events is None:
            return
        self.events.record(
            kind,
            principal,
            timestamp=ctx.timestamp if ctx else self.clock(),
            ip=ctx.ip if ctx else None,
            geo=ctx.geo if ctx else None,
            service_id=(ctx.service_id or None) if ctx else None,
            detail=detail,
        )

    # -- accounts ----------------------------------------------------------

    def register(self, username: str, password: str, org: str) -> tuple[UserAccount, str]:
        if not username:
            raise BadCredentials()
        if len(password) < self.config.min_password_length:
            raise WeakPassword(f"password must be at least {self.config.min_password_length} characters")
        record = hash_password(password, self.config.kdf_cost)
        secret = os.urandom(20)
        with self._lock:
            if username in self._by_name:
                raise UsernameTaken(f"username {username!r} is taken")
            user_id = uuid.uuid4().hex
            entry = f"totp/{user_id}"
            self.keystore.put(entry, secret)
            account = UserAccount(user_id, username, record, org, self.clock(), entry)
            self._accounts[user_id] = account
            self._by_name[username] = user_id
            self._save()
        self._emit(EventKind.REGISTER, user_id, None, username=username, org=org)
        uri = provisioning_uri(secret, username, self.config.issuer, self.config.totp_digits, self.config.totp_step)
        return account, uri

    def account(self, user_id: str) -> Optional[UserAccount]:
        return self._accounts.get(user_id)

    def account_by_name(self, username: str) -> Optional[UserAccount]:
        uid = self._by_name.get(username)
        return None if uid is None else self._accounts[uid]

    def totp_secret(self, user_id: str) -> bytes:
        return self.keystore.get(self._accounts[user_id].totp_entry)

    # -- stage 1 -----------------------------------------------------------

    def start_login(self, username: str, password: str, context: LoginContext) -> PendingLogin:
        now = context.timestamp
        account = self.account_by_name(username)
        if account is None:
            verify_password(password, self._decoy)
            self._emit(EventKind.LOGIN_FAILURE, f"unknown:{username}", context, reason="BAD_CREDENTIALS")
            raise BadCredentials()

        with self._lock:
            if account.status is AccountStatus.LOCKED:
                if now < account.locked_until:
                    self._emit(EventKind.LOGIN_FAILURE, account.user_id, context, reason="ACCOUNT_LOCKED")
                    raise AccountLocked(f"account locked until {account.locked_until:.0f}")
                account.status = AccountStatus.ACTIVE
                account.failures.clear()
                self._save()

        ok = verify_password(password, account.password)
        with self._lock:
            if not ok:
                cutoff = now - self.config.lockout_window
                account.failures = [t for t in account.failures if t > cutoff] + [now]
                if len(account.failures) >= self.config.lockout_failures:
                    account.status = AccountStatus.LOCKED
                    account.locked_until = now + self.config.lockout_duration
                    log.warning("locking account %s after %d failures", account.username, len(account.failures))
                self._save()
                self._emit(EventKind.LOGIN_FAILURE, account.user_id, context, reason="BAD_CREDENTIALS")
                raise BadCredentials()
            if account.failures:
                account.failures.clear()
                self._save()
            pending = PendingLogin(
                secrets.token_urlsafe(24), account.user_id, context, now, now + self.config.pending_ttl
            )
            self._pending[pending.pending_id] = pending
        # first factor only; PIP treats stage=totp as a completed login
        self._emit(EventKind.LOGIN_SUCCESS, account.user_id, context, stage="password")
        return pending

    # -- stage 2 -----------------------------------------------------------

    def verify_totp(self, pending_id: str, code: str, now: Optional[float] = None) -> SessionToken:
        now = self.clock() if now is None else now
        with self._lock:
            pending = self._pending.get(pending_id)
            try:
                if pending is None or pending.consumed or now > pending.expires_at:
                    if pending is not None:
                        pending.consumed = True
                    raise PendingExpired("login attempt expired or already used")
                if pending.attempts >= self.config.max_totp_attempts:
                    pending.consumed = True
                    raise TooManyAttempts("too many invalid codes for this login attempt")
                account = self._accounts[pending.user_id]
                secret = self.keystore.get(account.totp_entry)
                c = self.config
                if not verify_code(secret, code, now, c.totp_step, c.totp_digits, c.totp_skew):
                    pending.attempts += 1
                    raise CodeInvalid("invalid one-time code")
                pending.consumed = True
                if not account.totp_confirmed:
                    account.totp_confirmed = True
                    self._save()
                session = SessionToken(
                    secrets.token_urlsafe(32), account.user_id, now, now + c.session_ttl, pending.context
                )
                self._sessions[_token_key(session.token)] = session
            except AuthError as exc:
                principal = pending.user_id if pending is not None else "unknown"
                ctx = pending.context if pending is not None else None
                self._emit(EventKind.MFA_FAILURE, principal, _at(ctx, now), reason=exc.code)
                raise
        self._emit(EventKind.LOGIN_SUCCESS, account.user_id, _at(pending.context, now), stage="totp")
        return session

    # -- sessions ----------------------------------------------------------

    def session(self, token: str, now: Optional[float] = None) -> Optional[SessionToken]:
        now = self.clock() if now is None else now
        s = self._sessions.get(_token_key(token))
        if s is None or now >= s.expires_at:
            return None
        return s

    def revoke_session(self, token: str) -> None:
        with self._lock:
            self._sessions.pop(_token_key(token), None)


def _at(ctx: Optional[LoginContext], now: float) -> Optional[LoginContext]:
    if ctx is None:
        return None
    return LoginContext(ip=ctx.ip, timestamp=now, geo=ctx.geo, service_id=ctx.service_id)
