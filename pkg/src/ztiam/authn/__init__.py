"""Multi-factor user authentication."""

from ztiam.authn.context import LoginContext, NullResolver, StaticGeoResolver, extract_context
from ztiam.authn.service import (
    AccountLocked,
    AccountStatus,
    AuthConfig,
    AuthError,
    AuthService,
    BadCredentials,
    CodeInvalid,
    PendingExpired,
    PendingLogin,
    SessionToken,
    TooManyAttempts,
    UserAccount,
    UsernameTaken,
    WeakPassword,
)
from ztiam.authn.totp import hotp, provisioning_uri, totp_code, verify_code

__all__ = [
    "AccountLocked", "AccountStatus", "AuthConfig", "AuthError", "AuthService", "BadCredentials",
    "CodeInvalid", "LoginContext", "NullResolver", "PendingExpired", "PendingLogin", "SessionToken",
    "StaticGeoResolver", "TooManyAttempts", "UserAccount", "UsernameTaken", "WeakPassword",
    "extract_context", "hotp", "provisioning_uri", "totp_code", "verify_code",
]
