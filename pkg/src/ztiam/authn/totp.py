"""Time-based one-time passwords (HMAC-SHA-1, RFC 6238)."""

from __future__ import annotations

import base64
import hashlib
import hmac
import struct
from urllib.parse import quote


def hotp(secret: bytes, counter: int, digits: int = 6) -> str:
    if digits not in (6, 8):
        raise ValueError("digits must be 6 or 8")
    if not 0 <= counter < 2**64:
        raise ValueError("counter out of range")
    mac = hmac.new(secret, struct.pack(">Q", counter), hashlib.sha1).digest()
    offset = mac[-1] & 0x0F
    binary = struct.unpack(">I", mac[offset : offset + 4])[0] & 0x7FFFFFFF
    return str(binary % 10**digits).zfill(digits)


def totp_code(secret: bytes, t: float, step: int = 30, digits: int = 6) -> str:
    return hotp(secret, int(t // step), digits)


def verify_code(secret: bytes, code: str, now: float, step: int = 30, digits: int = 6, skew: int = 1) -> bool:
    """Accept ``code`` for any counter within ``skew`` windows of ``now``."""
    if not (isinstance(code, str) and len(code) == digits and code.isdigit()):
        return False
    counter = int(now // step)
    ok = False
    for c in range(counter - skew, counter + skew + 1):
        if c >= 0:
            # no early exit: every candidate is compared
            ok |= hmac.compare_digest(hotp(secret, c, digits), code)
    return ok


def b32_secret(secret: bytes) -> str:
    return base64.b32encode(secret).decode("ascii").rstrip("=")


def provisioning_uri(secret: bytes, username: str, issuer: str, digits: int = 6, step: int = 30) -> str:
    label = quote(f"{issuer}:{username}", safe=":@")
    return (
        f"otpauth://totp/{label}?secret={b32_secret(secret)}&issuer={quote(issuer, safe='')}"
        f"&digits={digits}&period={step}&algorithm=SHA1"
    )
