"""Salted scrypt password records."""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass

KDF_ID = "scrypt"
# 16 MiB per hash
DEFAULT_COST = {"n": 2**14, "r": 8, "p": 1}
SALT_BYTES = 16
DIGEST_BYTES = 32


@dataclass(frozen=True)
class PasswordRecord:
    kdf: str
    salt: bytes
    n: int
    r: int
    p: int
    digest: bytes


def _derive(password: str, salt: bytes, n: int, r: int, p: int) -> bytes:
    return hashlib.scrypt(
        password.encode("utf-8"), salt=salt, n=n, r=r, p=p, maxmem=256 * n * r + (1 << 20), dklen=DIGEST_BYTES
    )


def hash_password(password: str, cost: dict = DEFAULT_COST) -> PasswordRecord:
    salt = os.urandom(SALT_BYTES)
    return PasswordRecord(KDF_ID, salt, cost["n"], cost["r"], cost["p"], _derive(password, salt, **cost))


def verify_password(password: str, record: PasswordRecord) -> bool:
    if record.kdf != KDF_ID:
        raise ValueError(f"unsupported kdf {record.kdf!r}")
    candidate = _derive(password, record.salt, record.n, record.r, record.p)
    return hmac.compare_digest(candidate, record.digest)
