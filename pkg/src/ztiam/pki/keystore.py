"""Sealed secret storage.

Entries are encrypted with AES-256-GCM under a master key supplied at
process start; the entry name is bound as associated data.

File layout: the 6-byte magic ``ZTKS1\\n`` followed by records, each a
4-byte big-endian payload length and the payload::

    u16 name length | name (UTF-8) | 12-byte nonce | ciphertext + 16-byte tag

Writing a name again appends a new record; the last record for a name
wins. :meth:`Keystore.compact` rewrites the file with live records only.
"""

from __future__ import annotations

import base64
import binascii
import os
import struct
import threading
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

MAGIC = b"ZTKS1\n"
MASTER_KEY_ENV = "ZTIAM_MASTER_KEY"
_LEN = struct.Struct(">I")
_NAME = struct.Struct(">H")
_NONCE = 12


class KeystoreError(Exception):
    pass


class SealFailure(KeystoreError):
    pass


class IntegrityFailure(KeystoreError):
    pass


class EntryNotFound(KeystoreError, KeyError):
    pass


def generate_master_key() -> bytes:
    return AESGCM.generate_key(bit_length=256)


def master_key_from_env(env: Optional[dict] = None) -> bytes:
    raw = (os.environ if env is None else env).get(MASTER_KEY_ENV)
    if not raw:
        raise SealFailure(f"{MASTER_KEY_ENV} is not set")
    try:
        key = base64.b64decode(raw, validate=True)
    except binascii.Error:
        raise SealFailure(f"{MASTER_KEY_ENV} is not valid base64") from None
    if len(key) != 32:
        raise SealFailure(f"{MASTER_KEY_ENV} must decode to 32 bytes, got {len(key)}")
    return key


class Keystore:
    """Encrypted name → bytes store, file-backed or (``path=None``) in memory."""

    def __init__(self, master_key: bytes, path: Optional[str | os.PathLike] = None):
        if len(master_key) != 32:
            raise SealFailure("master key must be 32 bytes")
        self._aead = AESGCM(master_key)
        self.path = None if path is None else os.fspath(path)
        self._lock = threading.Lock()
        # name -> (offset, length) of the payload in the file, or the payload itself in memory
        self._index: dict[str, tuple[int, int]] = {}
        self._memory: dict[str, bytes] = {}
        self._records = 0
        if self.path is not None:
            self._open()

    def _open(self) -> None:
        if not os.path.exists(self.path) or os.path.getsize(self.path) == 0:
            with open(self.path, "wb") as fh:
                fh.write(MAGIC)
                fh.flush()
                os.fsync(fh.fileno())
            return
        with open(self.path, "rb") as fh:
            data = fh.read()
        if not data.startswith(MAGIC):
            raise IntegrityFailure(f"{self.path} is not a keystore file")
        pos = len(MAGIC)
        while pos < len(data):
            if pos + _LEN.size > len(data):
                raise IntegrityFailure("truncated keystore record header")
            (n,) = _LEN.unpack_from(data, pos)
            start = pos + _LEN.size
            if start + n > len(data) or n < _NAME.size:
                raise IntegrityFailure("truncated keystore record")
            name = self._name_of(data[start : start + n])
            self._index[name] = (start, n)
            self._records += 1
            pos = start + n

    @staticmethod
    def _name_of(payload: bytes) -> str:
        (k,) = _NAME.unpack_from(payload, 0)
        try:
            return payload[_NAME.size : _NAME.size + k].decode("utf-8")
        except UnicodeDecodeError:
            raise IntegrityFailure("corrupt entry name") from None

    def _seal(self, name: str, secret: bytes) -> bytes:
        encoded = name.encode("utf-8")
        if not encoded or len(encoded) > 0xFFFF:
            raise SealFailure("entry name must be 1..65535 UTF-8 bytes")
        nonce = os.urandom(_NONCE)
        try:
            sealed = self._aead.encrypt(nonce, bytes(secret), encoded)
        except (OverflowError, TypeError) as exc:
            raise SealFailure(str(exc)) from None
        return _NAME.pack(len(encoded)) + encoded + nonce + sealed

    def _open_payload(self, name: str, payload: bytes) -> bytes:
        encoded = name.encode("utf-8")
        body = payload[_NAME.size + len(encoded) :]
        nonce, sealed = body[:_NONCE], body[_NONCE:]
        try:
            return self._aead.decrypt(nonce, sealed, encoded)
        except InvalidTag:
            raise IntegrityFailure(f"entry {name!r} failed authentication") from None

    def put(self, name: str, secret: bytes) -> None:
        payload = self._seal(name, secret)
        with self._lock:
            if self.path is None:
                self._memory[name] = payload
                return
            with open(self.path, "ab") as fh:
                offset = fh.tell() + _LEN.size
                fh.write(_LEN.pack(len(payload)) + payload)
                fh.flush()
                os.fsync(fh.fileno())
            self._index[name] = (offset, len(payload))
            self._records += 1

    def _payload(self, name: str) -> bytes:
        if self.path is None:
            try:
                return self._memory[name]
            except KeyError:
                raise EntryNotFound(name) from None
        try:
            offset, n = self._index[name]
        except KeyError:
            raise EntryNotFound(name) from None
        with open(self.path, "rb") as fh:
            fh.seek(offset)
            payload = fh.read(n)
        if len(payload) != n:
            raise IntegrityFailure(f"entry {name!r} truncated on disk")
        if self._name_of(payload) != name:
            raise IntegrityFailure(f"entry {name!r} name mismatch on disk")
        return payload

    def get(self, name: str) -> bytes:
        with self._lock:
            payload = self._payload(name)
        return self._open_payload(name, payload)

    def __contains__(self, name: str) -> bool:
        return name in (self._memory if self.path is None else self._index)

    def names(self) -> list[str]:
        return sorted(self._memory if self.path is None else self._index)

    def compact(self) -> None:
        """Rewrite the file keeping only the latest record per name."""
        if self.path is None:
            return
        with self._lock:
            tmp = self.path + ".tmp"
            index = {}
            with open(tmp, "wb") as out:
                out.write(MAGIC)
                for name in sorted(self._index):
                    payload = self._payload(name)
                    offset = out.tell() + _LEN.size
                    out.write(_LEN.pack(len(payload)) + payload)
                    index[name] = (offset, len(payload))
                out.flush()
                os.fsync(out.fileno())
            os.replace(tmp, self.path)
            self._index = index
            self._records = len(index)
