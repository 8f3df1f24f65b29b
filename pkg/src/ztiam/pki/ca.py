"""Internal certificate authority and device authentication.

CA and device keys are Ed25519. The CA private key is held only in the
:class:`~ztiam.pki.keystore.Keystore`; everything else (certificates,
serial counter, revocations, device registry) is public state, optionally
persisted as JSON next to the keystore.
"""

from __future__ import annotations

import datetime as dt
import enum
import json
import os
import secrets
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional, Union

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

from ztiam.events import EventKind, EventLog
from ztiam.pki.keystore import EntryNotFound, Keystore

CA_KEY_ENTRY = "pki/ca-key"
CHALLENGE_TTL = 60.0
DEVICE_SESSION_TTL = 3600.0


class PkiError(Exception):
    code = "PKI_ERROR"


class CaExists(PkiError):
    code = "CA_EXISTS"


class CaMissing(PkiError):
    code = "CA_MISSING"


class DuplicateDevice(PkiError):
    code = "DUPLICATE_DEVICE"


class MalformedKey(PkiError):
    code = "MALFORMED_KEY"


class UnknownDevice(PkiError):
    code = "UNKNOWN_DEVICE"


class UnknownSerial(PkiError):
    code = "UNKNOWN_SERIAL"


class DeviceAuthError(PkiError):
    """Challenge-response failure; ``code`` names the reason."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(message or code)


class CertStatus(str, enum.Enum):
    VALID = "Valid"
    UNKNOWN_ISSUER = "UnknownIssuer"
    EXPIRED = "Expired"
    NOT_YET_VALID = "NotYetValid"
    REVOKED = "Revoked"
    BAD_SIGNATURE = "BadSignature"
    MALFORMED_SUBJECT = "MalformedSubject"


class DeviceStatus(str, enum.Enum):
    ACTIVE = "Active"
    REVOKED = "Revoked"


@dataclass(frozen=True)
class DeviceIdentity:
    device_id: str
    certificate: x509.Certificate
    enrolled_at: float
    status: DeviceStatus = DeviceStatus.ACTIVE

    @property
    def serial(self) -> int:
        return self.certificate.serial_number

    @property
    def public_key(self) -> Ed25519PublicKey:
        return self.certificate.public_key()

    def certificate_pem(self) -> str:
        return self.certificate.public_bytes(serialization.Encoding.PEM).decode("ascii")


@dataclass
class ChallengeRecord:
    challenge_id: str
    device_id: str
    nonce: bytes
    issued_at: float
    expires_at: float
    used: bool = False


@dataclass(frozen=True)
class DeviceSession:
    device_id: str
    token: str
    issued_at: float
    expires_at: float


def _utc(ts: float) -> dt.datetime:
    return dt.datetime.fromtimestamp(ts, tz=dt.timezone.utc)


def load_public_key(key: Union[Ed25519PublicKey, bytes, str]) -> Ed25519PublicKey:
    if isinstance(key, Ed25519PublicKey):
        return key
    data = key.encode("ascii") if isinstance(key, str) else key
    try:
        loaded = serialization.load_pem_public_key(data)
    except (ValueError, TypeError) as exc:
        raise MalformedKey(f"cannot parse public key: {exc}") from None
    if not isinstance(loaded, Ed25519PublicKey):
        raise MalformedKey("device keys must be Ed25519")
    return loaded


def load_certificate(cert: Union[x509.Certificate, bytes, str]) -> x509.Certificate:
    if isinstance(cert, x509.Certificate):
        return cert
    data = cert.encode("ascii") if isinstance(cert, str) else cert
    return x509.load_pem_x509_certificate(data)


def public_key_pem(key: Ed25519PublicKey) -> str:
    return key.public_bytes(serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo).decode("ascii")


def verify_certificate(cert, ca_cert, now: Optional[float] = None, revoked=()) -> CertStatus:
    """Check ``cert`` against a single trusted issuer, offline."""
    cert = load_certificate(cert)
    ca_cert = load_certificate(ca_cert)
    now = time.time() if now is None else now
    if cert.issuer != ca_cert.subject:
        return CertStatus.UNKNOWN_ISSUER
    try:
        ca_cert.public_key().verify(cert.signature, cert.tbs_certificate_bytes)
    except (InvalidSignature, TypeError):
        return CertStatus.BAD_SIGNATURE
    if cert.serial_number in revoked:
        return CertStatus.REVOKED
    t = _utc(now)
    if t < cert.not_valid_before_utc:
        return CertStatus.NOT_YET_VALID
    if t > cert.not_valid_after_utc:
        return CertStatus.EXPIRED
    cns = cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
    if len(cns) != 1 or not cns[0].value:
        return CertStatus.MALFORMED_SUBJECT
    return CertStatus.VALID


class CertificateAuthority:
    def __init__(
        self,
        keystore: Keystore,
        state_path: Optional[str | os.PathLike] = None,
        *,
        events: Optional[EventLog] = None,
        clock: Callable[[], float] = time.time,
    ):
        self.keystore = keystore
        self.state_path = None if state_path is None else os.fspath(state_path)
        self.events = events
        self.clock = clock
        self._lock = threading.RLock()
        self.ca_certificate: Optional[x509.Certificate] = None
        self.serial_counter = 0
        self.revoked: dict[int, float] = {}
        self.devices: dict[str, DeviceIdentity] = {}
        self._challenges: dict[str, ChallengeRecord] = {}
        self._sessions: dict[str, DeviceSession] = {}
        if self.state_path is not None and os.path.exists(self.state_path):
            self._load()

    # -- persistence -------------------------------------------------------

    def _load(self) -> None:
        with open(self.state_path, encoding="utf-8") as fh:
            state = json.load(fh)
        self.ca_certificate = load_certificate(state["ca_certificate"])
        self.serial_counter = state["serial_counter"]
        self.revoked = {int(k): v for k, v in state["revoked"].items()}
        for d in state["devices"]:
            cert = load_certificate(d["certificate"])
            status = DeviceStatus.REVOKED if cert.serial_number in self.revoked else DeviceStatus.ACTIVE
            self.devices[d["device_id"]] = DeviceIdentity(d["device_id"], cert, d["enrolled_at"], status)

    def _save(self) -> None:
        if self.state_path is None:
            return
        state = {
            "ca_certificate": self.ca_certificate.public_bytes(serialization.Encoding.PEM).decode("ascii"),
            "serial_counter": self.serial_counter,
            "revoked": {str(k): v for k, v in sorted(self.revoked.items())},
            "devices": [
                {"device_id": d.device_id, "certificate": d.certificate_pem(), "enrolled_at": d.enrolled_at}
                for d in self.devices.values()
            ],
        }
        tmp = self.state_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(state, fh, indent=1)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.state_path)

    # -- CA ----------------------------------------------------------------

    def _ca_key(self) -> Ed25519PrivateKey:
        try:
            raw = self.keystore.get(CA_KEY_ENTRY)
        except EntryNotFound:
            raise CaMissing("no CA key in the keystore; run init_ca first") from None
        return Ed25519PrivateKey.from_private_bytes(raw)

    def _next_serial(self) -> int:
        self.serial_counter += 1
        return self.serial_counter

    def init_ca(self, subject_name: str = "ztiam internal CA", validity_years: int = 10, *, overwrite: bool = False) -> x509.Certificate:
        with self._lock:
            if CA_KEY_ENTRY in self.keystore and not overwrite:
                raise CaExists("a CA already exists in the keystore")
            key = Ed25519PrivateKey.generate()
            now = self.clock()
            name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, subject_name)])
            cert = (
                x509.CertificateBuilder()
                .subject_name(name)
                .issuer_name(name)
                .public_key(key.public_key())
                .serial_number(self._next_serial())
                .not_valid_before(_utc(now - 60))
                .not_valid_after(_utc(now + validity_years * 365.25 * 86400))
                .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
                .add_extension(
                    x509.KeyUsage(
                        digital_signature=True, content_commitment=False, key_encipherment=False,
                        data_encipherment=False, key_agreement=False, key_cert_sign=True, crl_sign=True,
                        encipher_only=False, decipher_only=False,
                    ),
                    critical=True,
                )
                .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
                .sign(key, None)
            )
            self.keystore.put(
                CA_KEY_ENTRY,
                key.private_bytes(serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()),
            )
            self.ca_certificate = cert
            if overwrite:
                self.devices.clear()
                self.revoked.clear()
            self._save()
            return cert

    def ca_pem(self) -> str:
        self._require_ca()
        return self.ca_certificate.public_bytes(serialization.Encoding.PEM).decode("ascii")

    def _require_ca(self) -> None:
        if self.ca_certificate is None:
            raise CaMissing("CA not initialised")

    def _issue(self, subject: x509.Name, public_key, validity_days: float, extensions) -> x509.Certificate:
        self._require_ca()
        now = self.clock()
        builder = (
            x509.CertificateBuilder()
            .subject_name(subject)
            .issuer_name(self.ca_certificate.subject)
            .public_key(public_key)
            .serial_number(self._next_serial())
            .not_valid_before(_utc(now - 60))
            .not_valid_after(_utc(now + validity_days * 86400))
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .add_extension(
                x509.AuthorityKeyIdentifier.from_issuer_public_key(self.ca_certificate.public_key()), critical=False
            )
        )
        for ext, critical in extensions:
            builder = builder.add_extension(ext, critical=critical)
        return builder.sign(self._ca_key(), None)

    def enroll_device(self, device_id: str, public_key, validity_days: float = 365) -> DeviceIdentity:
        if not device_id or not isinstance(device_id, str):
            raise MalformedKey("device_id must be a non-empty string")
        key = load_public_key(public_key)
        with self._lock:
            if device_id in self.devices:
                raise DuplicateDevice(f"device {device_id!r} already enrolled")
            cert = self._issue(
                x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, device_id)]),
                key,
                validity_days,
                [
                    (
                        x509.KeyUsage(
                            digital_signature=True, content_commitment=False, key_encipherment=False,
                            data_encipherment=False, key_agreement=False, key_cert_sign=False, crl_sign=False,
                            encipher_only=False, decipher_only=False,
                        ),
                        True,
                    ),
                    (x509.ExtendedKeyUsage([ExtendedKeyUsageOID.CLIENT_AUTH]), False),
                ],
            )
            identity = DeviceIdentity(device_id, cert, self.clock())
            self.devices[device_id] = identity
            self._save()
        if self.events is not None:
            self.events.record(EventKind.DEVICE_ENROLLED, device_id, detail={"serial": str(cert.serial_number)})
        return identity

    def issue_server_certificate(self, hostnames: list[str], validity_days: float = 365) -> tuple[bytes, bytes]:
        """Key and certificate (both PEM) for the gateway's TLS listener."""
        import ipaddress

        key = Ed25519PrivateKey.generate()
        sans: list[x509.GeneralName] = []
        for h in hostnames:
            try:
                sans.append(x509.IPAddress(ipaddress.ip_address(h)))
            except ValueError:
                sans.append(x509.DNSName(h))
        with self._lock:
            cert = self._issue(
                x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, hostnames[0])]),
                key.public_key(),
                validity_days,
                [
                    (x509.SubjectAlternativeName(sans), False),
                    (x509.ExtendedKeyUsage([ExtendedKeyUsageOID.SERVER_AUTH]), False),
                ],
            )
            self._save()
        key_pem = key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption())
        return key_pem, cert.public_bytes(serialization.Encoding.PEM)

    # -- verification ------------------------------------------------------

    def verify_cert_chain(self, cert, now: Optional[float] = None) -> CertStatus:
        self._require_ca()
        now = self.clock() if now is None else now
        return verify_certificate(cert, self.ca_certificate, now, self.revoked)

    def revoke(self, serial: int, reason: str = "unspecified") -> None:
        with self._lock:
            if not 0 < serial <= self.serial_counter:
                raise UnknownSerial(f"serial {serial} was never issued")
            self.revoked.setdefault(serial, self.clock())
            for did, d in self.devices.items():
                if d.serial == serial:
                    self.devices[did] = DeviceIdentity(d.device_id, d.certificate, d.enrolled_at, DeviceStatus.REVOKED)
            self._save()

    def revoke_device(self, device_id: str, reason: str = "unspecified") -> None:
        try:
            serial = self.devices[device_id].serial
        except KeyError:
            raise UnknownDevice(device_id) from None
        self.revoke(serial, reason)

    # -- challenge-response ------------------------------------------------

    def create_challenge(self, device_id: str) -> ChallengeRecord:
        with self._lock:
            device = self.devices.get(device_id)
            if device is None:
                raise UnknownDevice(f"device {device_id!r} is not enrolled")
            if device.status is DeviceStatus.REVOKED:
                raise DeviceAuthError("DEVICE_REVOKED", f"device {device_id!r} is revoked")
            now = self.clock()
            rec = ChallengeRecord(secrets.token_urlsafe(16), device_id, secrets.token_bytes(32), now, now + CHALLENGE_TTL)
            self._challenges[rec.challenge_id] = rec
            return rec

    def verify_challenge_response(self, challenge_id: str, signature: bytes) -> DeviceSession:
        device_id = None
        try:
            with self._lock:
                rec = self._challenges.get(challenge_id)
                if rec is None:
                    raise DeviceAuthError("UNKNOWN_CHALLENGE")
                device_id = rec.device_id
                if rec.used:
                    raise DeviceAuthError("CHALLENGE_REUSED")
                # consumed by the first attempt, whatever its outcome
                rec.used = True
            now = self.clock()
            if now > rec.expires_at:
                raise DeviceAuthError("CHALLENGE_EXPIRED")
            device = self.devices[rec.device_id]
            status = self.verify_cert_chain(device.certificate, now)
            if status is CertStatus.REVOKED:
                raise DeviceAuthError("DEVICE_REVOKED")
            if status is not CertStatus.VALID:
                raise DeviceAuthError(f"CERT_{status.name}")
            try:
                device.public_key.verify(signature, rec.nonce)
            except InvalidSignature:
                raise DeviceAuthError("BAD_SIGNATURE") from None
            session = DeviceSession(device.device_id, secrets.token_urlsafe(32), now, now + DEVICE_SESSION_TTL)
            with self._lock:
                self._sessions[session.token] = session
        except DeviceAuthError as exc:
            if self.events is not None:
                self.events.record(
                    EventKind.DEVICE_AUTH_FAILURE, device_id or f"challenge:{challenge_id}", detail={"reason": exc.code}
                )
            raise
        if self.events is not None:
            self.events.record(EventKind.DEVICE_AUTH_SUCCESS, session.device_id)
        return session

    def device_session(self, token: str) -> Optional[DeviceSession]:
        with self._lock:
            s = self._sessions.get(token)
        if s is None or self.clock() > s.expires_at:
            return None
        return s
