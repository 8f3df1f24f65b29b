"""Device identity: internal CA, challenge-response authentication, sealed keystore."""

from ztiam.pki.ca import (
    CaExists,
    CertificateAuthority,
    CertStatus,
    ChallengeRecord,
    DeviceAuthError,
    DeviceIdentity,
    DeviceSession,
    DeviceStatus,
    DuplicateDevice,
    MalformedKey,
    PkiError,
    UnknownDevice,
    UnknownSerial,
    verify_certificate,
)
from ztiam.pki.keystore import (
    EntryNotFound,
    IntegrityFailure,
    Keystore,
    SealFailure,
    generate_master_key,
    master_key_from_env,
)

__all__ = [
    "CaExists", "CertStatus", "CertificateAuthority", "ChallengeRecord", "DeviceAuthError",
    "DeviceIdentity", "DeviceSession", "DeviceStatus", "DuplicateDevice", "EntryNotFound",
    "IntegrityFailure", "Keystore", "MalformedKey", "PkiError", "SealFailure", "UnknownDevice",
    "UnknownSerial", "generate_master_key", "master_key_from_env",
    "verify_certificate",
]
