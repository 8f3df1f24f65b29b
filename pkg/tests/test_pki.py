import os
import random

import pytest
from cryptography import x509
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.x509.oid import ExtendedKeyUsageOID
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import Clock
from ztiam.events import EventKind, EventLog, EventStore
from ztiam.pki import (
    CertificateAuthority,
    CertStatus,
    DeviceAuthError,
    DuplicateDevice,
    EntryNotFound,
    IntegrityFailure,
    Keystore,
    MalformedKey,
    SealFailure,
    UnknownDevice,
    UnknownSerial,
    generate_master_key,
    master_key_from_env,
    verify_certificate,
)


def pub_pem(key) -> str:
    return key.public_key().public_bytes(serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo).decode()


@pytest.fixture
def ca(tmp_path):
    clock = Clock()
    store = EventStore()
    events = EventLog(store)
    ks = Keystore(generate_master_key(), tmp_path / "ks.bin")
    authority = CertificateAuthority(ks, tmp_path / "ca.json", events=events, clock=clock)
    authority.init_ca("test CA")
    yield authority, clock, events, store
    events.close()


def enroll(authority, device_id="device-1", days=365):
    key = Ed25519PrivateKey.generate()
    return key, authority.enroll_device(device_id, pub_pem(key), days)


# -- CA and certificates ---------------------------------------------------


def test_ca_certificate_shape(ca):
    authority, *_ = ca
    cert = authority.ca_certificate
    bc = cert.extensions.get_extension_for_class(x509.BasicConstraints).value
    assert bc.ca and bc.path_length == 0
    assert cert.serial_number == 1
    assert verify_certificate(cert, cert, authority.clock()) is CertStatus.VALID


def test_enrolled_certificate_is_valid(ca):
    authority, *_ = ca
    _, ident = enroll(authority)
    assert authority.verify_cert_chain(ident.certificate) is CertStatus.VALID
    eku = ident.certificate.extensions.get_extension_for_class(x509.ExtendedKeyUsage).value
    assert ExtendedKeyUsageOID.CLIENT_AUTH in eku
    assert ident.serial == 2


def test_duplicate_and_malformed(ca):
    authority, *_ = ca
    enroll(authority)
    with pytest.raises(DuplicateDevice):
        enroll(authority)
    with pytest.raises(MalformedKey):
        authority.enroll_device("d2", "not a key")
    ec_key = ec.generate_private_key(ec.SECP256R1())
    with pytest.raises(MalformedKey):
        authority.enroll_device("d3", pub_pem(ec_key))


def test_tampered_certificate_rejected(ca):
    authority, *_ = ca
    _, ident = enroll(authority)
    der = ident.certificate.public_bytes(serialization.Encoding.DER)
    forged = der.replace(b"device-1", b"device-9")
    assert forged != der
    assert authority.verify_cert_chain(x509.load_der_x509_certificate(forged)) is CertStatus.BAD_SIGNATURE


def test_expired_and_not_yet_valid(ca):
    authority, clock, *_ = ca
    _, ident = enroll(authority, days=1)
    assert authority.verify_cert_chain(ident.certificate, clock() + 2 * 86400) is CertStatus.EXPIRED
    assert authority.verify_cert_chain(ident.certificate, clock() - 3600) is CertStatus.NOT_YET_VALID


def test_foreign_certificates_rejected(ca, tmp_path):
    authority, clock, *_ = ca
    other = CertificateAuthority(Keystore(generate_master_key()), clock=clock)
    other.init_ca("other CA")
    _, foreign = enroll(other)
    assert authority.verify_cert_chain(foreign.certificate) is CertStatus.UNKNOWN_ISSUER
    # same subject name, different key
    impostor = CertificateAuthority(Keystore(generate_master_key()), clock=clock)
    impostor.init_ca("test CA")
    _, forged = enroll(impostor)
    assert authority.verify_cert_chain(forged.certificate) is CertStatus.BAD_SIGNATURE


def test_revocation(ca):
    authority, *_ = ca
    _, ident = enroll(authority)
    authority.revoke(ident.serial, "keyCompromise")
    assert authority.verify_cert_chain(ident.certificate) is CertStatus.REVOKED
    with pytest.raises(UnknownSerial):
        authority.revoke(999)
    with pytest.raises(UnknownDevice):
        authority.revoke_device("nobody")


def test_state_persists(ca, tmp_path):
    authority, clock, *_ = ca
    _, ident = enroll(authority)
    authority.revoke(ident.serial)
    again = CertificateAuthority(authority.keystore, tmp_path / "ca.json", clock=clock)
    assert again.verify_cert_chain(ident.certificate) is CertStatus.REVOKED
    _, second = enroll(again, "device-2")
    assert second.serial == 3


def test_server_certificate(ca):
    authority, *_ = ca
    key_pem, cert_pem = authority.issue_server_certificate(["localhost", "127.0.0.1"])
    cert = x509.load_pem_x509_certificate(cert_pem)
    san = cert.extensions.get_extension_for_class(x509.SubjectAlternativeName).value
    assert "localhost" in san.get_values_for_type(x509.DNSName)
    assert authority.verify_cert_chain(cert) is CertStatus.VALID
    assert b"PRIVATE KEY" in key_pem


# -- challenge-response ----------------------------------------------------


def test_challenge_success(ca):
    authority, _, events, store = ca
    key, _ = enroll(authority)
    ch = authority.create_challenge("device-1")
    session = authority.verify_challenge_response(ch.challenge_id, key.sign(ch.nonce))
    assert authority.device_session(session.token).device_id == "device-1"
    events.flush()
    assert store.count("device-1", [EventKind.DEVICE_AUTH_SUCCESS]) == 1


def test_challenge_replay_rejected(ca):
    authority, *_ = ca
    key, _ = enroll(authority)
    ch = authority.create_challenge("device-1")
    sig = key.sign(ch.nonce)
    authority.verify_challenge_response(ch.challenge_id, sig)
    with pytest.raises(DeviceAuthError) as exc:
        authority.verify_challenge_response(ch.challenge_id, sig)
    assert exc.value.code == "CHALLENGE_REUSED"


def test_failed_attempt_consumes_challenge(ca):
    authority, *_ = ca
    key, _ = enroll(authority)
    ch = authority.create_challenge("device-1")
    with pytest.raises(DeviceAuthError) as exc:
        authority.verify_challenge_response(ch.challenge_id, b"\0" * 64)
    assert exc.value.code == "BAD_SIGNATURE"
    with pytest.raises(DeviceAuthError) as exc:
        authority.verify_challenge_response(ch.challenge_id, key.sign(ch.nonce))
    assert exc.value.code == "CHALLENGE_REUSED"


def test_wrong_key_and_expiry(ca):
    authority, clock, *_ = ca
    enroll(authority)
    ch = authority.create_challenge("device-1")
    with pytest.raises(DeviceAuthError) as exc:
        authority.verify_challenge_response(ch.challenge_id, Ed25519PrivateKey.generate().sign(ch.nonce))
    assert exc.value.code == "BAD_SIGNATURE"
    key, _ = enroll(authority, "device-2")
    ch = authority.create_challenge("device-2")
    clock.advance(61)
    with pytest.raises(DeviceAuthError) as exc:
        authority.verify_challenge_response(ch.challenge_id, key.sign(ch.nonce))
    assert exc.value.code == "CHALLENGE_EXPIRED"


def test_revoked_device_cannot_authenticate(ca):
    authority, *_ = ca
    key, _ = enroll(authority)
    ch = authority.create_challenge("device-1")
    authority.revoke_device("device-1")
    with pytest.raises(DeviceAuthError) as exc:
        authority.verify_challenge_response(ch.challenge_id, key.sign(ch.nonce))
    assert exc.value.code == "DEVICE_REVOKED"
    with pytest.raises(DeviceAuthError):
        authority.create_challenge("device-1")


def test_unknown_challenge(ca):
    authority, *_ = ca
    with pytest.raises(DeviceAuthError) as exc:
        authority.verify_challenge_response("nope", b"")
    assert exc.value.code == "UNKNOWN_CHALLENGE"


# -- keystore --------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 1 << 20), st.integers(0, 2**32))
def test_keystore_round_trip_sizes(size, seed):
    rng = random.Random(seed)
    payload = rng.randbytes(size)
    ks = Keystore(generate_master_key())
    ks.put("k", payload)
    assert ks.get("k") == payload


def test_keystore_boundary_sizes(tmp_path):
    key = generate_master_key()
    ks = Keystore(key, tmp_path / "ks.bin")
    for n in (1, 1 << 20):
        data = os.urandom(n)
        ks.put(f"s{n}", data)
        assert Keystore(key, tmp_path / "ks.bin").get(f"s{n}") == data


def test_keystore_tamper_detection(tmp_path):
    rng = random.Random(11)
    key = generate_master_key()
    path = tmp_path / "ks.bin"
    for _ in range(25):
        path.unlink(missing_ok=True)
        ks = Keystore(key, path)
        ks.put("a", b"first secret")
        size_b = rng.randrange(1, 8192)
        ks.put("b", rng.randbytes(size_b))
        raw = bytearray(path.read_bytes())
        # flip one bit in the nonce, ciphertext or tag of the last record
        i = rng.randrange(len(raw) - size_b - 16 - 12, len(raw))
        raw[i] ^= 1 << rng.randrange(8)
        path.write_bytes(bytes(raw))
        reopened = Keystore(key, path)
        with pytest.raises(IntegrityFailure):
            reopened.get("b")
        assert reopened.get("a") == b"first secret"


def test_keystore_wrong_master_key(tmp_path):
    ks = Keystore(generate_master_key(), tmp_path / "ks.bin")
    ks.put("x", b"secret")
    with pytest.raises(IntegrityFailure):
        Keystore(generate_master_key(), tmp_path / "ks.bin").get("x")


def test_keystore_names_are_bound(tmp_path):
    # a record renamed on disk fails authentication (name is AAD)
    key = generate_master_key()
    path = tmp_path / "ks.bin"
    ks = Keystore(key, path)
    ks.put("aa", b"secret")
    raw = path.read_bytes().replace(b"aa", b"bb", 1)
    path.write_bytes(raw)
    with pytest.raises(IntegrityFailure):
        Keystore(key, path).get("bb")


def test_keystore_latest_wins_and_compact(tmp_path):
    key = generate_master_key()
    ks = Keystore(key, tmp_path / "ks.bin")
    ks.put("x", b"1")
    ks.put("x", b"2")
    ks.compact()
    assert Keystore(key, tmp_path / "ks.bin").get("x") == b"2"
    with pytest.raises(EntryNotFound):
        ks.get("missing")


def test_master_key_env():
    import base64

    key = generate_master_key()
    assert master_key_from_env({"ZTIAM_MASTER_KEY": base64.b64encode(key).decode()}) == key
    for bad in ({}, {"ZTIAM_MASTER_KEY": "!!"}, {"ZTIAM_MASTER_KEY": base64.b64encode(b"short").decode()}):
        with pytest.raises(SealFailure):
            master_key_from_env(bad)
