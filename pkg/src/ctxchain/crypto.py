"""Hashing and recoverable secp256k1 signatures.

The hash function is SHA-256 and signatures are ECDSA over secp256k1 with a
recovery id, so a signer's public key can be recovered from the signature and
the message alone.  Nonces are derived deterministically (RFC 6979) and every
signature is normalised to low-s form.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import coincurve

DIGEST_SIZE = 32
PUBKEY_SIZE = 33
ADDRESS_SIZE = 20

# secp256k1 group order
CURVE_ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
HALF_ORDER = CURVE_ORDER // 2

ZERO_DIGEST = bytes(DIGEST_SIZE)


class InvalidSeed(ValueError):
    """The seed reduces to the zero scalar."""


class RecoveryFailure(ValueError):
    """No public key satisfies the recovery equation for this signature."""


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _sha256(message: bytes) -> bytes:
    return hashlib.sha256(message).digest()


@dataclass(frozen=True)
class KeyPair:
    public: bytes  # 33-byte compressed point
    secret: bytes  # 32-byte scalar

    @property
    def address(self) -> bytes:
        return address_of(self.public)


@dataclass(frozen=True)
class RecoverableSignature:
    r: bytes
    s: bytes
    recovery_id: int

    SIZE = 65

    def __post_init__(self):
        if len(self.r) != 32 or len(self.s) != 32:
            raise ValueError("r and s must be 32 bytes each")
        if self.recovery_id not in (0, 1, 2, 3):
            raise ValueError(f"recovery id {self.recovery_id} out of range")

    def to_bytes(self) -> bytes:
        return self.r + self.s + bytes([self.recovery_id])

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RecoverableSignature":
        if len(raw) != cls.SIZE:
            raise ValueError(f"signature must be {cls.SIZE} bytes, got {len(raw)}")
        return cls(raw[:32], raw[32:64], raw[64])

    @property
    def is_low_s(self) -> bool:
        return 0 < int.from_bytes(self.s, "big") <= HALF_ORDER


# Reserved signature carried by the genesis block; never recovers.
NULL_SIGNATURE = RecoverableSignature(bytes(32), bytes(32), 0)


def keygen(seed: bytes) -> KeyPair:
    """Derive a key pair from 32 bytes of entropy (reduced modulo the group order)."""
    if len(seed) != 32:
        raise InvalidSeed("seed must be 32 bytes")
    scalar = int.from_bytes(seed, "big") % CURVE_ORDER
    if scalar == 0:
        raise InvalidSeed("seed reduces to the zero scalar")
    secret = scalar.to_bytes(32, "big")
    public = coincurve.PrivateKey(secret).public_key.format(compressed=True)
    return KeyPair(public=public, secret=secret)


def public_key(secret: bytes) -> bytes:
    return coincurve.PrivateKey(secret).public_key.format(compressed=True)


def sign(secret: bytes, message: bytes) -> RecoverableSignature:
    raw = coincurve.PrivateKey(secret).sign_recoverable(message, hasher=_sha256)
    sig = RecoverableSignature.from_bytes(raw)
    # libsecp256k1 already emits low-s; keep the check so the invariant is local
    assert sig.is_low_s
    return sig


@lru_cache(maxsize=1 << 16)
def _recover_cached(raw_sig: bytes, message: bytes) -> bytes:
    try:
        pub = coincurve.PublicKey.from_signature_and_message(raw_sig, message, hasher=_sha256)
    except Exception as exc:  # coincurve raises plain Exception/ValueError
        raise RecoveryFailure(str(exc)) from None
    return pub.format(compressed=True)


def recover(sig: RecoverableSignature, message: bytes) -> bytes:
    """Return the compressed public key under which ``sig`` verifies for ``message``."""
    if not sig.is_low_s:
        raise RecoveryFailure("signature is not in canonical low-s form")
    if int.from_bytes(sig.r, "big") == 0 or int.from_bytes(sig.r, "big") >= CURVE_ORDER:
        raise RecoveryFailure("r out of range")
    return _recover_cached(sig.to_bytes(), bytes(message))


def address_of(public: bytes) -> bytes:
    """Account address of a public key: the last 20 bytes of its digest."""
    return digest(public)[-ADDRESS_SIZE:]
