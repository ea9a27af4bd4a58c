"""Sealing, key derivation for the three erasure schemes, and signatures.

All tuple and log payloads are sealed with ChaCha20-Poly1305 (256-bit key,
96-bit nonce, 128-bit tag): authenticated encryption gives per-tuple
integrity without a separate checksum structure, and the associated data
binds each ciphertext to its claimed identity so a tuple cannot be
re-labeled under another user without detection.

Key derivation is HKDF-SHA256 (extract-then-expand). Context strings
domain-separate uses; secret parts are length-prefixed into the input key
material so that part boundaries are unambiguous and the loss of either
part of a composite key renders the output unrecoverable.

Every operation that consumes randomness accepts an injectable source so
the simulation harness can run byte-reproducibly; the default source is
the OS CSPRNG.
"""

from __future__ import annotations

import enum
import hashlib
import secrets
import struct
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AuthFailure, MaterialMismatch

RandomSource = Callable[[int], bytes]

KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16
MAX_PLAINTEXT = 16 * 1024 * 1024

CTX_TUPLE = b"sdp/v1/tuple"
CTX_LOG = b"sdp/v1/log"
CTX_SNAPSHOT = b"sdp/v1/snapshot"

_HKDF_SALT = b"sdp/v1/hkdf-extract"
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")


def default_rng(n: int) -> bytes:
    return secrets.token_bytes(n)


def digest(data: bytes) -> bytes:
    """SHA-256, the hash used for chains, measurements and sharding."""
    return hashlib.sha256(data).digest()


def lp(f: bytes) -> bytes:
    """2-byte big-endian length prefix, the package-wide field framing."""
    if len(f) > 0xFFFF:
        raise ValueError("field too long for 16-bit length prefix")
    return _U16.pack(len(f)) + f


class Scheme(enum.Enum):
    """How tuple cipher keys relate to users and purposes.

    PER_USER: one secret per user; all that user's tuples share a key.
    PER_USER_PURPOSE: one independent key per (user, purpose) pair.
    COMPOSITE: per-user and per-purpose secret parts, combined on the fly;
    destroying either part erases every tuple it contributed to.
    """

    PER_USER = 1
    PER_USER_PURPOSE = 2
    COMPOSITE = 3


@dataclass(frozen=True)
class UserSecret:
    """Per-user secret part (32 bytes), held by vault and key tables."""

    data: bytes

    def __post_init__(self):
        if len(self.data) != KEY_LEN:
            raise MaterialMismatch("user secret must be 32 bytes")


@dataclass(frozen=True)
class PurposeSecret:
    """Per-purpose secret part (32 bytes)."""

    data: bytes

    def __post_init__(self):
        if len(self.data) != KEY_LEN:
            raise MaterialMismatch("purpose secret must be 32 bytes")


def check_sym_key(key: bytes) -> bytes:
    if not isinstance(key, bytes) or len(key) != KEY_LEN:
        raise MaterialMismatch("symmetric key must be exactly 32 bytes")
    return key


def kdf(secret_parts: list[bytes], context: bytes) -> bytes:
    """Derive a 32-byte key from one or more secret parts.

    HKDF-SHA256 with a fixed extract salt; ``context`` feeds the expand
    step and must name the use (``sdp/v1/tuple``, ``sdp/v1/log``, ...).
    """
    if not secret_parts or not any(secret_parts):
        raise ValueError("kdf requires at least one non-empty secret part")
    ikm = b"".join(lp(p) for p in secret_parts)
    return HKDF(
        algorithm=hashes.SHA256(), length=KEY_LEN, salt=_HKDF_SALT, info=context
    ).derive(ikm)


def derive_tuple_key(scheme: Scheme, material, user: bytes, purpose: bytes) -> bytes:
    """Resolve the cipher key for one (user, purpose) under ``scheme``.

    Material shapes: PER_USER takes a :class:`UserSecret`;
    PER_USER_PURPOSE takes the stored 32-byte pair key (returned as-is);
    COMPOSITE takes a ``(UserSecret, PurposeSecret)`` tuple.
    """
    if scheme is Scheme.PER_USER:
        if not isinstance(material, UserSecret):
            raise MaterialMismatch("PER_USER derivation needs a UserSecret")
        return kdf([material.data], CTX_TUPLE + lp(user))
    if scheme is Scheme.PER_USER_PURPOSE:
        if isinstance(material, (UserSecret, PurposeSecret, tuple)):
            raise MaterialMismatch("PER_USER_PURPOSE stores whole pair keys")
        return check_sym_key(material)
    if scheme is Scheme.COMPOSITE:
        if (
            not isinstance(material, tuple)
            or len(material) != 2
            or not isinstance(material[0], UserSecret)
            or not isinstance(material[1], PurposeSecret)
        ):
            raise MaterialMismatch("COMPOSITE derivation needs (UserSecret, PurposeSecret)")
        return kdf(
            [material[0].data, material[1].data],
            CTX_TUPLE + lp(user) + lp(purpose),
        )
    raise MaterialMismatch(f"unknown scheme {scheme}")


@dataclass(frozen=True)
class SealedValue:
    """AEAD output: 12-byte nonce, ciphertext, 16-byte tag."""

    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def pack(self) -> bytes:
        """Persisted layout: nonce | u32 ciphertext length | ciphertext | tag."""
        return self.nonce + _U32.pack(len(self.ciphertext)) + self.ciphertext + self.tag


def unpack_sealed(data: bytes) -> SealedValue:
    """Parse the persisted layout; any malformation is an integrity failure."""
    if len(data) < NONCE_LEN + 4 + TAG_LEN:
        raise AuthFailure("sealed value truncated")
    nonce = data[:NONCE_LEN]
    (ct_len,) = _U32.unpack_from(data, NONCE_LEN)
    end = NONCE_LEN + 4 + ct_len
    if len(data) != end + TAG_LEN:
        raise AuthFailure("sealed value length mismatch")
    return SealedValue(nonce, data[NONCE_LEN + 4:end], data[end:])


# Cipher objects import key schedules on construction (~4us, the price of
# an encryption); the per-request path reuses them. Bounded so long-running
# multi-tenant processes cannot grow it without limit.
_cipher_cache: dict[bytes, ChaCha20Poly1305] = {}
_CIPHER_CACHE_MAX = 4096


def _cipher(key: bytes) -> ChaCha20Poly1305:
    c = _cipher_cache.get(key)
    if c is None:
        check_sym_key(key)
        if len(_cipher_cache) >= _CIPHER_CACHE_MAX:
            _cipher_cache.clear()
        c = _cipher_cache[key] = ChaCha20Poly1305(key)
    return c


def seal(key: bytes, aad: bytes, plaintext: bytes, rng: RandomSource = default_rng) -> SealedValue:
    """Encrypt ``plaintext`` under ``key`` with a fresh random nonce,
    authenticating (but not encrypting) ``aad``."""
    if len(plaintext) > MAX_PLAINTEXT:
        raise ValueError("plaintext exceeds 16 MiB")
    nonce = rng(NONCE_LEN)
    out = _cipher(key).encrypt(nonce, plaintext, aad)
    return SealedValue(nonce, out[:-TAG_LEN], out[-TAG_LEN:])


def seal_packed(key: bytes, aad: bytes, plaintext: bytes, rng: RandomSource = default_rng) -> bytes:
    """Like :func:`seal` but returns the persisted layout directly."""
    if len(plaintext) > MAX_PLAINTEXT:
        raise ValueError("plaintext exceeds 16 MiB")
    nonce = rng(NONCE_LEN)
    out = _cipher(key).encrypt(nonce, plaintext, aad)
    return nonce + _U32.pack(len(out) - TAG_LEN) + out


def open_sealed(key: bytes, aad: bytes, sv: SealedValue) -> bytes:
    """Decrypt and verify; raises :class:`AuthFailure` on any modification
    of ciphertext, tag, nonce or aad. This is the tuple-granularity
    integrity check."""
    try:
        return _cipher(key).decrypt(sv.nonce, sv.ciphertext + sv.tag, aad)
    except InvalidTag:
        raise AuthFailure("AEAD verification failed") from None


def open_packed(key: bytes, aad: bytes, data: bytes) -> bytes:
    """Decrypt the persisted layout without intermediate objects."""
    if len(data) < NONCE_LEN + 4 + TAG_LEN:
        raise AuthFailure("sealed value truncated")
    (ct_len,) = _U32.unpack_from(data, NONCE_LEN)
    if len(data) != NONCE_LEN + 4 + ct_len + TAG_LEN:
        raise AuthFailure("sealed value length mismatch")
    try:
        return _cipher(key).decrypt(data[:NONCE_LEN], data[NONCE_LEN + 4:], aad)
    except InvalidTag:
        raise AuthFailure("AEAD verification failed") from None


# -- signatures (Ed25519: 32-byte public keys, 64-byte signatures) ----------

def generate_keypair(rng: RandomSource = default_rng) -> tuple[bytes, bytes]:
    """Return (private, public) key bytes."""
    priv = Ed25519PrivateKey.from_private_bytes(rng(32))
    pub = priv.public_key().public_bytes_raw()
    return priv.private_bytes_raw(), pub


def sign(priv: bytes, msg: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(priv).sign(msg)


def verify(pub: bytes, msg: bytes, sig: bytes) -> bool:
    """Deterministic verify; returns False (never raises) on a bad
    signature or malformed inputs."""
    try:
        Ed25519PublicKey.from_public_bytes(pub).verify(sig, msg)
        return True
    except (InvalidSignature, ValueError):
        return False
