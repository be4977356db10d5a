"""Hashing, Ed25519 signatures and hybrid envelope encryption.

One 32-byte keypair type serves both purposes: the Ed25519 key signs, and
its birationally-equivalent X25519 key receives envelopes. That lets the
data key (``PK_data``) sign key-update transactions and still be the
recipient of every encrypted log.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

DIGEST_SIZE = 32
KEY_SIZE = 32
SIGNATURE_SIZE = 64
NONCE_SIZE = 12
TAG_SIZE = 16
WRAPPED_KEY_SIZE = KEY_SIZE + NONCE_SIZE + KEY_SIZE + TAG_SIZE
MAX_PLAINTEXT = 1 << 20

_P = 2**255 - 19
_RAW = serialization.Encoding.Raw

Entropy = Callable[[int], bytes]


class CryptoError(Exception):
    pass


class MalformedKeyError(CryptoError, ValueError):
    """Key or signature material has the wrong length or encoding."""


class AuthenticationError(CryptoError):
    """Authenticated decryption failed: wrong key or tampered envelope."""


class MalformedEnvelopeError(CryptoError, ValueError):
    pass


def hash_bytes(data: bytes) -> bytes:
    """SHA-256 digest of ``data``."""
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    secret: bytes

    def __repr__(self) -> str:
        return f"KeyPair(public={self.public.hex()[:16]}...)"


def _check_len(value: bytes, size: int, what: str) -> None:
    if not isinstance(value, (bytes, bytearray)) or len(value) != size:
        got = len(value) if isinstance(value, (bytes, bytearray)) else type(value).__name__
        raise MalformedKeyError(f"{what} must be {size} bytes, got {got}")


def public_key_of(secret: bytes) -> bytes:
    _check_len(secret, KEY_SIZE, "secret key")
    sk = Ed25519PrivateKey.from_private_bytes(bytes(secret))
    return sk.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw)


def generate_keypair(seed: Optional[bytes] = None) -> KeyPair:
    """Make a keypair; a 32-byte ``seed`` makes it reproducible."""
    if seed is None:
        seed = os.urandom(KEY_SIZE)
    elif len(seed) != KEY_SIZE:
        raise MalformedKeyError(f"seed must be {KEY_SIZE} bytes, got {len(seed)}")
    seed = bytes(seed)
    return KeyPair(public=public_key_of(seed), secret=seed)


def sign(secret: bytes, message: bytes) -> bytes:
    _check_len(secret, KEY_SIZE, "secret key")
    return Ed25519PrivateKey.from_private_bytes(bytes(secret)).sign(bytes(message))


@lru_cache(maxsize=1 << 16)
def _verify_cached(public: bytes, message: bytes, sig: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(sig, message)
    except InvalidSignature:
        return False
    except ValueError:
        # not a valid curve point
        return False
    return True


def verify(public: bytes, message: bytes, sig: bytes) -> bool:
    """True iff ``sig`` is a valid signature of ``message`` under ``public``.

    Raises MalformedKeyError for wrong-length key or signature material, so
    malformed input is distinguishable from a failed check.
    """
    _check_len(public, KEY_SIZE, "public key")
    _check_len(sig, SIGNATURE_SIZE, "signature")
    return _verify_cached(bytes(public), bytes(message), bytes(sig))


# -- Ed25519 -> X25519 ---------------------------------------------------------

def _x25519_public(ed_public: bytes) -> bytes:
    y = int.from_bytes(ed_public, "little") & ((1 << 255) - 1)
    if y >= _P or (1 - y) % _P == 0:
        raise MalformedKeyError("public key is not convertible to X25519")
    u = (1 + y) * pow(1 - y, _P - 2, _P) % _P
    return u.to_bytes(KEY_SIZE, "little")


def _x25519_secret(ed_secret: bytes) -> X25519PrivateKey:
    # X25519 clamps the scalar itself
    return X25519PrivateKey.from_private_bytes(hashlib.sha512(ed_secret).digest()[:32])


# -- envelopes -----------------------------------------------------------------

@dataclass(frozen=True)
class Envelope:
    wrapped_key: bytes
    nonce: bytes
    ciphertext: bytes
    auth_tag: bytes

    def to_bytes(self) -> bytes:
        return self.wrapped_key + self.nonce + self.auth_tag + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        head = WRAPPED_KEY_SIZE + NONCE_SIZE + TAG_SIZE
        if len(data) < head:
            raise MalformedEnvelopeError(f"envelope truncated: {len(data)} < {head} bytes")
        wk = data[:WRAPPED_KEY_SIZE]
        nonce = data[WRAPPED_KEY_SIZE:WRAPPED_KEY_SIZE + NONCE_SIZE]
        tag = data[WRAPPED_KEY_SIZE + NONCE_SIZE:head]
        return cls(bytes(wk), bytes(nonce), bytes(data[head:]), bytes(tag))


def _kek(shared: bytes, eph_public: bytes, recipient: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=KEY_SIZE,
        salt=None,
        info=b"icschain/envelope-wrap/v1" + eph_public + recipient,
    ).derive(shared)


def envelope_encrypt(
    pk_data: bytes,
    plaintext: bytes,
    entropy: Optional[Entropy] = None,
    max_size: int = MAX_PLAINTEXT,
) -> Envelope:
    """Encrypt under a fresh data key, wrapped for the holder of ``pk_data``.

    ``entropy`` defaults to ``os.urandom``; simulations pass a seeded stream.
    """
    _check_len(pk_data, KEY_SIZE, "public key")
    if len(plaintext) > max_size:
        raise ValueError(f"plaintext of {len(plaintext)} bytes exceeds {max_size}")
    rand = entropy or os.urandom
    recipient = _x25519_public(bytes(pk_data))
    eph = X25519PrivateKey.from_private_bytes(rand(KEY_SIZE))
    eph_public = eph.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw)
    try:
        shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient))
    except ValueError as e:
        raise MalformedKeyError(f"unusable recipient key: {e}") from e
    dek = rand(KEY_SIZE)
    wrap_nonce = rand(NONCE_SIZE)
    wrapped = AESGCM(_kek(shared, eph_public, recipient)).encrypt(wrap_nonce, dek, None)
    wrapped_key = eph_public + wrap_nonce + wrapped
    nonce = rand(NONCE_SIZE)
    sealed = AESGCM(dek).encrypt(nonce, bytes(plaintext), wrapped_key)
    return Envelope(wrapped_key, nonce, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:])


def envelope_decrypt(sk_data: bytes, env: Envelope) -> bytes:
    _check_len(sk_data, KEY_SIZE, "secret key")
    if (
        len(env.wrapped_key) != WRAPPED_KEY_SIZE
        or len(env.nonce) != NONCE_SIZE
        or len(env.auth_tag) != TAG_SIZE
    ):
        raise MalformedEnvelopeError("envelope fields have wrong lengths")
    eph_public = env.wrapped_key[:KEY_SIZE]
    wrap_nonce = env.wrapped_key[KEY_SIZE:KEY_SIZE + NONCE_SIZE]
    wrapped = env.wrapped_key[KEY_SIZE + NONCE_SIZE:]
    xsk = _x25519_secret(bytes(sk_data))
    recipient = xsk.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw)
    try:
        shared = xsk.exchange(X25519PublicKey.from_public_bytes(eph_public))
        dek = AESGCM(_kek(shared, eph_public, recipient)).decrypt(wrap_nonce, wrapped, None)
        return AESGCM(dek).decrypt(env.nonce, env.ciphertext + env.auth_tag, env.wrapped_key)
    except (InvalidTag, ValueError) as e:
        raise AuthenticationError("envelope authentication failed") from e


class DeterministicEntropy:
    """Seeded byte stream (SHAKE-256 in counter mode) for reproducible runs."""

    def __init__(self, seed: bytes):
        self._seed = bytes(seed)
        self._counter = 0

    def __call__(self, n: int) -> bytes:
        out = hashlib.shake_256(self._seed + self._counter.to_bytes(8, "big")).digest(n)
        self._counter += 1
        return out


def derive_seed(*parts: object) -> bytes:
    """32-byte seed derived from arbitrary labelled parts."""
    h = hashlib.sha256(b"icschain/seed")
    for p in parts:
        b = p if isinstance(p, bytes) else str(p).encode()
        h.update(len(b).to_bytes(4, "big") + b)
    return h.digest()


# -- key files -----------------------------------------------------------------

def write_key_file(path: str | Path, kind: str, value: bytes) -> None:
    if kind not in ("pk", "sk"):
        raise ValueError(f"key kind must be 'pk' or 'sk', not {kind!r}")
    _check_len(value, KEY_SIZE, "key")
    Path(path).write_text(f"{kind}\n{value.hex()}\n")


def read_key_file(path: str | Path) -> tuple[str, bytes]:
    lines = Path(path).read_text().split()
    if len(lines) != 2 or lines[0] not in ("pk", "sk"):
        raise MalformedKeyError(f"{path}: expected a 'pk'/'sk' header and one hex value")
    try:
        value = bytes.fromhex(lines[1])
    except ValueError as e:
        raise MalformedKeyError(f"{path}: bad hex") from e
    _check_len(value, KEY_SIZE, "key")
    return lines[0], value
