"""Deterministic cryptographic primitives shared by all protocol entities.

Every identifier in the system is derived from a single 256-bit hash
(SHA-256) so that planner, base stations, rendezvous points, and handsets
agree bit-exactly on the same values:

    key K       ->  region id  = H(K)        mailbox lookup handle
    region id r ->  shard id   = H(r) mod N  which rendezvous point holds r

Per-slot keys come from a counter-mode PRF: HMAC-SHA256 over the fixed-width
big-endian encoding of (level, slot index), keyed with a 32-byte seed.  This
gives O(1) random access to the key of any past slot, which the planner needs
when reconstructing keys for old time windows.

All types are immutable values and all functions are pure, so everything in
this module is safe to call concurrently.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

DIGEST_SIZE = 32
KEY_SIZE = 32
SEED_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16


class AuthFailure(Exception):
    """Decryption failed: wrong key, wrong associated data, or tampering.

    The three causes are indistinguishable by design.
    """


def _check_length(name: str, value: bytes, expected: int) -> None:
    if not isinstance(value, (bytes, bytearray)):
        raise TypeError(f"{name} must be bytes, got {type(value).__name__}")
    if len(value) != expected:
        raise ValueError(f"{name} must be {expected} bytes, got {len(value)}")


@dataclass(frozen=True)
class Digest:
    """32-byte hash output; equality is byte-wise."""

    bytes: bytes

    def __post_init__(self) -> None:
        _check_length("digest", self.bytes, DIGEST_SIZE)

    def hex(self) -> str:
        return self.bytes.hex()


@dataclass(frozen=True)
class Key:
    """32-byte symmetric key."""

    bytes: bytes

    def __post_init__(self) -> None:
        _check_length("key", self.bytes, KEY_SIZE)

    def hex(self) -> str:
        return self.bytes.hex()


@dataclass(frozen=True)
class Seed:
    """32-byte random seed from which per-slot keys are derived."""

    bytes: bytes

    def __post_init__(self) -> None:
        _check_length("seed", self.bytes, SEED_SIZE)

    @classmethod
    def from_hex(cls, text: str) -> "Seed":
        return cls(bytes.fromhex(text))


@dataclass(frozen=True)
class RegionId:
    """Mailbox lookup handle for one key: the hash of the key bytes.

    Reveals neither the key nor the region it stands for.
    """

    digest: Digest


@dataclass(frozen=True)
class RpId:
    """Shard selector for a region id: the hash of the region id bytes."""

    digest: Digest


@dataclass(frozen=True)
class Ciphertext:
    """AES-256-GCM output split into its wire components."""

    nonce: bytes
    body: bytes
    tag: bytes

    def __post_init__(self) -> None:
        _check_length("nonce", self.nonce, NONCE_SIZE)
        _check_length("tag", self.tag, TAG_SIZE)


def hash_bytes(data: bytes) -> Digest:
    """SHA-256 of ``data``; the one hash used everywhere in the system."""
    return Digest(hashlib.sha256(data).digest())


def derive_key(seed: Seed, level: int, slot_index: int) -> Key:
    """Key for one (level, slot) pair: HMAC-SHA256(seed, BE32(level) || BE64(slot)).

    Deterministic, and any (level, slot) is reachable directly without
    stepping a generator through earlier slots.
    """
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    if slot_index < 0:
        raise ValueError(f"slot_index must be >= 0, got {slot_index}")
    counter = struct.pack(">IQ", level, slot_index)
    return Key(hmac.new(seed.bytes, counter, hashlib.sha256).digest())


def region_id(key: Key) -> RegionId:
    """Region identifier for a key: H(key bytes)."""
    return RegionId(hash_bytes(key.bytes))


def rp_id(region: RegionId) -> RpId:
    """Rendezvous-point identifier for a region: H(region bytes)."""
    return RpId(hash_bytes(region.digest.bytes))


def rp_index(region: RegionId, num_rps: int) -> int:
    """Shard in [0, num_rps) responsible for a region.

    The full 32-byte rp id is read as a big-endian unsigned integer and
    reduced modulo ``num_rps``, so every entity lands on the same shard.
    """
    if num_rps < 1:
        raise ValueError(f"num_rps must be >= 1, got {num_rps}")
    return int.from_bytes(rp_id(region).digest.bytes, "big") % num_rps


class NonceCounter:
    """Monotone 96-bit nonce source for one sender.

    Guarantees nonce uniqueness without coordination as long as each sending
    entity owns its own counter.  Not meant to be shared across threads.
    """

    def __init__(self, start: int = 0):
        if start < 0:
            raise ValueError("start must be >= 0")
        self._next = start

    def next(self) -> bytes:
        value = self._next
        self._next += 1
        return value.to_bytes(NONCE_SIZE, "big")


def encrypt(key: Key, plaintext: bytes, associated_data: bytes, nonce: bytes | None = None) -> Ciphertext:
    """AES-256-GCM encryption.

    The caller must guarantee nonce uniqueness per key (use a
    :class:`NonceCounter` or pass ``None`` for a random 96-bit nonce).
    """
    if nonce is None:
        nonce = os.urandom(NONCE_SIZE)
    _check_length("nonce", nonce, NONCE_SIZE)
    blob = AESGCM(key.bytes).encrypt(nonce, plaintext, associated_data)
    return Ciphertext(nonce=nonce, body=blob[:-TAG_SIZE], tag=blob[-TAG_SIZE:])


def decrypt(key: Key, ct: Ciphertext, associated_data: bytes) -> bytes:
    """Inverse of :func:`encrypt`; raises :class:`AuthFailure` on any mismatch."""
    try:
        return AESGCM(key.bytes).decrypt(ct.nonce, ct.body + ct.tag, associated_data)
    except InvalidTag as exc:
        raise AuthFailure("ciphertext did not authenticate") from exc
