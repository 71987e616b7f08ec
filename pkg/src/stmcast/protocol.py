"""The four protocol entities and the messages they exchange.

* ``SeedTable`` / ``TrustedPlanner`` plan per-cell seeds and, on behalf of
  senders, reconstruct keys for past slots to encrypt and deposit messages.
* ``BaseStation`` issues tokens to handsets in its cell, at slot ticks and on
  cell entry.
* ``RendezvousPoint`` is a mailbox shard: it stores ciphertexts under opaque
  region identifiers and answers polls.  It never sees coordinates, cell ids,
  or keys.
* ``UserEquipment`` keeps a trail of received tokens, polls the shards its
  keys map to, and decrypts what comes back.

Entity state is single-owner mutable; entities only exchange immutable
message values, so distinct entities may run on distinct threads behind a
serializing channel.  Message types carry a canonical byte serialization
(length-prefixed fields, big-endian integers, IEEE-754 big-endian doubles)
so independent implementations agree bit-exactly on the wire.
"""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import Callable

from .crypto import (
    AuthFailure,
    Ciphertext,
    Digest,
    Key,
    NonceCounter,
    RegionId,
    Seed,
    decrypt,
    derive_key,
    encrypt,
    region_id,
    rp_index,
)
from .tokens import (
    MissingSeedError,
    Token,
    TokenEntry,
    TokenHierarchy,
    TokenTrail,
    current_level,
    make_token,
    poll_targets,
    slot_index,
    slot_start,
)
from .topology import CellMap, Clustering, Rect, cells_overlapping


class AddressingFailure(Exception):
    """A deposit could not be mapped to any usable key.

    Raised when the area overlaps no cell, or when every matching token has
    already gone stale.  Surfaced to the sender rather than silently dropped.
    """


class DepositRejected(Exception):
    """The sender authorization hook declined the deposit."""


class ConfigurationError(ValueError):
    """Seed table or clustering does not cover the configured hierarchy."""


class WireError(ValueError):
    """A serialized message is malformed."""


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

_TAG_DEPOSIT_REQUEST = 0x01
_TAG_STORED_MESSAGE = 0x02
_TAG_POLL_REQUEST = 0x03
_TAG_POLL_RESPONSE = 0x04
_TAG_TOKEN = 0x05


def _pack_lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise WireError("truncated message")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack(">q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack(">d", self.take(8))[0]

    def lp(self) -> bytes:
        return self.take(self.u32())

    def expect_tag(self, tag: int) -> None:
        got = self.take(1)[0]
        if got != tag:
            raise WireError(f"unexpected message tag 0x{got:02x}")

    def finish(self) -> None:
        if self._pos != len(self._data):
            raise WireError("trailing bytes after message")


def _pack_ciphertext(ct: Ciphertext) -> bytes:
    return _pack_lp(ct.nonce) + _pack_lp(ct.body) + _pack_lp(ct.tag)


def _read_ciphertext(r: _Reader) -> Ciphertext:
    return Ciphertext(nonce=r.lp(), body=r.lp(), tag=r.lp())


@dataclass(frozen=True)
class DepositRequest:
    """Sender's description of the destination: an area, a past time window,
    and the payload to deliver there."""

    area: Rect
    window_start_s: float
    window_end_s: float
    payload: bytes
    sender_id: bytes = b""

    def __post_init__(self) -> None:
        if not self.window_start_s < self.window_end_s:
            raise ValueError("time window must have positive length")
        if not self.payload:
            raise ValueError("payload must be non-empty")

    def to_bytes(self) -> bytes:
        return (
            bytes([_TAG_DEPOSIT_REQUEST])
            + struct.pack(
                ">dddddd",
                self.area.x_min,
                self.area.y_min,
                self.area.x_max,
                self.area.y_max,
                self.window_start_s,
                self.window_end_s,
            )
            + _pack_lp(self.payload)
            + _pack_lp(self.sender_id)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "DepositRequest":
        r = _Reader(data)
        r.expect_tag(_TAG_DEPOSIT_REQUEST)
        x0, y0, x1, y1, a, b = (r.f64() for _ in range(6))
        payload = r.lp()
        sender = r.lp()
        r.finish()
        return cls(Rect(x0, y0, x1, y1), a, b, payload, sender)


@dataclass(frozen=True)
class StoredMessage:
    """One encrypted copy held at a rendezvous point, filed under its region id."""

    region: RegionId
    ct: Ciphertext
    deposited_at_s: float
    expires_at_s: float

    def __post_init__(self) -> None:
        if not self.deposited_at_s < self.expires_at_s:
            raise ValueError("message must expire after deposit")

    def to_bytes(self) -> bytes:
        return (
            bytes([_TAG_STORED_MESSAGE])
            + _pack_lp(self.region.digest.bytes)
            + _pack_ciphertext(self.ct)
            + struct.pack(">dd", self.deposited_at_s, self.expires_at_s)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "StoredMessage":
        r = _Reader(data)
        r.expect_tag(_TAG_STORED_MESSAGE)
        region = RegionId(_digest_from(r.lp()))
        ct = _read_ciphertext(r)
        deposited = r.f64()
        expires = r.f64()
        r.finish()
        return cls(region, ct, deposited, expires)


@dataclass(frozen=True)
class PollRequest:
    region: RegionId

    def to_bytes(self) -> bytes:
        return bytes([_TAG_POLL_REQUEST]) + _pack_lp(self.region.digest.bytes)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PollRequest":
        r = _Reader(data)
        r.expect_tag(_TAG_POLL_REQUEST)
        region = RegionId(_digest_from(r.lp()))
        r.finish()
        return cls(region)


@dataclass(frozen=True)
class PollResponse:
    """Everything a shard currently holds for one region; may be empty."""

    messages: tuple[Ciphertext, ...]

    def to_bytes(self) -> bytes:
        out = [bytes([_TAG_POLL_RESPONSE]), struct.pack(">I", len(self.messages))]
        out.extend(_pack_ciphertext(ct) for ct in self.messages)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PollResponse":
        r = _Reader(data)
        r.expect_tag(_TAG_POLL_RESPONSE)
        count = r.u32()
        messages = tuple(_read_ciphertext(r) for _ in range(count))
        r.finish()
        return cls(messages)


def _digest_from(raw: bytes) -> Digest:
    if len(raw) != 32:
        raise WireError("region digest must be 32 bytes")
    return Digest(raw)


def token_to_bytes(token: Token) -> bytes:
    out = [
        bytes([_TAG_TOKEN]),
        struct.pack(">qd", token.cell_id, token.announce_time_s),
        struct.pack(">I", len(token.entries)),
    ]
    for entry in token.entries:
        out.append(struct.pack(">dd", entry.valid_from_s, entry.valid_until_s))
        out.append(_pack_lp(entry.key.bytes))
    return b"".join(out)


def token_from_bytes(data: bytes) -> Token:
    r = _Reader(data)
    r.expect_tag(_TAG_TOKEN)
    cell_id = r.i64()
    announce = r.f64()
    count = r.u32()
    entries = []
    for _ in range(count):
        a = r.f64()
        b = r.f64()
        key = Key(r.lp())
        entries.append(TokenEntry(a, b, key))
    r.finish()
    return Token(cell_id=cell_id, announce_time_s=announce, entries=tuple(entries))


# ---------------------------------------------------------------------------
# Planner (seed authority + deposit service)
# ---------------------------------------------------------------------------


@dataclass
class SeedTable:
    """Planner-held map (level, cluster) -> seed, with the per-level clusterings
    needed to resolve a cell to its cluster."""

    seeds: dict[tuple[int, int], Seed]
    clusterings: dict[int, Clustering]

    @classmethod
    def generate(
        cls,
        cell_map: CellMap,
        hierarchy: TokenHierarchy,
        clusterings: dict[int, Clustering],
        master_seed: int,
    ) -> "SeedTable":
        """Deterministically derive independent seeds for every (level, cluster).

        Cells grouped in one cluster at a level share that level's seed, which
        is what makes their keys identical there.  ``master_seed`` is reduced
        mod 2**64.
        """
        all_cells = set(cell_map.cell_ids)
        for lvl in hierarchy.levels:
            clustering = clusterings.get(lvl.level)
            if clustering is None:
                raise ConfigurationError(f"no clustering for level {lvl.level}")
            missing = all_cells - set(clustering.assignment)
            if missing:
                raise ConfigurationError(f"level {lvl.level} clustering misses cells {sorted(missing)[:5]}")
        level0 = clusterings[0].assignment
        if len(set(level0.values())) != len(level0):
            raise ConfigurationError("level 0 clustering must be singletons")

        root = hashlib.sha256(struct.pack(">Q", master_seed & (2**64 - 1))).digest()
        seeds: dict[tuple[int, int], Seed] = {}
        for lvl in hierarchy.levels:
            for cluster in sorted(clusterings[lvl.level].cluster_ids()):
                material = hmac.new(root, struct.pack(">IQ", lvl.level, cluster), hashlib.sha256).digest()
                seeds[(lvl.level, cluster)] = Seed(material)
        return cls(seeds=seeds, clusterings=clusterings)

    def lookup(self, cell_id: int, level: int) -> Seed:
        clustering = self.clusterings.get(level)
        if clustering is None or cell_id not in clustering.assignment:
            raise MissingSeedError(f"no clustering entry for cell {cell_id} at level {level}")
        return self.seeds[(level, clustering.assignment[cell_id])]


@dataclass(frozen=True)
class DepositCandidate:
    """One (cell, base slot) pair a deposit addressed, before key dedup."""

    cell_id: int
    slot_start_s: float
    level: int
    region: RegionId


@dataclass
class DepositOutcome:
    """Stored copies (one per distinct key) plus the pre-dedup candidate list."""

    stored: list[tuple[int, StoredMessage]]
    candidates: list[DepositCandidate]


AuthorizeHook = Callable[[DepositRequest], bool]


class TrustedPlanner:
    """Seed authority and deposit front end.

    Holds the seed table, reconstructs the currently valid key for every
    (cell, slot) a request addresses, encrypts one copy per distinct key, and
    says which shard each copy belongs on.  Sender authorization is a
    pluggable hook; the default accepts everything.
    """

    def __init__(
        self,
        cell_map: CellMap,
        hierarchy: TokenHierarchy,
        seeds: SeedTable,
        num_rps: int,
        authorize: AuthorizeHook | None = None,
    ):
        if num_rps < 1:
            raise ValueError("num_rps must be >= 1")
        self.cell_map = cell_map
        self.hierarchy = hierarchy
        self.seeds = seeds
        self.num_rps = num_rps
        self._authorize = authorize
        self._nonces = NonceCounter()

    def deposit(self, request: DepositRequest, now_s: float) -> DepositOutcome:
        """Encrypt and shard one request; see the module docstring for the flow.

        The addressed window is treated as half-open [start, end): a base slot
        is a candidate when it overlaps that interval with positive length.
        Candidates whose derived keys coincide collapse into one stored copy,
        which expires when the newest matching token goes stale.
        """
        if self._authorize is not None and not self._authorize(request):
            raise DepositRejected(f"sender {request.sender_id!r} not authorized")
        if request.window_end_s > now_s:
            raise ValueError("addressed window must lie entirely in the past")

        cells = cells_overlapping(self.cell_map, request.area)
        if not cells:
            raise AddressingFailure("area overlaps no cell")

        h = self.hierarchy
        s0 = h.base_slot_s
        k_lo = slot_index(request.window_start_s, s0, h.epoch_s)
        k_hi = slot_index(request.window_end_s, s0, h.epoch_s)
        if slot_start(request.window_end_s, s0, h.epoch_s) == request.window_end_s:
            k_hi -= 1

        candidates: list[DepositCandidate] = []
        groups: dict[bytes, dict] = {}
        for cell in sorted(cells):
            for k in range(k_lo, k_hi + 1):
                start = h.epoch_s + k * s0
                level = current_level(h, now_s - start)
                if level is None:
                    continue
                lvl_slot = slot_index(start, h.levels[level].slot_size_s, h.epoch_s)
                key = derive_for(self.seeds, cell, level, lvl_slot)
                region = region_id(key)
                candidates.append(DepositCandidate(cell, start, level, region))
                group = groups.get(key.bytes)
                if group is None:
                    groups[key.bytes] = {"key": key, "region": region, "newest_slot": start}
                elif start > group["newest_slot"]:
                    group["newest_slot"] = start

        if not groups:
            raise AddressingFailure("every token matching the window is already stale")

        stored: list[tuple[int, StoredMessage]] = []
        for group in groups.values():
            region = group["region"]
            ct = encrypt(group["key"], request.payload, region.digest.bytes, nonce=self._nonces.next())
            msg = StoredMessage(
                region=region,
                ct=ct,
                deposited_at_s=now_s,
                expires_at_s=group["newest_slot"] + h.horizon_s,
            )
            stored.append((rp_index(region, self.num_rps), msg))
        return DepositOutcome(stored=stored, candidates=candidates)


def derive_for(seeds: SeedTable, cell_id: int, level: int, level_slot: int) -> Key:
    """Key the planner reconstructs for a (cell, level, level-slot) triple."""
    return derive_key(seeds.lookup(cell_id, level), level, level_slot)


# ---------------------------------------------------------------------------
# Base station
# ---------------------------------------------------------------------------


@dataclass
class BaseStation:
    """Per-cell token issuer."""

    cell_id: int
    hierarchy: TokenHierarchy
    seed_lookup: Callable[[int, int], Seed]

    def tick(self, now_s: float) -> Token:
        """Token broadcast at the start of a base slot; ``now_s`` must be aligned."""
        if (now_s - self.hierarchy.epoch_s) % self.hierarchy.base_slot_s != 0:
            raise ValueError(f"tick at {now_s} is not aligned to the base slot")
        return make_token(self.cell_id, now_s, self.hierarchy, self.seed_lookup)

    def on_entry(self, now_s: float) -> Token:
        """Token handed to a handset entering the cell mid-slot; identical to
        the one broadcast at the ongoing slot's tick."""
        return make_token(self.cell_id, now_s, self.hierarchy, self.seed_lookup)


# ---------------------------------------------------------------------------
# Rendezvous point
# ---------------------------------------------------------------------------


class RendezvousPoint:
    """One mailbox shard.

    State is keyed by region id only; nothing geographic ever enters or
    leaves this class.  Expired messages are garbage-collected lazily, when
    their region is next touched.
    """

    def __init__(self) -> None:
        self._store: dict[RegionId, list[StoredMessage]] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self._store.values())

    def store(self, msg: StoredMessage) -> None:
        self._store.setdefault(msg.region, []).append(msg)

    def poll(self, request: PollRequest, now_s: float) -> PollResponse:
        """All non-expired messages for the polled region (possibly none)."""
        held = self._store.get(request.region)
        if held is None:
            return PollResponse(())
        live = [m for m in held if now_s < m.expires_at_s]
        if len(live) != len(held):
            if live:
                self._store[request.region] = live
            else:
                del self._store[request.region]
        return PollResponse(tuple(m.ct for m in live))


# ---------------------------------------------------------------------------
# User equipment
# ---------------------------------------------------------------------------


class UserEquipment:
    """One handset: token trail, polling, and decryption bookkeeping.

    Ciphertexts already fetched are remembered (keyed by region + nonce) so a
    message that stays stored across several polling rounds is only delivered
    once.  Ciphertexts that fail authentication are dropped and counted.
    """

    def __init__(self, ue_id: int):
        self.ue_id = ue_id
        self.trail = TokenTrail()
        self.decrypt_failures = 0
        self._fetched: set[tuple[RegionId, bytes]] = set()
        self._round_keys: dict[RegionId, Key] = {}

    def receive_token(self, token: Token) -> None:
        self.trail.insert(token)

    def poll_round(self, now_s: float, hierarchy: TokenHierarchy, num_rps: int) -> list[tuple[int, PollRequest]]:
        """Prune stale tokens, then emit one request per distinct region."""
        self.trail.prune(now_s)
        targets = poll_targets(self.trail, hierarchy, now_s, num_rps)
        self._round_keys = {t.region: t.key for t in targets}
        return [(t.rp_index, PollRequest(t.region)) for t in targets]

    def on_response(self, region: RegionId, response: PollResponse) -> list[bytes]:
        """Decrypt newly seen ciphertexts from one shard's response."""
        key = self._round_keys[region]
        payloads: list[bytes] = []
        for ct in response.messages:
            handle = (region, ct.nonce)
            if handle in self._fetched:
                continue
            try:
                plaintext = decrypt(key, ct, region.digest.bytes)
            except AuthFailure:
                self.decrypt_failures += 1
                continue
            self._fetched.add(handle)
            payloads.append(plaintext)
        return payloads
