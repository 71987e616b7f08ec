"""Token hierarchy: level table, slotting, token construction, and the
handset-side token trail.

A hierarchy is an ordered table of levels.  Level ``l`` has a slot size (how
often its key rotates) and a contiguous validity window ``[a_l, b_l)`` in
seconds of token age.  A token issued by a cell bundles one key per level;
which key is *currently* usable depends only on how old the token is.  Past
the last window the token is stale and gets dropped.

Validity windows are anchored at the token's announce time, which is the
start of the base (level-0) slot in which it was issued.  Both handsets and
the planner use the same anchor, otherwise deposited and polled keys would
disagree near window boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Iterator, Sequence

from .crypto import Key, RegionId, Seed, derive_key, region_id, rp_index


class HierarchyError(ValueError):
    """Raised when a level table is malformed (ordering or contiguity)."""


class MissingSeedError(KeyError):
    """Raised when no seed is configured for a (cell, level) pair."""


@dataclass(frozen=True)
class HierarchyLevel:
    level: int
    slot_size_s: float
    valid_from_s: float
    valid_until_s: float

    def __post_init__(self) -> None:
        if self.slot_size_s <= 0:
            raise HierarchyError(f"level {self.level}: slot size must be positive")
        if not self.valid_from_s < self.valid_until_s:
            raise HierarchyError(f"level {self.level}: empty validity window")


@dataclass(frozen=True)
class TokenHierarchy:
    """Validated, ordered level table plus the absolute epoch for slotting."""

    levels: tuple[HierarchyLevel, ...]
    epoch_s: float = 0.0

    def __post_init__(self) -> None:
        if not self.levels:
            raise HierarchyError("a hierarchy needs at least one level")
        for expected, lvl in enumerate(self.levels):
            if lvl.level != expected:
                raise HierarchyError(f"levels must be numbered 0..n-1 in order, found {lvl.level} at position {expected}")
        if self.levels[0].valid_from_s != 0:
            raise HierarchyError("level 0 validity must start at 0")
        for prev, cur in zip(self.levels, self.levels[1:]):
            if prev.valid_until_s != cur.valid_from_s:
                raise HierarchyError(
                    f"level {cur.level}: validity must start where level {prev.level} ends "
                    f"({prev.valid_until_s} != {cur.valid_from_s})"
                )

    @classmethod
    def from_rows(cls, rows: Iterable[Sequence[float]], epoch_s: float = 0.0) -> "TokenHierarchy":
        """Build from ``(slot_size_s, valid_from_s, valid_until_s)`` rows."""
        levels = tuple(
            HierarchyLevel(level=i, slot_size_s=row[0], valid_from_s=row[1], valid_until_s=row[2])
            for i, row in enumerate(rows)
        )
        return cls(levels=levels, epoch_s=epoch_s)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def horizon_s(self) -> float:
        """Token age at which every level has expired."""
        return self.levels[-1].valid_until_s

    @property
    def base_slot_s(self) -> float:
        return self.levels[0].slot_size_s


def validate_hierarchy(rows: Iterable[Sequence[float]], epoch_s: float = 0.0) -> TokenHierarchy:
    """Validate a level table; raises :class:`HierarchyError` naming the bad level."""
    return TokenHierarchy.from_rows(rows, epoch_s=epoch_s)


def slot_index(time_s: float, slot_size_s: float, epoch_s: float = 0.0) -> int:
    """Index of the slot containing ``time_s``; slot k covers [epoch + k*size, ...)."""
    if time_s < epoch_s:
        raise ValueError(f"time {time_s} precedes the epoch {epoch_s}")
    return int((time_s - epoch_s) // slot_size_s)


def slot_start(time_s: float, slot_size_s: float, epoch_s: float = 0.0) -> float:
    return epoch_s + slot_index(time_s, slot_size_s, epoch_s) * slot_size_s


def current_level(hierarchy: TokenHierarchy, elapsed_s: float) -> int | None:
    """Level whose validity window contains ``elapsed_s``, or None when stale."""
    if elapsed_s < 0:
        raise ValueError(f"elapsed must be >= 0, got {elapsed_s}")
    for lvl in hierarchy.levels:
        if lvl.valid_from_s <= elapsed_s < lvl.valid_until_s:
            return lvl.level
    return None


@dataclass(frozen=True)
class TokenEntry:
    valid_from_s: float
    valid_until_s: float
    key: Key


@dataclass(frozen=True)
class Token:
    """Per-cell, per-slot bundle of one key per hierarchy level."""

    cell_id: int
    announce_time_s: float
    entries: tuple[TokenEntry, ...]

    @property
    def horizon_s(self) -> float:
        return self.entries[-1].valid_until_s

    def is_stale(self, now_s: float) -> bool:
        return now_s - self.announce_time_s >= self.horizon_s

    def key_for_age(self, elapsed_s: float) -> Key | None:
        for entry in self.entries:
            if entry.valid_from_s <= elapsed_s < entry.valid_until_s:
                return entry.key
        return None


SeedLookup = Callable[[int, int], Seed]


def make_token(cell_id: int, now_s: float, hierarchy: TokenHierarchy, seed_lookup: SeedLookup) -> Token:
    """Token a base station issues in ``cell_id`` at time ``now_s``.

    The announce time is the start of the ongoing base slot, and every level's
    key is derived for that instant, so a token handed out mid-slot is
    byte-identical to the one broadcast at the slot tick.
    """
    announce = slot_start(now_s, hierarchy.base_slot_s, hierarchy.epoch_s)
    entries = []
    for lvl in hierarchy.levels:
        seed = seed_lookup(cell_id, lvl.level)
        if seed is None:
            raise MissingSeedError(f"no seed for cell {cell_id} at level {lvl.level}")
        idx = slot_index(announce, lvl.slot_size_s, hierarchy.epoch_s)
        key = derive_key(seed, lvl.level, idx)
        entries.append(TokenEntry(lvl.valid_from_s, lvl.valid_until_s, key))
    return Token(cell_id=cell_id, announce_time_s=announce, entries=tuple(entries))


@dataclass(frozen=True)
class PollTarget:
    """One polling message: which shard to ask, for which region, with which key."""

    rp_index: int
    region: RegionId
    key: Key


class TokenTrail:
    """Time-ordered token store held by one handset.

    Insertion is idempotent on (cell, announce time); re-entering a cell
    within the same slot does not duplicate anything.  Single-owner mutable
    state: one trail per simulated handset, never shared.
    """

    def __init__(self) -> None:
        self._tokens: dict[tuple[float, int], Token] = {}

    def __len__(self) -> int:
        return len(self._tokens)

    def __iter__(self) -> Iterator[Token]:
        for key in sorted(self._tokens):
            yield self._tokens[key]

    def insert(self, token: Token) -> None:
        self._tokens.setdefault((token.announce_time_s, token.cell_id), token)

    def prune(self, now_s: float) -> None:
        """Drop every token that has aged past its last validity window."""
        stale = [k for k, tok in self._tokens.items() if tok.is_stale(now_s)]
        for k in stale:
            del self._tokens[k]


@lru_cache(maxsize=1 << 16)
def _region_and_shard(key_bytes: bytes, num_rps: int) -> tuple[RegionId, int]:
    # Pure function of the key; cached because polling recomputes the same
    # identifier chain round after round.
    region = region_id(Key(key_bytes))
    return region, rp_index(region, num_rps)


def poll_targets(trail: TokenTrail, hierarchy: TokenHierarchy, now_s: float, num_rps: int) -> list[PollTarget]:
    """Polling messages for one round, deduplicated on region id.

    Every non-stale token contributes the key of its current level; tokens
    whose keys coincide (cluster- or slot-aggregated) collapse into a single
    target.  Stale tokens are skipped.
    """
    seen: set[bytes] = set()
    targets: list[PollTarget] = []
    for token in trail:
        elapsed = now_s - token.announce_time_s
        if elapsed < 0:
            continue
        level = current_level(hierarchy, elapsed)
        if level is None:
            continue
        key = token.entries[level].key
        if key.bytes in seen:
            continue
        seen.add(key.bytes)
        region, shard = _region_and_shard(key.bytes, num_rps)
        targets.append(PollTarget(shard, region, key))
    return targets
