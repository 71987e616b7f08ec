"""Deterministic discrete-event simulator for the multicast scheme.

One run walks a single chronological timeline: base stations issue tokens at
every base-slot tick and on cell entry, a sender deposits messages addressed
to randomly drawn area/time-window pairs, and handsets poll the rendezvous
shards at their own phase-shifted cadence.  Everything is derived from the
scenario's master seed, so identical configurations produce byte-identical
metrics.

Aggregation modes select how the token hierarchy is instantiated:

* ``N``  no aggregation: a single level whose key rotates every base slot.
* ``S``  spatial only: all levels rotate at the base slot, level ``l`` groups
  cells into random clusters of ``l + 1``.
* ``T``  temporal only: per-level slot sizes grow, clusters stay singleton.
* ``ST`` both axes at once.

Addressed time windows drawn by the built-in scenario generator are snapped
to the base slot grid.  Cell/slot granularity is the finest addressing the
scheme supports, so snapped windows make mode ``N`` delivery exact; unsnapped
windows (possible through the library API) inherit that granularity and may
deliver to handsets that brushed the boundary slots.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from typing import Iterable, Union

import numpy as np

from .crypto import RegionId, rp_index
from .protocol import (
    AddressingFailure,
    BaseStation,
    DepositRequest,
    RendezvousPoint,
    SeedTable,
    TrustedPlanner,
    UserEquipment,
)
from .tokens import HierarchyError, TokenHierarchy
from .topology import CellMap, Clustering, Rect, assign_cells, cells_overlapping, load_sites, random_clusters

MODES = ("N", "S", "T", "ST")

# Default level table: base slot 3 min, slots growing by 3 min per level,
# validity boundaries at 15/30/60/120 min of token age.
DEFAULT_HIERARCHY_ROWS = (
    (180.0, 0.0, 900.0),
    (360.0, 900.0, 1800.0),
    (540.0, 1800.0, 3600.0),
    (720.0, 3600.0, 7200.0),
)

_SEED_TRACE = 0
_SEED_STDS = 1
_SEED_POLLS = 2
_SEED_CLUSTERS = 3
_SEED_TABLE = 4


class ConfigError(ValueError):
    """Scenario configuration is invalid; raised before any event runs."""


class TraceLoadError(ValueError):
    """A mobility trace file violates the expected format or invariants."""


# ---------------------------------------------------------------------------
# Scenario configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticMobility:
    """Random-waypoint walks generated inside the map bounds."""

    num_ues: int
    speed_mps: float = 14.0
    pause_s: float = 30.0

    def to_dict(self) -> dict:
        return {"kind": "synthetic", "num_ues": self.num_ues, "speed_mps": self.speed_mps, "pause_s": self.pause_s}


@dataclass(frozen=True)
class TraceMobility:
    """Mobility read from a trace file (shared by every repetition)."""

    path: str

    def to_dict(self) -> dict:
        return {"kind": "trace", "path": self.path}


MobilitySpec = Union[SyntheticMobility, TraceMobility]


@dataclass(frozen=True)
class ScenarioConfig:
    sites: str
    mobility: MobilitySpec
    duration_s: float = 7200.0
    token_interval_s: float = 180.0
    poll_interval_s: float = 600.0
    hierarchy_rows: tuple = DEFAULT_HIERARCHY_ROWS
    aggregation_mode: str = "ST"
    num_rps: int = 16
    num_messages: int = 100
    message_window_min: tuple = (0.0, 5.0, 5.0, 10.0)
    send_delay_min: tuple = (10.0, 60.0)
    repetitions: int = 32
    master_seed: int = 1
    bounds_margin_m: float = 1000.0
    area_side_m: tuple = (500.0, 2000.0)

    def __post_init__(self) -> None:
        if self.duration_s <= 0 or self.token_interval_s <= 0 or self.poll_interval_s <= 0:
            raise ConfigError("durations and intervals must be positive")
        if self.poll_interval_s < self.token_interval_s:
            raise ConfigError("poll interval must be >= token interval")
        if self.aggregation_mode not in MODES:
            raise ConfigError(f"aggregation_mode must be one of {MODES}, got {self.aggregation_mode!r}")
        if self.num_rps < 1:
            raise ConfigError("num_rps must be >= 1")
        if self.num_messages < 0:
            raise ConfigError("num_messages must be >= 0")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if not isinstance(self.master_seed, int) or self.master_seed < 0:
            raise ConfigError("master_seed must be a non-negative integer")
        try:
            hierarchy = TokenHierarchy.from_rows(self.hierarchy_rows)
        except (HierarchyError, IndexError, TypeError) as exc:
            raise ConfigError(f"invalid hierarchy: {exc}") from exc
        if hierarchy.base_slot_s != self.token_interval_s:
            raise ConfigError(
                f"level-0 slot size {hierarchy.base_slot_s} must equal token_interval_s {self.token_interval_s}"
            )
        min_a, max_a, min_b, max_b = self.message_window_min
        if not (0 <= min_a <= max_a and 0 <= min_b <= max_b):
            raise ConfigError("message_window_min must satisfy 0 <= min_a <= max_a and 0 <= min_b <= max_b")
        dmin, dmax = self.send_delay_min
        if not (0 <= dmin <= dmax):
            raise ConfigError("send_delay_min must satisfy 0 <= min <= max")
        lo, hi = self.area_side_m
        if not (0 < lo <= hi):
            raise ConfigError("area_side_m must satisfy 0 < min <= max")
        if isinstance(self.mobility, SyntheticMobility):
            m = self.mobility
            if m.num_ues < 0 or m.speed_mps < 0 or m.pause_s < 0:
                raise ConfigError("synthetic mobility parameters must be non-negative")

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | None = None) -> "ScenarioConfig":
        import os.path

        def _resolve(path: str) -> str:
            if base_dir is not None and not os.path.isabs(path):
                return os.path.join(base_dir, path)
            return path

        known = {
            "sites",
            "mobility",
            "duration_s",
            "token_interval_s",
            "poll_interval_s",
            "hierarchy",
            "aggregation_mode",
            "num_rps",
            "num_messages",
            "message_window_min",
            "send_delay_min",
            "repetitions",
            "master_seed",
            "bounds_margin_m",
            "area_side_m",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "sites" not in data:
            raise ConfigError("config requires a 'sites' file path")
        if "mobility" not in data:
            raise ConfigError("config requires a 'mobility' section")

        mob = data["mobility"]
        if not isinstance(mob, dict) or "kind" not in mob:
            raise ConfigError("mobility section must be a mapping with a 'kind'")
        if mob["kind"] == "synthetic":
            extra = set(mob) - {"kind", "num_ues", "speed_mps", "pause_s"}
            if extra:
                raise ConfigError(f"unknown synthetic mobility keys: {sorted(extra)}")
            if "num_ues" not in mob:
                raise ConfigError("synthetic mobility requires num_ues")
            mobility: MobilitySpec = SyntheticMobility(
                num_ues=int(mob["num_ues"]),
                speed_mps=float(mob.get("speed_mps", 14.0)),
                pause_s=float(mob.get("pause_s", 30.0)),
            )
        elif mob["kind"] == "trace":
            if "path" not in mob:
                raise ConfigError("trace mobility requires a path")
            mobility = TraceMobility(path=_resolve(str(mob["path"])))
        else:
            raise ConfigError(f"unknown mobility kind {mob['kind']!r}")

        kwargs: dict = {"sites": _resolve(str(data["sites"])), "mobility": mobility}
        if "hierarchy" in data:
            kwargs["hierarchy_rows"] = tuple(tuple(float(v) for v in row) for row in data["hierarchy"])
        for name in (
            "duration_s",
            "token_interval_s",
            "poll_interval_s",
            "bounds_margin_m",
        ):
            if name in data:
                kwargs[name] = float(data[name])
        for name in ("num_rps", "num_messages", "repetitions", "master_seed"):
            if name in data:
                kwargs[name] = int(data[name])
        if "aggregation_mode" in data:
            kwargs["aggregation_mode"] = str(data["aggregation_mode"])
        for name, width in (("message_window_min", 4), ("send_delay_min", 2), ("area_side_m", 2)):
            if name in data:
                values = tuple(float(v) for v in data[name])
                if len(values) != width:
                    raise ConfigError(f"{name} must have {width} entries")
                kwargs[name] = values
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "sites": self.sites,
            "mobility": self.mobility.to_dict(),
            "duration_s": self.duration_s,
            "token_interval_s": self.token_interval_s,
            "poll_interval_s": self.poll_interval_s,
            "hierarchy": [list(row) for row in self.hierarchy_rows],
            "aggregation_mode": self.aggregation_mode,
            "num_rps": self.num_rps,
            "num_messages": self.num_messages,
            "message_window_min": list(self.message_window_min),
            "send_delay_min": list(self.send_delay_min),
            "repetitions": self.repetitions,
            "master_seed": self.master_seed,
            "bounds_margin_m": self.bounds_margin_m,
            "area_side_m": list(self.area_side_m),
        }


def hierarchy_for_mode(mode: str, rows: Iterable, token_interval_s: float, epoch_s: float = 0.0) -> TokenHierarchy:
    """Instantiate the level table for one aggregation mode.

    The staleness horizon (last validity boundary) is identical across modes,
    so the same tokens are alive everywhere and runs compare like for like.
    """
    rows = [tuple(row) for row in rows]
    horizon = rows[-1][2]
    if mode == "N":
        return TokenHierarchy.from_rows([(token_interval_s, 0.0, horizon)], epoch_s=epoch_s)
    if mode == "S":
        return TokenHierarchy.from_rows([(token_interval_s, a, b) for (_, a, b) in rows], epoch_s=epoch_s)
    if mode in ("T", "ST"):
        return TokenHierarchy.from_rows(rows, epoch_s=epoch_s)
    raise ConfigError(f"unknown mode {mode!r}")


def cluster_sizes_for_mode(mode: str, num_levels: int) -> list[int]:
    """Cluster size per level: ``l + 1`` on the spatial modes, singletons otherwise."""
    if mode in ("S", "ST"):
        return [level + 1 for level in range(num_levels)]
    return [1] * num_levels


def _sub_seed(master_seed: int, *path: int) -> int:
    ss = np.random.SeedSequence(entropy=[master_seed, *path])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Mobility
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Residence:
    """One stay in one cell; ``end_s`` is ``inf`` when the final sample holds."""

    start_s: float
    end_s: float
    cell_id: int


@dataclass(frozen=True)
class MobilityTrace:
    residences: dict[int, tuple[Residence, ...]] = field(hash=False)

    def ue_ids(self) -> list[int]:
        return sorted(self.residences)

    def first_time(self, ue_id: int) -> float:
        return self.residences[ue_id][0].start_s

    def __len__(self) -> int:
        return len(self.residences)


def _coalesce(times: Iterable[float], cells: Iterable[int]) -> tuple[Residence, ...]:
    out: list[Residence] = []
    run_start: float | None = None
    current: int | None = None
    for t, c in zip(times, cells):
        if current is None:
            run_start, current = t, c
        elif c != current:
            out.append(Residence(run_start, t, current))
            run_start, current = t, c
    if current is not None:
        out.append(Residence(run_start, math.inf, current))
    return tuple(out)


def load_trace(path: str, cell_map: CellMap) -> MobilityTrace:
    """Read a mobility CSV and convert it to per-handset residence intervals.

    Two row formats, auto-detected by column count: ``time_s,ue_id,x_m,y_m``
    (positions, converted through nearest-site assignment) and
    ``time_s,ue_id,cell_id``.  Per handset, timestamps must be strictly
    increasing.  The last sample holds open-endedly.
    """
    rows_by_ue: dict[int, list[tuple[float, float, float]]] = {}
    cell_rows_by_ue: dict[int, list[tuple[float, int]]] = {}
    ncols: int | None = None
    known_cells = set(cell_map.cell_ids)
    try:
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                if ncols is None:
                    ncols = len(row)
                    if ncols not in (3, 4):
                        raise TraceLoadError(f"{path}:{lineno}: expected 3 or 4 columns, got {ncols}")
                elif len(row) != ncols:
                    raise TraceLoadError(f"{path}:{lineno}: inconsistent column count")
                try:
                    t = float(row[0])
                    ue = int(row[1])
                    if ncols == 4:
                        rows_by_ue.setdefault(ue, []).append((t, float(row[2]), float(row[3])))
                    else:
                        cell = int(row[2])
                        if cell not in known_cells:
                            raise TraceLoadError(f"{path}:{lineno}: unknown cell id {cell}")
                        cell_rows_by_ue.setdefault(ue, []).append((t, cell))
                except (ValueError, TypeError) as exc:
                    if isinstance(exc, TraceLoadError):
                        raise
                    raise TraceLoadError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise TraceLoadError(f"cannot read trace file {path}: {exc}") from exc

    residences: dict[int, tuple[Residence, ...]] = {}
    for ue, samples in rows_by_ue.items():
        times = [s[0] for s in samples]
        _check_monotone(path, ue, times)
        try:
            cells = assign_cells(cell_map, np.array([s[1] for s in samples]), np.array([s[2] for s in samples]))
        except ValueError as exc:
            raise TraceLoadError(f"{path}: ue {ue}: {exc}") from exc
        residences[ue] = _coalesce(times, (int(c) for c in cells))
    for ue, samples in cell_rows_by_ue.items():
        times = [s[0] for s in samples]
        _check_monotone(path, ue, times)
        residences[ue] = _coalesce(times, (s[1] for s in samples))
    if not residences:
        raise TraceLoadError(f"{path}: no samples found")
    return MobilityTrace(residences=residences)


def _check_monotone(path: str, ue: int, times: list[float]) -> None:
    for a, b in zip(times, times[1:]):
        if b <= a:
            raise TraceLoadError(f"{path}: ue {ue}: non-monotone timestamps ({a} then {b})")
    if times and times[0] < 0:
        raise TraceLoadError(f"{path}: ue {ue}: negative timestamp {times[0]}")


def generate_mobility(
    cell_map: CellMap,
    num_ues: int,
    speed_mps: float,
    pause_s: float,
    duration_s: float,
    rng_seed: int,
) -> MobilityTrace:
    """Random-waypoint walks sampled at 1 s and folded into residence intervals.

    Deterministic for a fixed seed.  A speed of zero leaves every handset at
    its start position for the whole run (one residence each).
    """
    rng = np.random.default_rng(rng_seed)
    b = cell_map.bounds
    n_samples = max(1, int(duration_s))
    residences: dict[int, tuple[Residence, ...]] = {}
    times = np.arange(n_samples, dtype=float)
    for ue in range(num_ues):
        xs, ys = _waypoint_walk(rng, b, speed_mps, pause_s, n_samples)
        cells = assign_cells(cell_map, xs, ys)
        residences[ue] = _coalesce(times, (int(c) for c in cells))
    return MobilityTrace(residences=residences)


def _waypoint_walk(rng: np.random.Generator, b: Rect, speed: float, pause_s: float, n: int):
    x = rng.uniform(b.x_min, b.x_max)
    y = rng.uniform(b.y_min, b.y_max)
    if speed <= 0:
        return np.full(n, x), np.full(n, y)
    xs: list[np.ndarray] = [np.array([x])]
    ys: list[np.ndarray] = [np.array([y])]
    total = 1
    pause_steps = int(round(pause_s))
    while total < n:
        tx = rng.uniform(b.x_min, b.x_max)
        ty = rng.uniform(b.y_min, b.y_max)
        dist = math.hypot(tx - x, ty - y)
        steps = max(1, math.ceil(dist / speed))
        frac = np.arange(1, steps + 1, dtype=float) / steps
        xs.append(x + (tx - x) * frac)
        ys.append(y + (ty - y) * frac)
        total += steps
        x, y = tx, ty
        if pause_steps > 0 and total < n:
            xs.append(np.full(pause_steps, x))
            ys.append(np.full(pause_steps, y))
            total += pause_steps
    return np.concatenate(xs)[:n], np.concatenate(ys)[:n]


def ground_truth(trace: MobilityTrace, cell_map: CellMap, area: Rect, window: tuple[float, float]) -> set[int]:
    """Handsets that resided in a cell overlapping ``area`` during the window.

    Derived purely from the trace and the topology; the protocol never enters
    into it.  The window is treated as half-open ``[a, b)``, matching the
    residence intervals.
    """
    a, b = window
    cells = cells_overlapping(cell_map, area)
    out: set[int] = set()
    for ue, residences in trace.residences.items():
        for r in residences:
            if r.cell_id in cells and r.start_s < b and r.end_s > a:
                out.add(ue)
                break
    return out


# ---------------------------------------------------------------------------
# Scheduled messages and polling cadence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StdPlan:
    """One scheduled message: destination area/window and when it is sent."""

    index: int
    area: Rect
    window_start_s: float
    window_end_s: float
    send_time_s: float
    payload: bytes


def _plan_stds(config: ScenarioConfig, bounds: Rect, rng: np.random.Generator) -> list[StdPlan]:
    s0 = config.token_interval_s
    min_a, max_a, min_b, max_b = (v * 60.0 for v in config.message_window_min)
    dmin, dmax = (v * 60.0 for v in config.send_delay_min)
    side_lo, side_hi = config.area_side_m
    plans = []
    for i in range(config.num_messages):
        cx = rng.uniform(bounds.x_min, bounds.x_max)
        cy = rng.uniform(bounds.y_min, bounds.y_max)
        w = rng.uniform(side_lo, side_hi)
        h = rng.uniform(side_lo, side_hi)
        area = Rect(
            max(bounds.x_min, cx - w / 2),
            max(bounds.y_min, cy - h / 2),
            min(bounds.x_max, cx + w / 2),
            min(bounds.y_max, cy + h / 2),
        )
        raw_a = rng.uniform(min_a, max_a)
        raw_b = rng.uniform(min_b, max_b)
        a = math.floor(raw_a / s0) * s0
        b = math.ceil(raw_b / s0) * s0
        if b <= a:
            b = a + s0
        delay = rng.uniform(dmin, dmax)
        send = float(int(b + delay))
        plans.append(
            StdPlan(index=i, area=area, window_start_s=a, window_end_s=b, send_time_s=send, payload=b"std:%08d" % i)
        )
    return plans


def _poll_schedule(trace: MobilityTrace, config: ScenarioConfig, rng: np.random.Generator) -> dict[int, list[float]]:
    """Per-handset poll instants: a seeded phase offset, then every poll interval.

    Polling runs from the handset's first trace sample to the end of the
    simulation.
    """
    schedule: dict[int, list[float]] = {}
    interval = config.poll_interval_s
    for ue in trace.ue_ids():
        phase = float(int(rng.uniform(0, interval)))
        first = trace.first_time(ue)
        times = []
        t = phase
        while t < config.duration_s:
            if t >= first:
                times.append(t)
            t += interval
        schedule[ue] = times
    return schedule


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RepetitionMetrics:
    repetition: int
    num_ues: int
    ues_polling: int
    total_poll_messages: int
    mean_polls_per_ue: float
    total_received: int
    false_positives: int
    false_positive_ratio: float
    delivery_ratio: float
    ground_truth_total: int
    num_stds: int
    stds_sent: int
    deposits_total: int
    deposits_per_std: float
    addressing_failures: int
    decrypt_failures: int
    delivered_copies: int

    def to_dict(self) -> dict:
        return asdict(self)


AGGREGATE_FIELDS = (
    "mean_polls_per_ue",
    "total_received",
    "false_positives",
    "false_positive_ratio",
    "delivery_ratio",
    "deposits_per_std",
    "addressing_failures",
    "decrypt_failures",
)


def aggregate_metrics(reps: list[RepetitionMetrics]) -> dict[str, dict[str, float]]:
    """Mean and sample standard deviation of each headline field across repetitions."""
    out: dict[str, dict[str, float]] = {}
    for name in AGGREGATE_FIELDS:
        values = np.array([getattr(r, name) for r in reps], dtype=float)
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        out[name] = {"mean": float(np.mean(values)), "std": std}
    return out


@dataclass
class StdDetail:
    plan: StdPlan
    ground_truth: frozenset
    sent: bool
    addressing_failed: bool
    copies: list[dict]
    received: set


@dataclass
class RepetitionDetail:
    """Per-repetition event log kept for oracle-style verification in tests."""

    trace: MobilityTrace
    poll_times: dict[int, list[float]]
    stds: list[StdDetail]
    receivers_by_copy: dict[tuple[int, RegionId], set]


@dataclass
class RunResult:
    mode: str
    per_repetition: list[RepetitionMetrics]
    aggregate: dict[str, dict[str, float]]
    details: list[RepetitionDetail] | None = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "per_repetition": [r.to_dict() for r in self.per_repetition],
            "aggregate": self.aggregate,
        }


# ---------------------------------------------------------------------------
# The event loop
# ---------------------------------------------------------------------------

_EV_TICK = 0
_EV_ENTRY = 1
_EV_DEPOSIT = 2
_EV_POLL = 3


def _run_timeline(
    cell_map: CellMap,
    trace: MobilityTrace,
    hierarchy: TokenHierarchy,
    seed_table: SeedTable,
    config: ScenarioConfig,
    stds: list[StdPlan],
    poll_times: dict[int, list[float]],
    truths: list[set[int]],
    repetition: int,
    collect_detail: bool,
) -> tuple[RepetitionMetrics, RepetitionDetail | None]:
    duration = config.duration_s
    num_rps = config.num_rps
    s0 = hierarchy.base_slot_s

    planner = TrustedPlanner(cell_map, hierarchy, seed_table, num_rps)
    shards = [RendezvousPoint() for _ in range(num_rps)]
    stations: dict[int, BaseStation] = {}
    ues = {ue: UserEquipment(ue) for ue in trace.ue_ids()}
    payload_to_std = {p.payload: p.index for p in stds}

    events: list[tuple[float, int, int, object]] = []
    t = 0.0
    while t < duration:
        events.append((t, _EV_TICK, 0, None))
        t += s0
    for ue in trace.ue_ids():
        for r in trace.residences[ue]:
            if 0 <= r.start_s < duration:
                events.append((r.start_s, _EV_ENTRY, ue, r.cell_id))
    for plan in stds:
        if plan.send_time_s < duration:
            events.append((plan.send_time_s, _EV_DEPOSIT, plan.index, plan))
    for ue, times in poll_times.items():
        for pt in times:
            events.append((pt, _EV_POLL, ue, None))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    # Per-handset cursor into its residence list, advanced as ticks go by.
    cursors = {ue: 0 for ue in ues}
    residences = trace.residences

    rounds = {ue: 0 for ue in ues}
    total_poll_messages = 0
    received_pairs: set[tuple[int, int]] = set()
    false_positives = 0
    delivered_copies = 0
    deposits_total = 0
    stds_sent = 0
    addressing_failures = 0
    receivers_by_copy: dict[tuple[int, RegionId], set] = {}
    std_details: list[StdDetail] = []
    if collect_detail:
        std_details = [
            StdDetail(plan=p, ground_truth=frozenset(truths[p.index]), sent=False, addressing_failed=False, copies=[], received=set())
            for p in stds
        ]

    def _station(cell: int) -> BaseStation:
        st = stations.get(cell)
        if st is None:
            st = BaseStation(cell, hierarchy, seed_table.lookup)
            stations[cell] = st
        return st

    # Tokens are pure functions of (cell, base slot); entry tokens reuse the
    # slot's broadcast token instead of re-deriving keys per handset.
    token_cache: dict[tuple[int, float], object] = {}

    def _token_for_entry(cell: int, when: float):
        announce = when - (when - hierarchy.epoch_s) % s0
        token = token_cache.get((cell, announce))
        if token is None:
            token = _station(cell).on_entry(when)
            token_cache[(cell, announce)] = token
        return token

    for when, kind, who, data in events:
        if kind == _EV_TICK:
            for ue, handset in ues.items():
                res = residences[ue]
                i = cursors[ue]
                while i < len(res) and res[i].end_s <= when:
                    i += 1
                cursors[ue] = i
                if i >= len(res) or res[i].start_s > when:
                    continue
                cell = res[i].cell_id
                token = token_cache.get((cell, when))
                if token is None:
                    token = _station(cell).tick(when)
                    token_cache[(cell, when)] = token
                handset.receive_token(token)
        elif kind == _EV_ENTRY:
            ues[who].receive_token(_token_for_entry(data, when))
        elif kind == _EV_DEPOSIT:
            plan: StdPlan = data
            request = DepositRequest(
                area=plan.area,
                window_start_s=plan.window_start_s,
                window_end_s=plan.window_end_s,
                payload=plan.payload,
                sender_id=b"sim-sender",
            )
            try:
                outcome = planner.deposit(request, when)
            except AddressingFailure:
                addressing_failures += 1
                if collect_detail:
                    std_details[plan.index].addressing_failed = True
                continue
            stds_sent += 1
            deposits_total += len(outcome.stored)
            for idx, msg in outcome.stored:
                if rp_index(msg.region, num_rps) != idx:
                    raise RuntimeError("deposit shard does not match the region's shard")
                shards[idx].store(msg)
                receivers_by_copy[(plan.index, msg.region)] = set()
            if collect_detail:
                std_details[plan.index].sent = True
                std_details[plan.index].copies = [
                    {"rp_index": idx, "region": msg.region, "expires_at_s": msg.expires_at_s}
                    for idx, msg in outcome.stored
                ]
        else:  # _EV_POLL
            handset = ues[who]
            rounds[who] += 1
            requests = handset.poll_round(when, hierarchy, num_rps)
            total_poll_messages += len(requests)
            for idx, req in requests:
                if rp_index(req.region, num_rps) != idx:
                    raise RuntimeError("poll shard does not match the region's shard")
                response = shards[idx].poll(req, when)
                for payload in handset.on_response(req.region, response):
                    std_index = payload_to_std.get(payload)
                    if std_index is None:
                        raise RuntimeError("decrypted payload does not match any scheduled message")
                    delivered_copies += 1
                    receivers_by_copy[(std_index, req.region)].add(who)
                    pair = (who, std_index)
                    if pair not in received_pairs:
                        received_pairs.add(pair)
                        if who not in truths[std_index]:
                            false_positives += 1
                        if collect_detail:
                            std_details[std_index].received.add(who)

    decrypt_failures = sum(h.decrypt_failures for h in ues.values())
    ues_polling = sum(1 for ue in ues if rounds[ue] > 0)
    total_received = len(received_pairs)
    gt_total = sum(len(s) for s in truths)
    true_positives = total_received - false_positives
    metrics = RepetitionMetrics(
        repetition=repetition,
        num_ues=len(ues),
        ues_polling=ues_polling,
        total_poll_messages=total_poll_messages,
        mean_polls_per_ue=total_poll_messages / max(1, ues_polling),
        total_received=total_received,
        false_positives=false_positives,
        false_positive_ratio=false_positives / max(1, total_received),
        delivery_ratio=true_positives / max(1, gt_total),
        ground_truth_total=gt_total,
        num_stds=len(stds),
        stds_sent=stds_sent,
        deposits_total=deposits_total,
        deposits_per_std=deposits_total / max(1, stds_sent),
        addressing_failures=addressing_failures,
        decrypt_failures=decrypt_failures,
        delivered_copies=delivered_copies,
    )
    detail = None
    if collect_detail:
        detail = RepetitionDetail(
            trace=trace,
            poll_times=poll_times,
            stds=std_details,
            receivers_by_copy=receivers_by_copy,
        )
    return metrics, detail


def _repetition_inputs(config: ScenarioConfig, cell_map: CellMap, shared_trace: MobilityTrace | None, rep: int):
    if shared_trace is not None:
        trace = shared_trace
    else:
        mob = config.mobility
        trace = generate_mobility(
            cell_map,
            mob.num_ues,
            mob.speed_mps,
            mob.pause_s,
            config.duration_s,
            _sub_seed(config.master_seed, rep, _SEED_TRACE),
        )
    stds = _plan_stds(config, cell_map.bounds, np.random.default_rng(_sub_seed(config.master_seed, rep, _SEED_STDS)))
    polls = _poll_schedule(trace, config, np.random.default_rng(_sub_seed(config.master_seed, rep, _SEED_POLLS)))
    truths = [ground_truth(trace, cell_map, p.area, (p.window_start_s, p.window_end_s)) for p in stds]
    return trace, stds, polls, truths


def _build_mode(config: ScenarioConfig, cell_map: CellMap, mode: str, rep: int):
    hierarchy = hierarchy_for_mode(mode, config.hierarchy_rows, config.token_interval_s)
    sizes = cluster_sizes_for_mode(mode, hierarchy.num_levels)
    clusterings: dict[int, Clustering] = {
        level: random_clusters(cell_map, k, _sub_seed(config.master_seed, rep, _SEED_CLUSTERS, level), level=level)
        for level, k in enumerate(sizes)
    }
    table = SeedTable.generate(cell_map, hierarchy, clusterings, _sub_seed(config.master_seed, rep, _SEED_TABLE))
    return hierarchy, clusterings, table


def _execute(config: ScenarioConfig, modes: Iterable[str], collect_detail: bool) -> dict[str, RunResult]:
    cell_map = load_sites(config.sites, margin_m=config.bounds_margin_m)
    shared_trace = None
    if isinstance(config.mobility, TraceMobility):
        shared_trace = load_trace(config.mobility.path, cell_map)
    modes = list(modes)
    per_mode: dict[str, list[RepetitionMetrics]] = {m: [] for m in modes}
    details: dict[str, list[RepetitionDetail]] = {m: [] for m in modes}
    for rep in range(config.repetitions):
        trace, stds, polls, truths = _repetition_inputs(config, cell_map, shared_trace, rep)
        for mode in modes:
            hierarchy, _, table = _build_mode(config, cell_map, mode, rep)
            metrics, detail = _run_timeline(
                cell_map, trace, hierarchy, table, config, stds, polls, truths, rep, collect_detail
            )
            per_mode[mode].append(metrics)
            if collect_detail:
                details[mode].append(detail)
    return {
        m: RunResult(
            mode=m,
            per_repetition=per_mode[m],
            aggregate=aggregate_metrics(per_mode[m]),
            details=details[m] if collect_detail else None,
        )
        for m in modes
    }


def run(config: ScenarioConfig, collect_detail: bool = False) -> RunResult:
    """Run the configured aggregation mode; returns per-repetition and aggregate metrics."""
    return _execute(config, [config.aggregation_mode], collect_detail)[config.aggregation_mode]


def sweep(config: ScenarioConfig, collect_detail: bool = False) -> dict[str, RunResult]:
    """Run all four aggregation modes on identical traces, schedules, and draws."""
    return _execute(config, MODES, collect_detail)
