"""Radio-cell geometry: sites, Voronoi membership, and spatial clustering.

Coverage is modelled as the Voronoi diagram of the base-station sites,
clipped to a bounding rectangle (outer regions would otherwise be unbounded).
Coordinates are planar meters throughout; there is no geodesy.

Rectangle/cell overlap is computed exactly by clipping the query rectangle
against the bisector half-planes of each site versus all others.  That is
O(n^2) per query but exact, which keeps sampling error out of the delivery
metrics built on top of it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

# Positive-area threshold (m^2) below which a clipped polygon is treated as a
# degenerate boundary touch rather than a real overlap.
_AREA_EPS = 1e-9

DEFAULT_BOUNDS_MARGIN_M = 1000.0


class SiteLoadError(ValueError):
    """Raised when a site file violates the expected format or invariants."""


@dataclass(frozen=True)
class Site:
    cell_id: int
    x: float
    y: float


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in meters."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate rectangle: {self}")

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def intersection(self, other: "Rect") -> "Rect | None":
        x0 = max(self.x_min, other.x_min)
        y0 = max(self.y_min, other.y_min)
        x1 = min(self.x_max, other.x_max)
        y1 = min(self.y_max, other.y_max)
        if x0 >= x1 or y0 >= y1:
            return None
        return Rect(x0, y0, x1, y1)


@dataclass(frozen=True)
class CellMap:
    """Immutable set of sites plus the clipping bounds for their Voronoi cells."""

    sites: tuple[Site, ...]
    bounds: Rect

    def __post_init__(self) -> None:
        if not self.sites:
            raise ValueError("a cell map needs at least one site")
        seen_ids: set[int] = set()
        seen_xy: set[tuple[float, float]] = set()
        for s in self.sites:
            if not (np.isfinite(s.x) and np.isfinite(s.y)):
                raise ValueError(f"site {s.cell_id} has non-finite coordinates")
            if s.cell_id in seen_ids:
                raise ValueError(f"duplicate cell_id {s.cell_id}")
            if (s.x, s.y) in seen_xy:
                raise ValueError(f"site {s.cell_id} coincides with another site")
            if not self.bounds.contains(s.x, s.y):
                raise ValueError(f"site {s.cell_id} lies outside the bounds")
            seen_ids.add(s.cell_id)
            seen_xy.add((s.x, s.y))

    @classmethod
    def from_sites(cls, sites: list[Site] | tuple[Site, ...], margin_m: float = DEFAULT_BOUNDS_MARGIN_M) -> "CellMap":
        """Build a map whose bounds are the site envelope grown by ``margin_m``."""
        if not sites:
            raise ValueError("a cell map needs at least one site")
        ordered = tuple(sorted(sites, key=lambda s: s.cell_id))
        xs = [s.x for s in ordered]
        ys = [s.y for s in ordered]
        bounds = Rect(
            min(xs) - margin_m,
            min(ys) - margin_m,
            max(xs) + margin_m,
            max(ys) + margin_m,
        )
        return cls(ordered, bounds)

    @cached_property
    def _xy(self) -> np.ndarray:
        # (n, 2) array in ascending cell_id order; argmin over it therefore
        # resolves distance ties toward the smallest cell_id.
        return np.array([[s.x, s.y] for s in self.sites], dtype=float)

    @cached_property
    def _ids(self) -> np.ndarray:
        return np.array([s.cell_id for s in self.sites], dtype=int)

    @property
    def cell_ids(self) -> list[int]:
        return [s.cell_id for s in self.sites]

    def __len__(self) -> int:
        return len(self.sites)


@dataclass(frozen=True)
class Clustering:
    """Partition of the cells of one hierarchy level into clusters."""

    level: int
    assignment: dict[int, int] = field(hash=False)

    def cluster_of(self, cell_id: int) -> int:
        return self.assignment[cell_id]

    def cluster_ids(self) -> set[int]:
        return set(self.assignment.values())


def load_sites(path: str, margin_m: float = DEFAULT_BOUNDS_MARGIN_M) -> CellMap:
    """Read a header-less ``cell_id,x_m,y_m`` CSV into a :class:`CellMap`."""
    sites: list[Site] = []
    try:
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                if len(row) != 3:
                    raise SiteLoadError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
                try:
                    sites.append(Site(int(row[0]), float(row[1]), float(row[2])))
                except ValueError as exc:
                    raise SiteLoadError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise SiteLoadError(f"cannot read site file {path}: {exc}") from exc
    if not sites:
        raise SiteLoadError(f"{path}: no sites found")
    try:
        return CellMap.from_sites(sites, margin_m=margin_m)
    except ValueError as exc:
        raise SiteLoadError(f"{path}: {exc}") from exc


def assign_cell(cell_map: CellMap, x: float, y: float) -> int:
    """Cell id of the nearest site (Euclidean), ties going to the smallest id."""
    if not cell_map.bounds.contains(x, y):
        raise ValueError(f"point ({x}, {y}) outside the map bounds")
    d2 = np.square(cell_map._xy[:, 0] - x) + np.square(cell_map._xy[:, 1] - y)
    return int(cell_map._ids[int(np.argmin(d2))])


def assign_cells(cell_map: CellMap, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized :func:`assign_cell` for sample arrays (same tie rule)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    b = cell_map.bounds
    if np.any((xs < b.x_min) | (xs > b.x_max) | (ys < b.y_min) | (ys > b.y_max)):
        raise ValueError("sample point outside the map bounds")
    sx = cell_map._xy[:, 0][np.newaxis, :]
    sy = cell_map._xy[:, 1][np.newaxis, :]
    d2 = np.square(xs[:, np.newaxis] - sx) + np.square(ys[:, np.newaxis] - sy)
    return cell_map._ids[np.argmin(d2, axis=1)]


def _clip_halfplane(poly: list[tuple[float, float]], a: tuple[float, float], c: float) -> list[tuple[float, float]]:
    """Keep the part of a convex polygon with a[0]*x + a[1]*y <= c."""
    if not poly:
        return []
    out: list[tuple[float, float]] = []
    n = len(poly)
    fvals = [a[0] * px + a[1] * py - c for px, py in poly]
    for i in range(n):
        p, fp = poly[i], fvals[i]
        q, fq = poly[(i + 1) % n], fvals[(i + 1) % n]
        if fp <= 0:
            out.append(p)
        if (fp < 0 < fq) or (fq < 0 < fp):
            t = fp / (fp - fq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _polygon_area(poly: list[tuple[float, float]]) -> float:
    if len(poly) < 3:
        return 0.0
    area = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    return abs(area) / 2.0


def _rect_polygon(cell_map: CellMap, rect: Rect) -> list[tuple[float, float]]:
    base_rect = rect.intersection(cell_map.bounds)
    if base_rect is None:
        return []
    return [
        (base_rect.x_min, base_rect.y_min),
        (base_rect.x_max, base_rect.y_min),
        (base_rect.x_max, base_rect.y_max),
        (base_rect.x_min, base_rect.y_max),
    ]


def _clip_to_cell(cell_map: CellMap, poly: list[tuple[float, float]], i: int) -> list[tuple[float, float]]:
    """Clip a convex polygon to site i's Voronoi region (bisectors vs all sites)."""
    xy = cell_map._xy
    norms = np.square(xy[:, 0]) + np.square(xy[:, 1])
    xi, yi = xy[i]
    for j in range(len(xy)):
        if j == i:
            continue
        xj, yj = xy[j]
        a = (2.0 * (xj - xi), 2.0 * (yj - yi))
        c = float(norms[j] - norms[i])
        poly = _clip_halfplane(poly, a, c)
        if len(poly) < 3:
            return []
    return poly


def cells_overlapping(cell_map: CellMap, rect: Rect) -> set[int]:
    """Cells whose clipped Voronoi region shares positive area with ``rect``.

    Each site's region is the intersection of the bisector half-planes against
    every other site; the rectangle (pre-clipped to the map bounds) is clipped
    against those half-planes and the site survives if anything with positive
    area remains.  Boundary-only touches do not count.  A rectangle disjoint
    from the bounds yields an empty set.
    """
    base = _rect_polygon(cell_map, rect)
    if not base:
        return set()
    ids = cell_map._ids
    out: set[int] = set()
    for i in range(len(cell_map.sites)):
        poly = _clip_to_cell(cell_map, base, i)
        if _polygon_area(poly) > _AREA_EPS:
            out.add(int(ids[i]))
    return out


def overlap_area(cell_map: CellMap, rect: Rect, cell_id: int) -> float:
    """Exact area of the intersection between one cell's region and ``rect``."""
    base = _rect_polygon(cell_map, rect)
    if not base:
        return 0.0
    try:
        i = cell_map.cell_ids.index(cell_id)
    except ValueError:
        raise ValueError(f"unknown cell id {cell_id}") from None
    return _polygon_area(_clip_to_cell(cell_map, base, i))


def random_clusters(cell_map: CellMap, k: int, rng_seed: int, level: int = 0) -> Clustering:
    """Shuffle the cell ids with a seeded generator and chunk them into groups of ``k``.

    The final group may be smaller; ``k = 1`` yields singleton clusters.
    Deterministic for a fixed (map, k, seed).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ids = sorted(cell_map.cell_ids)
    rng = np.random.default_rng(rng_seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    assignment: dict[int, int] = {}
    for cluster, start in enumerate(range(0, len(shuffled), k)):
        for cell in shuffled[start : start + k]:
            assignment[cell] = cluster
    return Clustering(level=level, assignment=assignment)
