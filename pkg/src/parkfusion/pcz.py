"""Parking cluster zones: lot clustering, Minkowski buffer regions, trip
association and per-mode demand channels.

A zone's region is the union of closed Minkowski balls of a common radius
around its member lots. A trip endpoint inside the region increments the
demand bin of its own event time: origins at ``depart_time``, destinations
at ``arrive_time``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ingest import MODES, ParkingRecord, TripRecord
from .preprocess import AvailabilitySeries, Grid, read_columns, write_columns

DEFAULT_RADIUS = 500.0
DEFAULT_P = 1.0
FEATURE_NAMES = ("x", "y", "mean_daily_inflow", "mean_daily_outflow", "capacity")


class AlignmentError(ValueError):
    """Series that should share one time grid do not."""


@dataclass(frozen=True)
class LotFeature:
    lot_id: str
    x: float
    y: float
    mean_daily_inflow: float
    mean_daily_outflow: float
    capacity: float

    @property
    def location(self) -> tuple[float, float]:
        return (self.x, self.y)

    def vector(self, names: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
        return np.array([getattr(self, n) for n in names], dtype=np.float64)


@dataclass(frozen=True)
class ParkingClusterZone:
    zone_id: str
    lot_ids: tuple[str, ...]
    centers: np.ndarray
    radius: float = DEFAULT_RADIUS
    p: float = DEFAULT_P

    def __post_init__(self):
        if not self.lot_ids:
            raise ValueError("a zone needs at least one lot")
        centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        if len(centers) != len(self.lot_ids):
            raise ValueError("one center per member lot")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "lot_ids", tuple(self.lot_ids))
        _check_p(self.p)

    def to_dict(self) -> dict:
        return {
            "zone_id": self.zone_id,
            "lot_ids": list(self.lot_ids),
            "centers": self.centers.tolist(),
            "radius": self.radius,
            "p": self.p,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ParkingClusterZone:
        return cls(d["zone_id"], tuple(d["lot_ids"]), np.asarray(d["centers"]), float(d["radius"]), float(d["p"]))


@dataclass
class DemandSeries:
    zone_id: str
    start: int
    step: int
    channels: np.ndarray  # [length, 4] in MODES order
    ignored: int = 0

    @property
    def grid(self) -> Grid:
        return Grid(self.start, self.step, len(self.channels))


@dataclass
class FeatureFrame:
    zone_id: str
    grid: Grid
    lot_ids: tuple[str, ...]
    lot_channels: np.ndarray  # [length, m], target lot first
    demand_channels: np.ndarray  # [length, 4], scaled to [0, 1]
    demand_scale: np.ndarray = field(default_factory=lambda: np.ones(len(MODES)))

    @property
    def target_lot(self) -> str:
        return self.lot_ids[0]

    def column_names(self) -> list[str]:
        return [f"lot:{i}" for i in self.lot_ids] + [f"demand:{m}" for m in MODES]

    def matrix(self) -> np.ndarray:
        return np.concatenate([self.lot_channels, self.demand_channels], axis=1)


# -- features ------------------------------------------------------------------------


def lot_feature_vector(
    lot_records: Sequence[ParkingRecord], location: tuple[float, float], n_days: float | None = None
) -> LotFeature:
    """Mean daily arrivals/departures of one lot.

    ``n_days`` defaults to the number of calendar dates spanned by the records.
    """
    if not lot_records:
        raise ValueError("lot_feature_vector needs at least one record")
    lot = lot_records[0].lot_id
    if n_days is None:
        dates = [r.date for r in lot_records]
        n_days = (max(dates) - min(dates)).days + 1
    arrivals = len(lot_records)
    departures = len(lot_records)
    return LotFeature(
        lot_id=lot,
        x=float(location[0]),
        y=float(location[1]),
        mean_daily_inflow=arrivals / n_days,
        mean_daily_outflow=departures / n_days,
        capacity=float(max(r.capacity for r in lot_records)),
    )


def lot_flows(
    lot_records: Sequence[ParkingRecord], location: tuple[float, float], span: tuple[int, int]
) -> LotFeature:
    """Like :func:`lot_feature_vector` but counting only events inside ``span``."""
    start, end = span
    n_days = (end - start) / 86400.0
    arr = sum(1 for r in lot_records if start <= r.arrival < end)
    dep = sum(1 for r in lot_records if start <= r.departure < end)
    return LotFeature(
        lot_records[0].lot_id,
        float(location[0]),
        float(location[1]),
        arr / n_days,
        dep / n_days,
        float(max(r.capacity for r in lot_records)),
    )


def zscore(matrix: np.ndarray) -> np.ndarray:
    """Per-column standardization; constant columns become zero."""
    m = np.asarray(matrix, dtype=np.float64)
    mu = m.mean(axis=0)
    sd = m.std(axis=0)
    sd[sd == 0] = 1.0
    return (m - mu) / sd


def clustering_matrix(features: Sequence[LotFeature], names: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
    return zscore(np.stack([f.vector(names) for f in features]))


# -- k-means --------------------------------------------------------------------------


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    history: list[float]


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def _plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center; take the first unused one
            idx = next(i for i in range(n) if i not in chosen)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _lloyd(points, centroids, max_iter, tol):
    k = len(centroids)
    history = []
    assign = None
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(points, centroids)
        assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(points)), assign].sum()))
        new = centroids.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = points[members].mean(axis=0)
            else:
                # empty cluster: move it to the point farthest from its own centroid
                own = d2[np.arange(len(points)), assign]
                far = int(np.argmax(own))
                new[j] = points[far]
                assign[far] = j
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    d2 = _sq_dists(points, centroids)
    assign = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(points)), assign].sum())
    history.append(inertia)
    return assign, centroids, inertia, it, history


def kmeans(
    points,
    k: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-8,
    n_init: int = 1,
) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations.

    ``history`` holds the inertia after every assignment step; it never
    increases. With ``n_init > 1`` the best of several seeded restarts is kept.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be a 2-D array [n, dim]")
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be between 1 and the number of points ({n})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(n_init, 1)):
        init = _plus_plus(pts, k, rng)
        assign, cents, inertia, n_iter, hist = _lloyd(pts, init, max_iter, tol)
        if best is None or inertia < best.inertia:
            best = KMeansResult(assign, cents, inertia, n_iter, hist)
    return best


def default_k(n_lots: int) -> int:
    return max(1, math.ceil(n_lots / 5))


# -- geometry -------------------------------------------------------------------------


def _check_p(p: float) -> None:
    if not p >= 1:
        raise ValueError(f"Minkowski order p must be >= 1, got {p}")


def minkowski_distance(a, b, p: float = DEFAULT_P) -> float:
    _check_p(p)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    if math.isinf(p):
        return float(diff.max(initial=0.0))
    if p == 1:
        return float(diff.sum())
    if p == 2:
        return float(np.sqrt((diff * diff).sum()))
    return float((diff**p).sum() ** (1.0 / p))


def minkowski_to_centers(points, centers, p: float) -> np.ndarray:
    """Distance matrix [n_points, n_centers]."""
    q = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    diff = np.abs(q[:, None, :] - c[None, :, :])
    if math.isinf(p):
        return diff.max(axis=-1)
    if p == 1:
        return diff.sum(axis=-1)
    if p == 2:
        return np.sqrt((diff * diff).sum(axis=-1))
    return (diff**p).sum(axis=-1) ** (1.0 / p)


def build_pcz(
    cluster: Iterable[LotFeature], radius: float = DEFAULT_RADIUS, p: float = DEFAULT_P, zone_id: str = "Z0"
) -> ParkingClusterZone:
    members = sorted(cluster, key=lambda f: f.lot_id)
    if not members:
        raise ValueError("cannot build a zone from an empty cluster")
    return ParkingClusterZone(
        zone_id,
        tuple(f.lot_id for f in members),
        np.array([[f.x, f.y] for f in members]),
        float(radius),
        float(p),
    )


def build_zones(
    features: Sequence[LotFeature], assignments, radius: float = DEFAULT_RADIUS, p: float = DEFAULT_P
) -> list[ParkingClusterZone]:
    """One zone per nonempty cluster label, numbered by their smallest lot id."""
    groups: dict[int, list[LotFeature]] = {}
    for f, label in zip(features, np.asarray(assignments)):
        groups.setdefault(int(label), []).append(f)
    ordered = sorted(groups.values(), key=lambda g: min(f.lot_id for f in g))
    width = len(str(len(ordered)))
    return [build_pcz(g, radius, p, zone_id=f"Z{i:0{width}d}") for i, g in enumerate(ordered)]


def contains(zone: ParkingClusterZone, q) -> bool:
    """Closed-region membership: min distance to a member lot <= radius."""
    return bool(contains_many(zone, np.asarray(q, dtype=np.float64).reshape(1, 2))[0])


def contains_many(zone: ParkingClusterZone, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    out = np.zeros(len(pts), dtype=bool)
    # chunk to bound the [n, m, 2] temporary
    for s in range(0, len(pts), 20000):
        d = minkowski_to_centers(pts[s : s + 20000], zone.centers, zone.p)
        out[s : s + 20000] = (d <= zone.radius).any(axis=1)
    return out


def save_zones(zones: Sequence[ParkingClusterZone], path, extra: dict | None = None) -> None:
    doc = {**(extra or {}), "zones": [z.to_dict() for z in zones]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_zones(path) -> list[ParkingClusterZone]:
    with open(path) as fh:
        doc = json.load(fh)
    return [ParkingClusterZone.from_dict(z) for z in doc["zones"]]


# -- demand fusion -------------------------------------------------------------------


@dataclass
class TripTable:
    """Column arrays of trips, for vectorized zone membership."""

    mode: np.ndarray  # int index into MODES
    origin: np.ndarray  # [n, 2]
    destination: np.ndarray  # [n, 2], NaN when absent
    depart_time: np.ndarray
    arrive_time: np.ndarray  # -1 when absent
    has_destination: np.ndarray

    @classmethod
    def from_records(cls, trips: Sequence[TripRecord]) -> TripTable:
        n = len(trips)
        mode = np.fromiter((MODES.index(t.mode) for t in trips), dtype=np.int64, count=n)
        origin = np.array([t.origin for t in trips], dtype=np.float64).reshape(n, 2)
        has_d = np.fromiter(
            (t.destination is not None and t.arrive_time is not None for t in trips), dtype=bool, count=n
        )
        dest = np.array(
            [t.destination if h else (np.nan, np.nan) for t, h in zip(trips, has_d)], dtype=np.float64
        ).reshape(n, 2)
        depart = np.fromiter((t.depart_time for t in trips), dtype=np.int64, count=n)
        arrive = np.fromiter(
            (t.arrive_time if h else -1 for t, h in zip(trips, has_d)), dtype=np.int64, count=n
        )
        return cls(mode, origin, dest, depart, arrive, has_d)

    def __len__(self) -> int:
        return len(self.mode)


def fuse_demand(trips, zone: ParkingClusterZone, grid: Grid) -> DemandSeries:
    """Per-mode counts of trip endpoints falling inside ``zone``, binned on ``grid``.

    An endpoint outside the grid's time span is ignored and counted in
    ``ignored``. A trip with both endpoints inside contributes two increments.
    """
    table = trips if isinstance(trips, TripTable) else TripTable.from_records(list(trips))
    channels = np.zeros((grid.length, len(MODES)), dtype=np.int64)
    ignored = 0
    endpoint_sets = [
        (np.ones(len(table), dtype=bool), table.origin, table.depart_time),
        (table.has_destination, table.destination, table.arrive_time),
    ]
    for present, points, times in endpoint_sets:
        idx = np.flatnonzero(present)
        if len(idx) == 0:
            continue
        inside = idx[contains_many(zone, points[idx])]
        offset = times[inside] - grid.start
        bins = np.floor_divide(offset, grid.step)
        ok = (offset >= 0) & (bins < grid.length)
        ignored += int((~ok).sum())
        np.add.at(channels, (bins[ok], table.mode[inside][ok]), 1)
    return DemandSeries(zone.zone_id, grid.start, grid.step, channels, ignored)


def demand_scale(demand: DemandSeries, span: slice | None = None) -> np.ndarray:
    """Per-channel maximum over ``span`` (default: the whole grid); zero maxima map to 1."""
    block = demand.channels if span is None else demand.channels[span]
    scale = block.max(axis=0).astype(np.float64)
    scale[scale <= 0] = 1.0
    return scale


def assemble_frame(
    zone: ParkingClusterZone,
    availability: Mapping[str, AvailabilitySeries],
    demand: DemandSeries,
    target_lot: str,
    scale: np.ndarray | None = None,
) -> FeatureFrame:
    """Stack member-lot availability (target first, then by id) and scaled demand."""
    if target_lot not in zone.lot_ids:
        raise ValueError(f"target lot {target_lot!r} is not in zone {zone.zone_id!r}")
    grid = demand.grid
    order = [target_lot] + sorted(l for l in zone.lot_ids if l != target_lot)
    cols = []
    for lot in order:
        if lot not in availability:
            raise AlignmentError(f"no availability series for lot {lot!r}")
        s = availability[lot]
        if s.grid != grid:
            raise AlignmentError(f"lot {lot!r} grid {s.grid} != demand grid {grid}")
        cols.append(np.asarray(s.values, dtype=np.float64))
    if scale is None:
        scale = demand_scale(demand)
    scale = np.asarray(scale, dtype=np.float64)
    scaled = np.clip(demand.channels / scale, 0.0, 1.0)
    return FeatureFrame(zone.zone_id, grid, tuple(order), np.stack(cols, axis=1), scaled, scale)


# -- frame files ----------------------------------------------------------------------


def write_frame(frame: FeatureFrame, sink, provenance: dict | None = None) -> None:
    """Columnar text: one ``lot:<id>`` column per member lot, then ``demand:<mode>``."""
    comments = {
        **(provenance or {}),
        "zone_id": frame.zone_id,
        "lot_ids": ",".join(frame.lot_ids),
        "step": frame.grid.step,
        "demand_scale": ",".join(repr(float(v)) for v in frame.demand_scale),
    }
    columns = dict(zip(frame.column_names(), frame.matrix().T))
    write_columns(sink, frame.grid.timestamps(), columns, comments)


def read_frame(source) -> FeatureFrame:
    ts, cols, comments = read_columns(source)
    lot_ids = tuple(comments["lot_ids"].split(","))
    step = int(comments["step"])
    if len(ts) > 1 and np.any(np.diff(ts) != step):
        raise AlignmentError("frame timestamps are not evenly spaced")
    grid = Grid(int(ts[0]) if len(ts) else 0, step, len(ts))
    lots = np.stack([cols[f"lot:{l}"] for l in lot_ids], axis=1)
    demand = np.stack([cols[f"demand:{m}"] for m in MODES], axis=1)
    scale = np.array([float(v) for v in comments["demand_scale"].split(",")])
    return FeatureFrame(comments["zone_id"], grid, lot_ids, lots, demand, scale)
