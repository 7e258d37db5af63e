"""Synthetic city: parking lots, stays and multi-modal trips with known structure.

Each lot has a latent occupancy fraction

    lam(t) = base + A_d * sin(2*pi*(t - phase)/24h) + A_w * sin(2*pi*t/168h) + z(t) + e(t)

where ``z`` is a zone-wide Ornstein-Uhlenbeck process (stationary sd
``noise_sigma``) and ``e`` a per-lot one (sd ``lot_noise_sigma``). Stays
realize ``lam`` either as a Poisson arrival stream with log-normal durations
(``realization="poisson"``) or by tracking ``round(capacity * lam)`` exactly
at every minute (``realization="exact"``). A lot never holds more vehicles
than its capacity; arrivals that would overflow it are turned away.

A fraction ``kappa`` of accepted arrivals emits one trip that ends inside the
buffer radius of the lot shortly before the car parks (bus trips only carry a
boarding origin inside the radius). Independent background trips per mode
are added around every cluster.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import (
    MODES,
    ParkingRecord,
    TripRecord,
    from_seconds,
    parse_timestamp,
    write_lot_locations,
    write_parking_records,
    write_trip_records,
)

MINUTE = 60
HOUR = 3600
DAY = 86400
WEEK = 7 * DAY
_EPOCH = dt.date(1970, 1, 1)


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_lots: int = 40
    n_clusters: int = 8
    n_days: int = 30
    step: int = 600
    start: str = "2024-01-01T00:00:00"
    capacity_range: tuple[float, float] = (80.0, 240.0)
    cluster_spacing: float = 3000.0
    cluster_spread: float = 250.0
    base_range: tuple[float, float] = (0.30, 0.50)
    daily_amplitude: tuple[float, float] = (0.15, 0.30)
    weekly_amplitude: tuple[float, float] = (0.03, 0.08)
    phase_hours: tuple[float, float] = (0.0, 0.0)
    noise_sigma: float = 0.08
    noise_tau_hours: float = 48.0
    lot_noise_sigma: float = 0.03
    lot_noise_tau_hours: float = 3.0
    realization: str = "poisson"
    stay_median_hours: float = 1.5
    stay_log_sd: float = 0.6
    kappa: float = 0.6
    lag_minutes: tuple[float, float] = (0.0, 20.0)
    travel_minutes: tuple[float, float] = (5.0, 45.0)
    radius: float = 500.0
    p: float = 1.0
    mode_weights: dict = field(
        default_factory=lambda: {"metro": 0.35, "bus": 0.25, "ride_hailing": 0.2, "taxi": 0.2}
    )
    background_rates: dict = field(
        default_factory=lambda: {"metro": 6.0, "bus": 4.0, "ride_hailing": 3.0, "taxi": 3.0}
    )

    def __post_init__(self):
        for name in ("capacity_range", "base_range", "daily_amplitude", "weekly_amplitude", "phase_hours", "lag_minutes", "travel_minutes"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not 0.0 <= self.kappa <= 1.0:
            raise SynthConfigError(f"kappa must be in [0, 1], got {self.kappa}")
        if self.n_lots < 1 or not 1 <= self.n_clusters <= self.n_lots:
            raise SynthConfigError("need 1 <= n_clusters <= n_lots")
        if self.n_days < 1:
            raise SynthConfigError("n_days must be >= 1")
        if self.realization not in ("poisson", "exact"):
            raise SynthConfigError("realization must be 'poisson' or 'exact'")
        if set(self.mode_weights) != set(MODES) or set(self.background_rates) != set(MODES):
            raise SynthConfigError(f"mode weights and background rates need exactly the modes {MODES}")
        if any(v < 0 for v in self.mode_weights.values()) or any(v < 0 for v in self.background_rates.values()):
            raise SynthConfigError("rates and weights must be >= 0")
        if self.kappa > 0 and sum(self.mode_weights.values()) <= 0:
            raise SynthConfigError("mode weights sum to zero")
        if min(self.noise_sigma, self.lot_noise_sigma, self.radius, self.cluster_spread) < 0:
            raise SynthConfigError("noise levels, radius and spread must be >= 0")
        if self.capacity_range[0] < 1 or self.capacity_range[1] < self.capacity_range[0]:
            raise SynthConfigError("capacity range must satisfy 1 <= low <= high")
        if self.lag_minutes[0] < 0 or self.lag_minutes[1] < self.lag_minutes[0]:
            raise SynthConfigError("lag range must satisfy 0 <= low <= high")
        peak = self.base_range[1] + self.daily_amplitude[1] + self.weekly_amplitude[1]
        if peak > 1.0:
            raise SynthConfigError(
                f"latent occupancy can reach {peak:.3f} of capacity; lower base or amplitudes so the peak stays <= 1"
            )
        if self.p < 1:
            raise SynthConfigError("Minkowski order p must be >= 1")
        parse_timestamp(self.start)

    @property
    def start_seconds(self) -> int:
        return parse_timestamp(self.start)

    @property
    def end_seconds(self) -> int:
        return self.start_seconds + self.n_days * DAY

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SynthConfigError(f"unknown synth option(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class LotTruth:
    lot_id: str
    cluster: int
    x: float
    y: float
    capacity: int
    base: float
    daily_amplitude: float
    weekly_amplitude: float
    phase_hours: float


@dataclass
class SynthData:
    config: SynthConfig
    lots: list[LotTruth]
    parking: list[ParkingRecord]
    trips: dict[str, list[TripRecord]]
    manifest: dict


# -- helpers ------------------------------------------------------------------------


def _ou(rng: np.random.Generator, n: int, sigma: float, tau: float, dt_s: float) -> np.ndarray:
    """Stationary Ornstein-Uhlenbeck path with sd ``sigma`` and correlation time ``tau`` seconds."""
    if sigma == 0 or n == 0:
        return np.zeros(n)
    a = math.exp(-dt_s / tau)
    shocks = rng.standard_normal(n) * sigma * math.sqrt(1 - a * a)
    out = np.empty(n)
    out[0] = rng.standard_normal() * sigma
    for k in range(1, n):
        out[k] = a * out[k - 1] + shocks[k]
    return out


def sample_in_ball(rng: np.random.Generator, center, radius: float, p: float, n: int = 1) -> np.ndarray:
    """Uniform points in the closed Minkowski ball, by rejection from the bounding square.

    ``center`` is one point or an [n, 2] array of per-sample centers.
    """
    center = np.asarray(center, dtype=np.float64)
    out = np.empty((0, 2))
    while len(out) < n:
        cand = rng.uniform(-radius, radius, size=(2 * (n - len(out)) + 4, 2))
        if math.isinf(p):
            ok = np.ones(len(cand), dtype=bool)
        else:
            ok = (np.abs(cand) ** p).sum(axis=1) <= radius**p
        out = np.vstack([out, cand[ok]])
    return center + out[:n]


def _layout(config: SynthConfig, rng: np.random.Generator) -> list[LotTruth]:
    k = config.n_clusters
    cols = math.ceil(math.sqrt(k))
    centers = []
    for c in range(k):
        gx, gy = c % cols, c // cols
        jitter = rng.uniform(-0.1, 0.1, size=2) * config.cluster_spacing
        centers.append((gx * config.cluster_spacing + jitter[0], gy * config.cluster_spacing + jitter[1]))
    params = []
    for c in range(k):
        params.append(
            dict(
                capacity=rng.uniform(*config.capacity_range),
                base=rng.uniform(*config.base_range),
                a_d=rng.uniform(*config.daily_amplitude),
                a_w=rng.uniform(*config.weekly_amplitude),
                phase=rng.uniform(*config.phase_hours),
            )
        )
    width = len(str(config.n_lots - 1))
    lots = []
    lo_cap, hi_cap = config.capacity_range
    lo_b, hi_b = config.base_range
    for i in range(config.n_lots):
        c = i % k
        cp = params[c]
        xy = np.asarray(centers[c]) + rng.normal(0.0, config.cluster_spread, size=2)
        cap = int(round(np.clip(cp["capacity"] * rng.uniform(0.9, 1.1), lo_cap, hi_cap)))
        base = float(np.clip(cp["base"] + rng.uniform(-0.02, 0.02), lo_b, hi_b))
        lots.append(
            LotTruth(
                lot_id=f"P{i:0{width}d}",
                cluster=c,
                x=round(float(xy[0]), 1),
                y=round(float(xy[1]), 1),
                capacity=max(cap, 1),
                base=base,
                daily_amplitude=float(cp["a_d"]),
                weekly_amplitude=float(cp["a_w"]),
                phase_hours=float(cp["phase"]),
            )
        )
    return lots


def latent_occupancy(lot: LotTruth, t: np.ndarray) -> np.ndarray:
    """Noise-free latent occupancy fraction at absolute times ``t`` (seconds)."""
    t = np.asarray(t, dtype=np.float64)
    daily = lot.daily_amplitude * np.sin(2 * np.pi * (t - lot.phase_hours * HOUR) / DAY)
    weekly = lot.weekly_amplitude * np.sin(2 * np.pi * t / WEEK)
    return lot.base + daily + weekly


def _stay_seconds(rng, config: SynthConfig, n: int) -> np.ndarray:
    med = config.stay_median_hours * HOUR
    s = np.exp(np.log(med) + config.stay_log_sd * rng.standard_normal(n))
    return np.maximum(np.round(s), MINUTE).astype(np.int64)


def _realize_poisson(rng, config, lot, t_fine, lam, mean_stay):
    """Arrival-rate realization: r = cap * (dlam/dt + lam / E[S]), turning away overflow."""
    cap = lot.capacity
    rate = cap * np.maximum(np.gradient(lam, MINUTE) + lam / mean_stay, 0.0)
    counts = rng.poisson(rate * MINUTE)
    total = int(counts.sum())
    arrivals = np.repeat(t_fine, counts) + rng.integers(0, MINUTE, size=total)
    arrivals.sort(kind="stable")
    stays = _stay_seconds(rng, config, total)
    present: list[int] = []
    out = []
    for a, s in zip(arrivals.tolist(), stays.tolist()):
        while present and present[0] <= a:
            heapq.heappop(present)
        if len(present) >= cap:
            continue
        heapq.heappush(present, a + s)
        out.append((a, a + s))
    return out


def _realize_exact(rng, config, lot, t_fine, lam, mean_stay):
    """Tracking realization: exactly round(cap * lam) vehicles present at every minute."""
    cap = lot.capacity
    target = np.round(cap * lam).astype(np.int64)
    present: list[tuple[int, int]] = []  # (departure, index into out)
    out: list[list[int]] = []
    for t, n in zip(t_fine.tolist(), target.tolist()):
        while present and present[0][0] <= t:
            heapq.heappop(present)
        excess = len(present) - n
        if excess > 0:
            # the vehicles due to leave soonest leave now
            for _ in range(excess):
                _, idx = heapq.heappop(present)
                out[idx][1] = t
        elif excess < 0:
            for s in _stay_seconds(rng, config, -excess).tolist():
                out.append([t, t + s])
                heapq.heappush(present, (t + s, len(out) - 1))
    return [tuple(v) for v in out]


# -- generation ---------------------------------------------------------------------


def generate(config: SynthConfig, out_dir=None) -> SynthData:
    """Draw the whole city. With ``out_dir`` the files are written as well."""
    rng = np.random.default_rng(config.seed)
    lots = _layout(config, rng)
    start, end = config.start_seconds, config.end_seconds
    warmup = DAY
    t_fine = np.arange(start - warmup, end, MINUTE, dtype=np.int64)
    mean_stay = config.stay_median_hours * HOUR * math.exp(config.stay_log_sd**2 / 2)

    zone_noise = [
        _ou(rng, len(t_fine), config.noise_sigma, config.noise_tau_hours * HOUR, MINUTE) for _ in range(config.n_clusters)
    ]
    realize = _realize_poisson if config.realization == "poisson" else _realize_exact
    weights = np.array([config.mode_weights[m] for m in MODES], dtype=np.float64)
    weights = weights / weights.sum() if weights.sum() > 0 else weights
    bbox_lo = np.array([min(l.x for l in lots), min(l.y for l in lots)]) - config.cluster_spacing / 2
    bbox_hi = np.array([max(l.x for l in lots), max(l.y for l in lots)]) + config.cluster_spacing / 2

    parking: list[ParkingRecord] = []
    trips: dict[str, list[TripRecord]] = {m: [] for m in MODES}
    coupled = 0
    for lot in lots:
        lot_noise = _ou(rng, len(t_fine), config.lot_noise_sigma, config.lot_noise_tau_hours * HOUR, MINUTE)
        lam = np.clip(latent_occupancy(lot, t_fine) + zone_noise[lot.cluster] + lot_noise, 0.0, 1.0)
        stays = realize(rng, config, lot, t_fine, lam, mean_stay)
        kept = [(a, d) for a, d in stays if d > start and a < end]
        for a, d in kept:
            a2, d2 = max(a, start), min(d, end)
            if d2 <= a2:
                continue
            parking.append(ParkingRecord(lot.lot_id, a2, d2, _EPOCH + dt.timedelta(days=a2 // DAY), lot.capacity))
        # trips for the kappa fraction of real arrivals inside the period
        arrivals = np.array([a for a, _ in kept if a >= start], dtype=np.int64)
        emit = arrivals[rng.random(len(arrivals)) < config.kappa]
        if len(emit) == 0:
            continue
        modes = rng.choice(len(MODES), size=len(emit), p=weights)
        lags = np.round(rng.uniform(*config.lag_minutes, size=len(emit)) * MINUTE).astype(np.int64)
        travel = np.round(rng.uniform(*config.travel_minutes, size=len(emit)) * MINUTE).astype(np.int64)
        near = _near_points(rng, (lot.x, lot.y), config, len(emit)).tolist()
        far = rng.uniform(bbox_lo, bbox_hi, size=(len(emit), 2)).round(1).tolist()
        t_ends = (emit - lags).tolist()
        travel = travel.tolist()
        for j in range(len(emit)):
            mode = MODES[modes[j]]
            t_end = t_ends[j]
            if mode == "bus":
                rec = TripRecord(mode, tuple(near[j]), None, t_end, None)
            else:
                t0 = t_end - travel[j]
                if t0 < start:
                    continue
                rec = TripRecord(mode, tuple(far[j]), tuple(near[j]), t0, t_end)
            if rec.depart_time < start:
                continue
            trips[mode].append(rec)
            coupled += 1

    background = _background(rng, config, lots, bbox_lo, bbox_hi)
    for mode, recs in background.items():
        trips[mode].extend(recs)
    parking.sort(key=lambda r: (r.arrival, r.lot_id, r.departure))
    for mode in MODES:
        trips[mode].sort(key=lambda r: (r.depart_time, r.origin, r.arrive_time or 0))

    manifest = {
        "config": config.to_dict(),
        "lots": [dataclasses.asdict(l) for l in lots],
        "cluster_labels": {l.lot_id: l.cluster for l in lots},
        "kappa": config.kappa,
        "lag_minutes": {"distribution": "uniform", "low": config.lag_minutes[0], "high": config.lag_minutes[1]},
        "waveform": {
            "daily_period_hours": 24,
            "weekly_period_hours": 168,
            "noise_sigma": config.noise_sigma,
            "noise_tau_hours": config.noise_tau_hours,
            "lot_noise_sigma": config.lot_noise_sigma,
            "lot_noise_tau_hours": config.lot_noise_tau_hours,
        },
        "span": {"start": config.start, "end": from_seconds(end).isoformat(timespec="seconds"), "step": config.step},
        "counts": {
            "parking": len(parking),
            "coupled_trips": coupled,
            **{f"trips_{m}": len(trips[m]) for m in MODES},
        },
        "files": dataset_files(),
    }
    data = SynthData(config, lots, parking, trips, manifest)
    if out_dir is not None:
        write_dataset(data, out_dir)
    return data


def _near_points(rng, center, config: SynthConfig, n: int) -> np.ndarray:
    # stay a hair inside the radius so rounding to 0.1 m cannot push a point out
    pts = sample_in_ball(rng, center, max(config.radius - 1.0, 0.0), config.p, n)
    return pts.round(1)


def _background(rng, config: SynthConfig, lots: list[LotTruth], lo, hi) -> dict[str, list[TripRecord]]:
    start, end = config.start_seconds, config.end_seconds
    hours = (end - start) / HOUR
    by_cluster: dict[int, list[LotTruth]] = {}
    for lot in lots:
        by_cluster.setdefault(lot.cluster, []).append(lot)
    out: dict[str, list[TripRecord]] = {m: [] for m in MODES}
    for c in sorted(by_cluster):
        members = by_cluster[c]
        for mode in MODES:
            n = int(rng.poisson(config.background_rates[mode] * hours))
            if n == 0:
                continue
            times = np.sort(rng.integers(start, end, size=n)).tolist()
            anchor = rng.integers(len(members), size=n)
            inbound = rng.random(n) < 0.5
            travel = np.round(rng.uniform(*config.travel_minutes, size=n) * MINUTE).astype(np.int64).tolist()
            centers = np.array([(members[a].x, members[a].y) for a in anchor])
            near = _near_points(rng, centers, config, n).tolist()
            far = rng.uniform(lo, hi, size=(n, 2)).round(1).tolist()
            for j in range(n):
                t0 = times[j]
                if mode == "bus":
                    out[mode].append(TripRecord(mode, tuple(near[j]), None, t0, None))
                    continue
                t1 = t0 + travel[j]
                if t1 > end:
                    continue
                o, d = (tuple(far[j]), tuple(near[j])) if inbound[j] else (tuple(near[j]), tuple(far[j]))
                out[mode].append(TripRecord(mode, o, d, t0, t1))
    return out


# -- files --------------------------------------------------------------------------


def dataset_files() -> dict:
    return {
        "parking": "parking.csv",
        "lots": "lots.csv",
        "trips": {m: f"trips_{m}.csv" for m in MODES},
        "manifest": "manifest.json",
    }


def write_dataset(data: SynthData, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = dataset_files()
    with open(out / files["parking"], "w", newline="") as fh:
        write_parking_records(data.parking, fh)
    with open(out / files["lots"], "w", newline="") as fh:
        write_lot_locations({l.lot_id: (l.x, l.y) for l in data.lots}, fh)
    for m in MODES:
        with open(out / files["trips"][m], "w", newline="") as fh:
            write_trip_records(data.trips[m], fh)
    (out / files["manifest"]).write_text(json.dumps(data.manifest, indent=2, sort_keys=True) + "\n")
    return files


def lot_locations(manifest: dict) -> dict[str, tuple[float, float]]:
    return {l["lot_id"]: (float(l["x"]), float(l["y"])) for l in manifest["lots"]}


def span_of(manifest: dict) -> tuple[int, int]:
    return parse_timestamp(manifest["span"]["start"]), parse_timestamp(manifest["span"]["end"])


def start_date(config: SynthConfig) -> dt.date:
    return from_seconds(config.start_seconds).date()
