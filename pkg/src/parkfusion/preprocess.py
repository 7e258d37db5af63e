"""Availability series on a fixed grid, denoising, windowing and zone splits."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence, TextIO

import numpy as np

from .ingest import ParkingRecord, format_timestamp, parse_timestamp

if TYPE_CHECKING:
    from .pcz import FeatureFrame, ParkingClusterZone

DEFAULT_STEP = 600
SETTINGS = (1, 2, 3, 4)


class EmptySeriesWarning(UserWarning):
    """A lot had no records on the requested grid."""


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    start: int
    step: int = DEFAULT_STEP
    length: int = 0

    @property
    def end(self) -> int:
        return self.start + self.step * self.length

    def timestamps(self) -> np.ndarray:
        return self.start + self.step * np.arange(self.length, dtype=np.int64)

    @classmethod
    def covering(cls, start: int, end: int, step: int = DEFAULT_STEP) -> Grid:
        return cls(start, step, int((end - start) // step))


@dataclass
class AvailabilitySeries:
    lot_id: str
    start: int
    step: int
    values: np.ndarray
    capacity: int
    empty: bool = False

    @property
    def grid(self) -> Grid:
        return Grid(self.start, self.step, len(self.values))

    def timestamps(self) -> np.ndarray:
        return self.grid.timestamps()


@dataclass
class WindowSample:
    input: np.ndarray
    input_timestamps: np.ndarray
    target: np.ndarray
    target_lot: str
    zone_id: str
    feature_setting: int
    origin: int = 0


@dataclass(frozen=True)
class SplitPlan:
    train_zones: frozenset
    test_zones: frozenset
    train_fraction: float
    seed: int = 0


# -- occupancy -----------------------------------------------------------------


def occupancy_counts(arrivals, departures, instants) -> np.ndarray:
    """Vehicles present at each instant under ``arrival <= t < departure``."""
    a = np.sort(np.asarray(arrivals, dtype=np.int64))
    d = np.sort(np.asarray(departures, dtype=np.int64))
    t = np.asarray(instants, dtype=np.int64)
    return np.searchsorted(a, t, side="right") - np.searchsorted(d, t, side="right")


def build_occupancy_series(
    records: Sequence[ParkingRecord], lot: str, grid: Grid, capacity: int | None = None
) -> AvailabilitySeries:
    """Free-spot fraction of ``lot`` at every grid instant, clamped to [0, 1]."""
    mine = [r for r in records if r.lot_id == lot]
    if len(mine) != len(records):
        raise ValueError(f"records for other lots passed to build_occupancy_series({lot!r})")
    if capacity is None:
        capacity = max((r.capacity for r in mine), default=1)
    if not mine:
        warnings.warn(f"lot {lot!r} has no records; treating it as empty", EmptySeriesWarning)
        return AvailabilitySeries(lot, grid.start, grid.step, np.ones(grid.length), capacity, empty=True)
    counts = occupancy_counts(
        [r.arrival for r in mine], [r.departure for r in mine], grid.timestamps()
    )
    values = np.clip((capacity - counts) / capacity, 0.0, 1.0)
    return AvailabilitySeries(lot, grid.start, grid.step, values, capacity)


def fourier_denoise(
    series: AvailabilitySeries, cutoff_period: float = 3600.0, clamp: bool = True
) -> AvailabilitySeries:
    """Remove every frequency component whose period is shorter than ``cutoff_period`` seconds.

    A cutoff at or below the Nyquist period (two steps) keeps every bin, so the
    series comes back up to round-off.
    """
    values = np.asarray(series.values, dtype=np.float64)
    n = len(values)
    if n < 2:
        raise ValueError("fourier_denoise needs at least two samples")
    spectrum = np.fft.rfft(values)
    k = np.arange(len(spectrum))
    # bin k has period n*step/k; keep k <= n*step/cutoff
    spectrum[k * cutoff_period > n * series.step] = 0.0
    out = np.fft.irfft(spectrum, n=n)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return AvailabilitySeries(series.lot_id, series.start, series.step, out, series.capacity, series.empty)


# -- windows ---------------------------------------------------------------------


def n_windows(length: int, window: int, horizon: int, stride: int) -> int:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if length < window + horizon:
        return 0
    return (length - window - horizon) // stride + 1


def channel_count(setting: int, n_lots: int) -> int:
    return {1: n_lots + 4, 2: 1 + 4, 3: n_lots, 4: 1}[setting]


def select_channels(frame: FeatureFrame, setting: int, target_lot: str | None = None, pad_lots: int | None = None) -> np.ndarray:
    """Frame columns used under a feature setting.

    1: all zone lots + demand; 2: target lot + demand; 3: all zone lots;
    4: target lot only. The target lot is always column 0. ``pad_lots``
    zero-pads the lot block to a fixed width so zones of different sizes
    share one channel count.
    """
    if setting not in SETTINGS:
        raise ValueError(f"feature setting must be one of {SETTINGS}, got {setting}")
    lots = frame.lot_channels
    ids = list(frame.lot_ids)
    if target_lot is not None and ids[0] != target_lot:
        if target_lot not in ids:
            raise ValueError(f"lot {target_lot!r} is not in zone {frame.zone_id!r}")
        j = ids.index(target_lot)
        order = [j] + [i for i in range(len(ids)) if i != j]
        lots = lots[:, order]
    if setting in (2, 4):
        lots = lots[:, :1]
    elif pad_lots is not None:
        if lots.shape[1] > pad_lots:
            raise ValueError(f"zone {frame.zone_id!r} has {lots.shape[1]} lots, more than pad_lots={pad_lots}")
        lots = np.pad(lots, ((0, 0), (0, pad_lots - lots.shape[1])))
    if setting in (1, 2):
        return np.concatenate([lots, frame.demand_channels], axis=1)
    return np.ascontiguousarray(lots)


def window_arrays(
    frame: FeatureFrame,
    target_lot: str,
    window: int = 432,
    horizon: int = 144,
    stride: int = 1,
    setting: int = 1,
    pad_lots: int | None = None,
    origins: Sequence[int] | None = None,
):
    """Stacked ``(inputs [N,L,C], timestamps [N,L], targets [N,H], origins [N])``.

    Inputs are read-only views into the frame where possible.
    """
    data = select_channels(frame, setting, target_lot, pad_lots)
    target_col = frame.lot_channels[:, list(frame.lot_ids).index(target_lot)]
    ts = frame.grid.timestamps()
    length = len(ts)
    if origins is None:
        count = n_windows(length, window, horizon, stride)
        origins = np.arange(count, dtype=np.int64) * stride
    origins = np.asarray(origins, dtype=np.int64)
    c = data.shape[1]
    if len(origins) == 0:
        return (np.zeros((0, window, c)), np.zeros((0, window), np.int64), np.zeros((0, horizon)), origins)
    if origins.min() < 0 or origins.max() + window + horizon > length:
        raise ValueError("window origins run past the frame")
    x_all = np.lib.stride_tricks.sliding_window_view(data, window, axis=0)  # [T-L+1, C, L]
    x = np.swapaxes(x_all[origins], 1, 2)
    t = np.lib.stride_tricks.sliding_window_view(ts, window)[origins]
    y = np.lib.stride_tricks.sliding_window_view(target_col[window:], horizon)[origins]
    return x, t, y, origins


def make_windows(
    frame: FeatureFrame,
    target_lot: str,
    L: int = 432,
    H: int = 144,
    stride: int = 1,
    setting: int = 1,
    pad_lots: int | None = None,
) -> list[WindowSample]:
    """Supervised pairs at origins 0, stride, 2*stride, ...

    Input covers ``[o, o+L)`` and the target is the target lot's availability
    over ``[o+L, o+L+H)``.
    """
    if n_windows(frame.grid.length, L, H, stride) == 0:
        warnings.warn(
            f"frame of length {frame.grid.length} is shorter than L+H={L + H}; no windows",
            stacklevel=2,
        )
        return []
    x, t, y, origins = window_arrays(frame, target_lot, L, H, stride, setting, pad_lots)
    return [
        WindowSample(x[i], t[i], y[i], target_lot, frame.zone_id, setting, int(origins[i]))
        for i in range(len(origins))
    ]


def stack_windows(samples: Sequence[WindowSample]):
    x = np.stack([s.input for s in samples])
    t = np.stack([s.input_timestamps for s in samples])
    y = np.stack([s.target for s in samples])
    return x, t, y


# -- split ------------------------------------------------------------------------


def split_by_zone(zones: Sequence[ParkingClusterZone], fraction: float = 0.7, seed: int = 0) -> SplitPlan:
    """Shuffle zones with a seeded RNG; the first ceil(fraction*n) go to training.

    At least one zone is always left for testing.
    """
    ids = [z.zone_id if hasattr(z, "zone_id") else z for z in zones]
    if len(ids) < 2:
        raise SplitError(f"need at least 2 zones to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise SplitError("zone ids must be unique")
    if not 0.0 < fraction < 1.0:
        raise SplitError(f"train fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_train = min(math.ceil(round(fraction * len(ids), 9)), len(ids) - 1)
    return SplitPlan(frozenset(order[:n_train]), frozenset(order[n_train:]), fraction, seed)


# -- columnar text --------------------------------------------------------------------


def write_columns(sink: TextIO, timestamps, columns: dict[str, np.ndarray], comments: dict | None = None) -> None:
    """Write ``timestamp,<name>,...`` rows; optional ``# key=value`` header lines."""
    for key, value in (comments or {}).items():
        sink.write(f"# {key}={value}\n")
    writer = csv.writer(sink, lineterminator="\n")
    names = list(columns)
    writer.writerow(["timestamp", *names])
    arrays = [np.asarray(columns[n]) for n in names]
    for i, t in enumerate(np.asarray(timestamps)):
        writer.writerow([format_timestamp(int(t)), *(repr(float(a[i])) for a in arrays)])


def read_columns(source: TextIO):
    """Inverse of :func:`write_columns`: ``(timestamps, {name: values}, comments)``."""
    comments = {}
    lines = []
    for line in source:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            comments[key.strip()] = value.strip()
        else:
            lines.append(line)
    reader = csv.reader(lines)
    header = next(reader)
    rows = list(reader)
    ts = np.array([parse_timestamp(r[0]) for r in rows], dtype=np.int64)
    cols = {name: np.array([float(r[i + 1]) for r in rows]) for i, name in enumerate(header[1:])}
    return ts, cols, comments
