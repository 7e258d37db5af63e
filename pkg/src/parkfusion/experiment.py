"""Experiment configuration and the data pipeline shared by the CLI and tests.

One experiment is one YAML file with the sections ``paths``, ``synth``,
``preprocess``, ``clustering``, ``model``, ``training`` and ``evaluation``.
Missing keys take the defaults below.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from .baselines import ar_fit, ar_predict_batch, ha_fit, ha_predict, nlinear_fit, nlinear_predict
from .evaluation import EvalSet
from .ingest import MODES, ParkingRecord, parse_lot_locations, parse_parking_records, parse_trip_records, validate_and_drop
from .model import ModelConfig, TrainedModel, train
from .pcz import (
    FEATURE_NAMES,
    FeatureFrame,
    ParkingClusterZone,
    TripTable,
    assemble_frame,
    build_zones,
    clustering_matrix,
    default_k,
    demand_scale,
    fuse_demand,
    kmeans,
    lot_flows,
)
from .preprocess import (
    Grid,
    SplitPlan,
    build_occupancy_series,
    fourier_denoise,
    n_windows,
    split_by_zone,
    window_arrays,
)
from .synth import dataset_files

log = logging.getLogger(__name__)

DAY = 86400


class ConfigError(ValueError):
    """The experiment configuration is malformed."""


class DataError(RuntimeError):
    """Input data or an upstream artifact is missing or unusable."""


DEFAULTS: dict[str, Any] = {
    "paths": {
        "data_dir": None,
        "parking": None,
        "lots": None,
        "trips": None,
        "manifest": None,
    },
    "synth": {},
    "preprocess": {
        "step": 600,
        "denoise": True,
        "cutoff_period": 3600.0,
        "window": 432,
        "horizon": 144,
        "stride": 72,
        "test_stride": 36,
        "history_days": 14,
    },
    "clustering": {
        "k": None,
        "p": 1.0,
        "radius": 500.0,
        "features": list(FEATURE_NAMES),
        "seed": 0,
        "n_init": 4,
        "max_iter": 300,
    },
    "model": {
        "d_model": 32,
        "n_heads": 1,
        "n_layers": 1,
        "d_ff": 64,
        "calendar_features": ["hour_of_day", "day_of_week"],
        "pooling": "mean",
        "anchor": "seasonal",
        "period": 144,
        "dropout": 0.0,
        "dtype": "float32",
    },
    "training": {
        "epochs": 3,
        "batch_size": 32,
        "lr": 2e-3,
        "clip_norm": 1.0,
        "seed": 0,
        "seeds": [0, 1, 2],
        "nlinear_ridge": 1e-2,
    },
    "evaluation": {
        "settings": [1, 2, 3, 4],
        "horizons": [1, 6, 36, 72, 144],
        "mape_eps": 1e-3,
        "split_fraction": 0.7,
        "split_seed": 0,
        "ar_p": 6,
        "ar_d": 1,
    },
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base and where and where != "synth":
            raise ConfigError(f"unknown option {where}.{key}")
        if key not in base and not where:
            raise ConfigError(f"unknown config section {key!r}")
        if isinstance(base.get(key), dict) and isinstance(value, dict) and key != "trips":
            out[key] = _merge(base[key], value, key if not where else f"{where}.{key}")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path = Path(".")
    out_dir: Path = Path("out")

    @classmethod
    def from_dict(cls, d: dict | None = None, base_dir=".") -> ExperimentConfig:
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping of sections")
        cfg = cls(_merge(DEFAULTS, d), Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(doc, path.parent)

    def with_overrides(self, assignments: list[str] = (), seed: int | None = None) -> ExperimentConfig:
        """Apply ``section.key=value`` strings (values parsed as YAML) and a seed override."""
        raw = copy.deepcopy(self.raw)
        for item in assignments:
            key, sep, value = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            parts = key.strip().split(".")
            node = raw
            for part in parts[:-1]:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown option {key}")
                node = node[part]
            if parts[-1] not in node and parts[0] != "synth":
                raise ConfigError(f"unknown option {key}")
            node[parts[-1]] = yaml.safe_load(value)
        if seed is not None:
            raw["training"]["seed"] = seed
            raw["training"]["seeds"] = [seed]
            raw["synth"]["seed"] = seed
        cfg = ExperimentConfig(raw, self.base_dir, self.out_dir)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        pre = self.raw["preprocess"]
        for key in ("step", "window", "horizon", "stride", "test_stride"):
            if not isinstance(pre[key], int) or pre[key] < 1:
                raise ConfigError(f"preprocess.{key} must be a positive integer")
        if pre["step"] > DAY or DAY % pre["step"]:
            raise ConfigError("preprocess.step must divide one day")
        ev = self.raw["evaluation"]
        if not ev["settings"] or any(s not in (1, 2, 3, 4) for s in ev["settings"]):
            raise ConfigError("evaluation.settings must be drawn from 1..4")
        for h in ev["horizons"]:
            if not 1 <= h <= pre["horizon"]:
                raise ConfigError(f"evaluation horizon {h} outside 1..{pre['horizon']}")
        if not 0 < ev["split_fraction"] < 1:
            raise ConfigError("evaluation.split_fraction must be in (0, 1)")
        cl = self.raw["clustering"]
        if cl["p"] < 1:
            raise ConfigError("clustering.p must be >= 1")
        bad = set(cl["features"]) - set(FEATURE_NAMES)
        if bad or not cl["features"]:
            raise ConfigError(f"clustering.features must be a nonempty subset of {FEATURE_NAMES}")
        tr = self.raw["training"]
        if not tr["seeds"]:
            raise ConfigError("training.seeds must not be empty")
        try:
            self.model_config(1)
        except ValueError as exc:
            raise ConfigError(f"model section: {exc}") from exc

    # -- derived views ------------------------------------------------------------

    @property
    def pre(self) -> dict:
        return self.raw["preprocess"]

    @property
    def clustering(self) -> dict:
        return self.raw["clustering"]

    @property
    def training(self) -> dict:
        return self.raw["training"]

    @property
    def evaluation(self) -> dict:
        return self.raw["evaluation"]

    def model_config(self, channels: int, seed: int = 0) -> ModelConfig:
        m = self.raw["model"]
        return ModelConfig(
            input_channels=channels,
            window=self.pre["window"],
            horizon=self.pre["horizon"],
            d_model=m["d_model"],
            n_heads=m["n_heads"],
            n_layers=m["n_layers"],
            d_ff=m["d_ff"],
            calendar_features=tuple(m["calendar_features"]),
            seed=seed,
            pooling=m["pooling"],
            anchor=m["anchor"],
            period=m["period"],
            dropout=m["dropout"],
            dtype=m["dtype"],
        )

    def data_path(self, name: str, mode: str | None = None) -> Path:
        paths = self.raw["paths"]
        # data lives beside the other artifacts unless the config points elsewhere
        data_dir = self.base_dir / paths["data_dir"] if paths["data_dir"] else self.out_dir / "data"
        files = dataset_files()
        if name == "trips":
            explicit = (paths.get("trips") or {}).get(mode)
            return self.base_dir / explicit if explicit else data_dir / files["trips"][mode]
        explicit = paths.get(name)
        return self.base_dir / explicit if explicit else data_dir / files[name]

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def provenance(self, seed: int | None = None) -> dict:
        return {
            "config_hash": self.hash(),
            "seed": self.training["seed"] if seed is None else seed,
            "tool_version": __version__,
        }


# -- loading ----------------------------------------------------------------------------


@dataclass
class Dataset:
    parking: dict[str, list[ParkingRecord]]
    locations: dict[str, tuple[float, float]]
    trips: TripTable
    span: tuple[int, int]
    drops: dict


def _open(path: Path, what: str):
    if not path.exists():
        raise DataError(f"{what} file {path} not found; run the 'synth' command or set paths.{what}")
    return open(path, newline="")


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    with _open(cfg.data_path("parking"), "parking") as fh:
        parking, p_report = validate_and_drop(parse_parking_records(fh))
    with _open(cfg.data_path("lots"), "lots") as fh:
        locations = parse_lot_locations(fh)
    trips = []
    drops = {"parking": dataclasses.asdict(p_report)}
    for mode in MODES:
        with _open(cfg.data_path("trips", mode), "trips") as fh:
            kept, report = validate_and_drop(parse_trip_records(fh, mode=mode))
        trips.extend(kept)
        drops[mode] = dataclasses.asdict(report)
    if not parking:
        raise DataError("no valid parking records")
    by_lot: dict[str, list[ParkingRecord]] = {}
    for r in parking:
        by_lot.setdefault(r.lot_id, []).append(r)
    unknown = sorted(set(by_lot) - set(locations))
    if unknown:
        raise DataError(f"lots without a location: {unknown[:5]}")
    step = cfg.pre["step"]
    first = min(r.arrival for r in parking)
    last = max(r.departure for r in parking)
    start = first - first % DAY
    end = last - last % step
    return Dataset(by_lot, locations, TripTable.from_records(trips), (start, end), drops)


def dataset_from_synth(synth_data, cfg: ExperimentConfig) -> Dataset:
    """Same as :func:`load_dataset` but straight from generated records, skipping files."""
    parking, p_report = validate_and_drop(synth_data.parking)
    trips = []
    drops = {"parking": dataclasses.asdict(p_report)}
    for mode in MODES:
        kept, report = validate_and_drop(synth_data.trips[mode])
        trips.extend(kept)
        drops[mode] = dataclasses.asdict(report)
    by_lot: dict[str, list[ParkingRecord]] = {}
    for r in parking:
        by_lot.setdefault(r.lot_id, []).append(r)
    locations = {l.lot_id: (l.x, l.y) for l in synth_data.lots}
    step = cfg.pre["step"]
    first = min(r.arrival for r in parking)
    last = max(r.departure for r in parking)
    start = first - first % DAY
    return Dataset(by_lot, locations, TripTable.from_records(trips), (start, last - last % step), drops)


# -- clustering --------------------------------------------------------------------------


def cluster_lots(data: Dataset, cfg: ExperimentConfig) -> tuple[list[ParkingClusterZone], dict]:
    cl = cfg.clustering
    lots = sorted(data.parking)
    features = [lot_flows(data.parking[l], data.locations[l], data.span) for l in lots]
    k = cl["k"] if cl["k"] is not None else default_k(len(lots))
    if not 1 <= k <= len(lots):
        raise ConfigError(f"clustering.k={k} must be between 1 and the number of lots ({len(lots)})")
    points = clustering_matrix(features, cl["features"])
    result = kmeans(points, k, seed=cl["seed"], max_iter=cl["max_iter"], n_init=cl["n_init"])
    zones = build_zones(features, result.assignments, cl["radius"], cl["p"])
    report = {
        "k": k,
        "inertia": result.inertia,
        "iterations": result.n_iter,
        "zone_sizes": {z.zone_id: len(z.lot_ids) for z in zones},
        "assignments": {l: int(a) for l, a in zip(lots, result.assignments)},
    }
    return zones, report


# -- frames ---------------------------------------------------------------------------------


def dataset_grid(data: Dataset, cfg: ExperimentConfig) -> Grid:
    return Grid.covering(data.span[0], data.span[1], cfg.pre["step"])


def history_end_index(grid: Grid, cfg: ExperimentConfig) -> int:
    return min(grid.length, cfg.pre["history_days"] * DAY // grid.step)


def build_frames(data: Dataset, zones: list[ParkingClusterZone], cfg: ExperimentConfig) -> dict[str, FeatureFrame]:
    """One frame per zone targeting its first lot; other targets reorder columns."""
    grid = dataset_grid(data, cfg)
    hist = history_end_index(grid, cfg)
    availability = {}
    for zone in zones:
        for lot in zone.lot_ids:
            series = build_occupancy_series(data.parking[lot], lot, grid)
            if cfg.pre["denoise"]:
                series = fourier_denoise(series, cfg.pre["cutoff_period"])
            availability[lot] = series
    frames = {}
    for zone in zones:
        demand = fuse_demand(data.trips, zone, grid)
        # demand is scaled by its maximum over the history span only
        scale = demand_scale(demand, slice(0, hist))
        frames[zone.zone_id] = assemble_frame(zone, availability, demand, zone.lot_ids[0], scale)
    return frames


def pad_width(frames: dict[str, FeatureFrame]) -> int:
    return max(len(f.lot_ids) for f in frames.values())


def plan_split(frames: dict[str, FeatureFrame], cfg: ExperimentConfig) -> SplitPlan:
    ev = cfg.evaluation
    return split_by_zone(sorted(frames), ev["split_fraction"], ev["split_seed"])


def train_arrays(frames, split: SplitPlan, setting: int, cfg: ExperimentConfig):
    """Windows over the whole period for every lot of every training zone."""
    pre = cfg.pre
    pad = pad_width(frames)
    xs, ts, ys = [], [], []
    for zid in sorted(split.train_zones):
        frame = frames[zid]
        for lot in frame.lot_ids:
            x, t, y, _ = window_arrays(frame, lot, pre["window"], pre["horizon"], pre["stride"], setting, pad)
            xs.append(x)
            ts.append(t)
            ys.append(y)
    if not xs or sum(len(x) for x in xs) == 0:
        raise DataError("no training windows; the period is shorter than window + horizon")
    return np.concatenate(xs), np.concatenate(ts), np.concatenate(ys)


def test_origins(grid: Grid, cfg: ExperimentConfig) -> np.ndarray:
    """Window starts whose targets begin at or after the end of the history span."""
    pre = cfg.pre
    L, H = pre["window"], pre["horizon"]
    first = max(history_end_index(grid, cfg) - L, 0)
    count = n_windows(grid.length - first, L, H, pre["test_stride"])
    return first + np.arange(count, dtype=np.int64) * pre["test_stride"]


def test_set(frames, split: SplitPlan, setting: int, cfg: ExperimentConfig) -> EvalSet:
    pre = cfg.pre
    pad = pad_width(frames)
    xs, ts, ys, lots = [], [], [], []
    for zid in sorted(split.test_zones):
        frame = frames[zid]
        origins = test_origins(frame.grid, cfg)
        for lot in frame.lot_ids:
            x, t, y, _ = window_arrays(
                frame, lot, pre["window"], pre["horizon"], 1, setting, pad, origins=origins
            )
            xs.append(x)
            ts.append(t)
            ys.append(y)
            lots.extend([lot] * len(x))
    if not lots:
        raise DataError("no test windows; shorten history_days or lengthen the dataset")
    return EvalSet(np.concatenate(xs), np.concatenate(ts), np.concatenate(ys), np.asarray(lots))


def history_series(frames, split: SplitPlan, cfg: ExperimentConfig) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """(timestamps, availability) over the history span for each test lot."""
    out = {}
    for zid in sorted(split.test_zones):
        frame = frames[zid]
        hist = history_end_index(frame.grid, cfg)
        ts = frame.grid.timestamps()[:hist]
        for j, lot in enumerate(frame.lot_ids):
            out[lot] = (ts, frame.lot_channels[:hist, j])
    return out


# -- models ------------------------------------------------------------------------------------


def fit_transformer(arrays, cfg: ExperimentConfig, setting: int, seed: int) -> TrainedModel:
    x, t, y = arrays
    tr = cfg.training
    model = train(
        (x, t, y),
        cfg.model_config(x.shape[-1], seed),
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        lr=tr["lr"],
        clip_norm=tr["clip_norm"],
    )
    model.metadata.update({"setting": setting, **cfg.provenance(seed)})
    return model


def baseline_predictions(frames, split, es: EvalSet, cfg: ExperimentConfig, train_xy=None) -> dict[str, np.ndarray]:
    """HA and AR fitted per test lot on its history span; NLinear on training windows."""
    H = cfg.pre["horizon"]
    step = cfg.pre["step"]
    ev = cfg.evaluation
    history = history_series(frames, split, cfg)
    ha = np.empty_like(es.y)
    ar = np.empty_like(es.y)
    for lot in sorted(set(es.lots.tolist())):
        rows = es.lots == lot
        ts, values = history[lot]
        ha_model = ha_fit(values, ts, step)
        future = es.timestamps[rows][:, -1:] + step * np.arange(1, H + 1)
        ha[rows] = ha_predict(ha_model, future)
        ar_model = ar_fit(values, ev["ar_p"], ev["ar_d"])
        ar[rows] = ar_predict_batch(ar_model, es.x[rows], H)
    out = {"HA": ha, "AR": ar}
    if train_xy is not None:
        x, y = train_xy
        nl = nlinear_fit(x, y, ridge=cfg.training["nlinear_ridge"])
        out["NLinear"] = nlinear_predict(nl, es.x)
    return out


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def finite_or_none(v: float):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v
