"""Error metrics, model cost accounting and the ablation / horizon harness."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .model.tensor import mac_counter, no_grad
from .model.transformer import ModelConfig, forward_tensors, init_params, param_shapes
from .model.tensor import Tensor

MAPE_EPS = 1e-3
DEFAULT_HORIZONS = (1, 6, 36, 72, 144)


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if p.shape != a.shape:
        raise ValueError(f"prediction has {p.size} values, actual has {a.size}")
    if p.size == 0:
        raise ValueError("metrics need at least one value")
    return p, a


# Sums go through math.fsum so results do not depend on sample order.


def mse(pred, actual) -> float:
    p, a = _pair(pred, actual)
    e = p - a
    return math.fsum(e * e) / e.size


def mae(pred, actual) -> float:
    p, a = _pair(pred, actual)
    return math.fsum(np.abs(p - a)) / p.size


def mape_with_skips(pred, actual, eps: float = MAPE_EPS) -> tuple[float, int]:
    """Mean absolute percentage error (in percent) and the number of skipped terms.

    Terms with ``|actual| < eps`` are skipped. When every term is skipped the
    value is NaN.
    """
    p, a = _pair(pred, actual)
    keep = np.abs(a) >= eps
    skipped = int((~keep).sum())
    if not keep.any():
        return math.nan, skipped
    terms = np.abs((a[keep] - p[keep]) / a[keep])
    return 100.0 * math.fsum(terms) / terms.size, skipped


def mape(pred, actual, eps: float = MAPE_EPS) -> float:
    return mape_with_skips(pred, actual, eps)[0]


@dataclass
class MetricsReport:
    mse: float
    mae: float
    mape: float
    n_terms: int
    mape_skipped: int
    per_lot: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mape"] = None if math.isnan(self.mape) else self.mape
        for lot in d["per_lot"].values():
            if lot["mape"] is not None and math.isnan(lot["mape"]):
                lot["mape"] = None
        return d


def evaluate(pred, actual, lots: Sequence[str] | None = None, eps: float = MAPE_EPS) -> MetricsReport:
    """All three metrics over every value; ``lots`` labels the rows of 2-D inputs."""
    p = np.asarray(pred, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    m, skipped = mape_with_skips(p, a, eps)
    per_lot = {}
    if lots is not None:
        lots = np.asarray(lots)
        if len(lots) != len(p):
            raise ValueError("one lot label per prediction row")
        for lot in sorted(set(lots.tolist())):
            rows = lots == lot
            per_lot[str(lot)] = {
                "mse": mse(p[rows], a[rows]),
                "mae": mae(p[rows], a[rows]),
                "mape": mape(p[rows], a[rows], eps),
            }
    return MetricsReport(mse(p, a), mae(p, a), m, int(p.size), skipped, per_lot)


# -- cost accounting ---------------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    params_millions: float
    macs_billions: float


def param_count(config: ModelConfig) -> int:
    """Trainable scalars, tallied by formula."""
    C, d, f, H = config.input_channels, config.d_model, config.d_ff, config.horizon
    embed = C * d + d
    cal = config.calendar_dim * d + d
    layer = (4 * d * d + 4 * d) + (2 * d * f + f + d) + 4 * d
    head = d * H + H
    return embed + cal + config.n_layers * layer + head


def enumerated_param_count(config: ModelConfig) -> int:
    """Trainable scalars, tallied by walking the actual parameter shapes."""
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def mac_count(config: ModelConfig, L: int | None = None) -> int:
    """Multiply-accumulates of one forward pass over a window of ``L`` steps.

    Counts matrix products only: input and calendar embeddings, per layer the
    four projections, attention scores and weighted sum, and the feed-forward
    pair, then the head on the pooled vector.
    """
    L = config.window if L is None else L
    C, d, f, H = config.input_channels, config.d_model, config.d_ff, config.horizon
    embed = L * C * d + L * config.calendar_dim * d
    layer = 4 * L * d * d + 2 * L * L * d + 2 * L * d * f
    return embed + config.n_layers * layer + d * H


def instrumented_mac_count(config: ModelConfig, L: int | None = None) -> int:
    """Run one forward pass with the matmul counter switched on."""
    L = config.window if L is None else L
    params = {k: Tensor(v) for k, v in init_params(config).items()}
    x = np.zeros((1, L, config.input_channels))
    ts = np.arange(L, dtype=np.int64)[None] * 600
    with no_grad(), mac_counter() as counter:
        forward_tensors(params, config, x, timestamps=ts)
    return counter[0]


def count_params(config: ModelConfig) -> float:
    """Parameter count in millions."""
    return param_count(config) / 1e6


def count_macs(config: ModelConfig, L: int | None = None) -> float:
    """Forward-pass MACs in billions."""
    return mac_count(config, L) / 1e9


def cost_report(config: ModelConfig, L: int | None = None) -> CostReport:
    return CostReport(count_params(config), count_macs(config, L))


# -- experiment harness ----------------------------------------------------------------


@dataclass
class EvalSet:
    """Test windows with their true targets and the lot each row forecasts."""

    x: np.ndarray
    timestamps: np.ndarray
    y: np.ndarray
    lots: np.ndarray


# A runner fits one model for a feature setting and returns test predictions [N, H].
Runner = Callable[[int, int], np.ndarray]


@dataclass
class AblationTable:
    settings: tuple[int, ...]
    seeds: tuple[int, ...]
    # cells[model][setting] -> one report per seed
    cells: dict[str, dict[int, list[MetricsReport]]]

    def mean(self, model: str, setting: int, metric: str = "mse") -> float:
        return float(np.mean([getattr(r, metric) for r in self.cells[model][setting]]))

    def to_dict(self) -> dict:
        return {
            "settings": list(self.settings),
            "seeds": list(self.seeds),
            "cells": {
                m: {str(s): [r.to_dict() for r in reports] for s, reports in by_setting.items()}
                for m, by_setting in self.cells.items()
            },
        }

    def format_table(self) -> str:
        head = ["model"] + [f"setting {s} MSE / MAE" for s in self.settings]
        rows = [head]
        for m in self.cells:
            rows.append(
                [m] + [f"{self.mean(m, s, 'mse'):.4f} / {self.mean(m, s, 'mae'):.4f}" for s in self.settings]
            )
        return format_rows(rows)


def run_ablation(
    eval_sets: Mapping[int, EvalSet] | Callable[[int], EvalSet],
    runners: Mapping[str, Runner],
    settings: Iterable[int] = (1, 2, 3, 4),
    seeds: Iterable[int] = (0,),
    eps: float = MAPE_EPS,
) -> AblationTable:
    """Fill the model x setting grid.

    ``eval_sets`` gives the test windows for each setting (all drawn from one
    fixed zone split); every runner is called as ``runner(setting, seed)``.
    """
    settings = tuple(settings)
    seeds = tuple(seeds)
    cells: dict[str, dict[int, list[MetricsReport]]] = {m: {} for m in runners}
    for s in settings:
        es = eval_sets(s) if callable(eval_sets) else eval_sets[s]
        for name, runner in runners.items():
            cells[name][s] = [evaluate(runner(s, seed), es.y, es.lots, eps) for seed in seeds]
    return AblationTable(settings, seeds, cells)


def horizon_sweep(
    predictions: Mapping[str, np.ndarray],
    actual,
    horizons: Iterable[int] = DEFAULT_HORIZONS,
    eps: float = MAPE_EPS,
) -> dict[str, list[tuple[int, MetricsReport]]]:
    """Metrics of the h-th forecast step (1-based) for each model."""
    actual = np.asarray(actual, dtype=np.float64)
    H = actual.shape[-1]
    horizons = tuple(horizons)
    for h in horizons:
        if not 1 <= h <= H:
            raise ValueError(f"horizon {h} outside 1..{H}")
    out = {}
    for name, pred in predictions.items():
        pred = np.asarray(pred, dtype=np.float64)
        if pred.shape != actual.shape:
            raise ValueError(f"{name}: predictions {pred.shape} vs targets {actual.shape}")
        out[name] = [(h, evaluate(pred[:, h - 1], actual[:, h - 1], eps=eps)) for h in horizons]
    return out


def sweep_csv(curves: Mapping[str, list[tuple[int, MetricsReport]]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["horizon", "model", "mse", "mae", "mape"])
    for name, points in curves.items():
        for h, r in points:
            w.writerow([h, name, repr(r.mse), repr(r.mae), "" if math.isnan(r.mape) else repr(r.mape)])
    return buf.getvalue()


def format_rows(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def dumps(doc) -> str:
    """Canonical JSON so identical inputs give identical bytes."""
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"
