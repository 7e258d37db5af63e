"""Reference forecasters: historical average, AR with differencing, NLinear.

All baselines look at the target lot's availability only.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model.calendar import weekday_index

RIDGE_FALLBACK = 1e-8


class FitError(ValueError):
    """Not enough data to fit a baseline."""


class SingularFitWarning(UserWarning):
    """Least squares fell back to a tiny ridge penalty."""


def target_channel(x) -> np.ndarray:
    """Column 0 of multichannel windows ([N, L, C] -> [N, L]); 2-D input passes through."""
    x = np.asarray(x, dtype=np.float64)
    return x[..., 0] if x.ndim == 3 else x


# -- historical average --------------------------------------------------------------


def slot_keys(timestamps, step: int) -> np.ndarray:
    """(weekday, time-of-day slot) folded into one integer key per timestamp."""
    t = np.asarray(timestamps, dtype=np.int64)
    slots_per_day = 86400 // step
    return weekday_index(t) * slots_per_day + (t % 86400) // step


@dataclass
class HAModel:
    step: int
    slot_means: dict[int, float]
    slot_counts: dict[int, int]
    global_mean: float

    def to_dict(self) -> dict:
        return {
            "kind": "ha",
            "step": self.step,
            "slot_means": {str(k): v for k, v in sorted(self.slot_means.items())},
            "slot_counts": {str(k): v for k, v in sorted(self.slot_counts.items())},
            "global_mean": self.global_mean,
        }

    @classmethod
    def from_dict(cls, d: dict) -> HAModel:
        return cls(
            int(d["step"]),
            {int(k): float(v) for k, v in d["slot_means"].items()},
            {int(k): int(v) for k, v in d["slot_counts"].items()},
            float(d["global_mean"]),
        )


def ha_fit(values, timestamps, step: int = 600) -> HAModel:
    """Mean availability per (weekday, time-of-day slot).

    Sums are exactly rounded over sorted values, so the result does not
    depend on the order of the training samples.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    keys = slot_keys(timestamps, step).ravel()
    if len(v) == 0:
        raise FitError("historical average needs at least one training value")
    if len(v) != len(keys):
        raise ValueError("values and timestamps differ in length")
    order = np.lexsort((v, keys))
    v, keys = v[order], keys[order]
    bounds = np.flatnonzero(np.diff(keys)) + 1
    means, counts = {}, {}
    for chunk_v, chunk_k in zip(np.split(v, bounds), np.split(keys, bounds)):
        key = int(chunk_k[0])
        means[key] = math.fsum(chunk_v) / len(chunk_v)
        counts[key] = len(chunk_v)
    return HAModel(step, means, counts, math.fsum(v) / len(v))


def ha_predict(model: HAModel, timestamps) -> np.ndarray:
    """Slot mean for each timestamp; slots never seen in training use the global mean."""
    keys = slot_keys(timestamps, model.step)
    flat = [model.slot_means.get(int(k), model.global_mean) for k in keys.ravel()]
    return np.asarray(flat, dtype=np.float64).reshape(keys.shape)


# -- NLinear ----------------------------------------------------------------------------


@dataclass
class NLinearModel:
    weight: np.ndarray  # [L, H]
    bias: np.ndarray  # [H]
    train_loss_curve: list[float] = field(default_factory=list)

    @property
    def window(self) -> int:
        return self.weight.shape[0]

    @property
    def horizon(self) -> int:
        return self.weight.shape[1]

    def to_dict(self) -> dict:
        return {"kind": "nlinear", "weight": self.weight.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> NLinearModel:
        return cls(np.asarray(d["weight"], dtype=np.float64), np.asarray(d["bias"], dtype=np.float64))


def nlinear_predict(model: NLinearModel, window) -> np.ndarray:
    """``(x - x_L) @ W + b + x_L`` for one window [L] or a batch [N, L] (or [N, L, C])."""
    x = target_channel(window)
    last = x[..., -1:]
    return (x - last) @ model.weight + model.bias + last


def nlinear_fit(
    x,
    y,
    lr: float | None = None,
    epochs: int = 200,
    seed: int = 0,
    ridge: float = 0.0,
    batch_size: int = 64,
) -> NLinearModel:
    """Fit on windows ``x`` [N, L] (or [N, L, C]) and targets ``y`` [N, H].

    Without ``lr`` the anchored problem is solved in closed form by least
    squares (plus an optional ``ridge`` penalty on W). With ``lr`` it is fit
    by minibatch gradient descent from zero weights.
    """
    xs = target_channel(x)
    ys = np.asarray(y, dtype=np.float64)
    if xs.ndim != 2 or ys.ndim != 2 or len(xs) != len(ys):
        raise ValueError(f"expected x [N, L] and y [N, H], got {xs.shape} and {ys.shape}")
    if len(xs) == 0:
        raise FitError("NLinear needs at least one window")
    last = xs[:, -1:]
    a = xs - last
    t = ys - last
    n, L = a.shape
    H = t.shape[1]
    if lr is None:
        design = np.hstack([a, np.ones((n, 1))])
        if ridge > 0:
            penalty = ridge * np.eye(L + 1)
            penalty[-1, -1] = 0.0
            beta = np.linalg.solve(design.T @ design + penalty, design.T @ t)
        else:
            beta = np.linalg.lstsq(design, t, rcond=None)[0]
        w, b = beta[:-1], beta[-1]
        resid = design @ beta - t
        return NLinearModel(w, b, [float(np.mean(resid**2))])
    rng = np.random.default_rng(seed)
    w = np.zeros((L, H))
    b = np.zeros(H)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            err = a[idx] @ w + b - t[idx]
            total += float((err**2).sum())
            g = 2.0 * err / err.size
            w -= lr * (a[idx].T @ g + 2.0 * ridge * w / n)
            b -= lr * g.sum(axis=0)
        curve.append(total / (n * H))
    return NLinearModel(w, b, curve)


# -- AR with differencing ------------------------------------------------------------


@dataclass
class ARModel:
    p: int
    d: int
    coefficients: np.ndarray  # lag 1 first
    intercept: float

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("AR order p must be >= 1")
        if self.d not in (0, 1, 2):
            raise ValueError("differencing order d must be 0, 1 or 2")

    def to_dict(self) -> dict:
        return {"kind": "ar", "p": self.p, "d": self.d, "coefficients": self.coefficients.tolist(), "intercept": self.intercept}

    @classmethod
    def from_dict(cls, d: dict) -> ARModel:
        return cls(int(d["p"]), int(d["d"]), np.asarray(d["coefficients"], dtype=np.float64), float(d["intercept"]))


def lag_matrix(series: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``[x_{t-1}, ..., x_{t-p}]`` and targets ``x_t`` for t = p..n-1."""
    n = len(series)
    cols = [series[p - j : n - j] for j in range(1, p + 1)]
    return np.stack(cols, axis=1), series[p:]


def ar_fit(series, p: int = 6, d: int = 1) -> ARModel:
    """OLS fit of an AR(p) with intercept on the d-times differenced series.

    A rank-deficient lag matrix (e.g. a constant differenced series) is
    solved with a ridge penalty of 1e-8 instead, with a warning.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    ARModel(p, d, np.zeros(p), 0.0)  # validates p and d
    if len(x) <= p + d + 1:
        raise FitError(f"series of length {len(x)} too short for AR(p={p}, d={d})")
    z = np.diff(x, n=d) if d else x
    lags, target = lag_matrix(z, p)
    design = np.hstack([lags, np.ones((len(lags), 1))])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        warnings.warn(
            f"lag matrix is rank deficient; using ridge lambda={RIDGE_FALLBACK}", SingularFitWarning, stacklevel=2
        )
        gram = design.T @ design + RIDGE_FALLBACK * np.eye(design.shape[1])
        beta = np.linalg.solve(gram, design.T @ target)
    else:
        beta = np.linalg.lstsq(design, target, rcond=None)[0]
    return ARModel(p, d, beta[:-1], float(beta[-1]))


def ar_predict(model: ARModel, history, H: int) -> np.ndarray:
    """Recursive H-step forecast continuing ``history``."""
    x = np.asarray(history, dtype=np.float64).ravel()
    if len(x) < model.p + model.d:
        raise ValueError(f"history needs at least p+d={model.p + model.d} values")
    levels = [x]
    for _ in range(model.d):
        levels.append(np.diff(levels[-1]))
    buf = list(levels[-1][-model.p :][::-1])  # most recent first
    coef = model.coefficients
    out = np.empty(H)
    for h in range(H):
        nxt = model.intercept + float(np.dot(coef, buf[: model.p]))
        out[h] = nxt
        buf.insert(0, nxt)
    # integrate back through each differencing level
    for level in reversed(levels[:-1]):
        out = level[-1] + np.cumsum(out)
    return out


def ar_predict_batch(model: ARModel, windows, H: int) -> np.ndarray:
    """:func:`ar_predict` applied to every window's target channel."""
    xs = target_channel(windows)
    return np.stack([ar_predict(model, w, H) for w in xs]) if len(xs) else np.zeros((0, H))
