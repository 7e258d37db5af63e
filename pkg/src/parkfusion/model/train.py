"""Minibatch training of the forecaster on windowed samples."""

from __future__ import annotations

import dataclasses
import logging
import time

import numpy as np

from . import calendar
from .optim import AdamState, adam_step
from .tensor import Tensor
from .transformer import ModelConfig, TrainedModel, forward_tensors, init_params

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Loss became NaN or infinite."""


def as_arrays(dataset):
    """Accept WindowSamples or an ``(inputs, timestamps, targets)`` triple."""
    if isinstance(dataset, tuple) and len(dataset) == 3:
        x, ts, y = dataset
        return np.asarray(x), np.asarray(ts), np.asarray(y)
    samples = list(dataset)
    if not samples:
        raise ValueError("training set is empty")
    x = np.stack([np.asarray(s.input) for s in samples])
    ts = np.stack([np.asarray(s.input_timestamps) for s in samples])
    y = np.stack([np.asarray(s.target) for s in samples])
    return x, ts, y


def train(
    dataset,
    config: ModelConfig,
    epochs: int = 10,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int | None = None,
    clip_norm: float | None = None,
) -> TrainedModel:
    """Fit the forecaster by Adam on the mean squared error over all H outputs.

    ``seed`` (default ``config.seed``) drives initialization, per-epoch
    shuffling and dropout masks, so a fixed seed reproduces the loss curve
    bit for bit.
    """
    x, ts, y = as_arrays(dataset)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    if y.shape[-1] != config.horizon:
        raise ValueError(f"targets have horizon {y.shape[-1]}, config expects {config.horizon}")
    dtype = np.dtype(config.dtype)
    x = x.astype(dtype, copy=False)
    y = y.astype(dtype, copy=False)
    cal = calendar.calendar_matrix(ts, config.calendar_features).astype(dtype)

    params = init_params(config)
    state = AdamState()
    rng = np.random.default_rng(config.seed + 1)
    curve: list[float] = []
    n = len(x)
    started = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = np.sort(order[s : s + batch_size])
            tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            pred = forward_tensors(tensors, config, x[idx], cal=cal[idx], dropout_rng=rng)
            diff = pred - y[idx]
            loss = (diff * diff).mean()
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} at epoch {epoch + 1}; lower the learning rate "
                    f"(currently {lr}) or enable clip_norm"
                )
            loss.backward()
            grads = {k: t.grad for k, t in tensors.items()}
            if clip_norm is not None:
                norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
                if norm > clip_norm:
                    grads = {k: None if g is None else g * (clip_norm / norm) for k, g in grads.items()}
            adam_step(params, grads, state, lr=lr)
            total += value * len(idx)
        curve.append(total / n)
        log.info("epoch %d/%d loss %.6f (%.1fs)", epoch + 1, epochs, curve[-1], time.perf_counter() - started)

    meta = {"epochs": epochs, "batch_size": batch_size, "lr": lr, "seed": config.seed, "n_samples": n}
    return TrainedModel(config, params, curve, meta)
