"""Encoder-only Transformer forecaster with a direct multi-horizon head.

Pipeline per sample: linear input embedding of the C channels, plus a linear
embedding of each step's calendar encoding; ``n_layers`` pre-norm blocks
(self-attention and feed-forward, both residual); a readout over the
sequence (the mean by default, or the last step); a linear head to H outputs.

With ``anchor="last"`` the target channel is shifted by its last observed
value on the way in and the head forecasts the change from that value, which
keeps the model level-free across lots. ``anchor="seasonal"`` shifts the
input the same way but adds the target channel's mean profile over the
complete periods in the window to the head output, so the head learns a
correction to a seasonal average. The default ``"none"`` is the bare encoder.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import calendar
from .layers import ConfigurationError, feed_forward, layer_norm, linear, multi_head_attention
from .tensor import Tensor, no_grad

FORMAT = "parkfusion.transformer/1"


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int
    window: int = 432
    horizon: int = 144
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    calendar_features: tuple[str, ...] = calendar.DEFAULT_FEATURES
    seed: int = 0
    pooling: str = "mean"
    dropout: float = 0.0
    dtype: str = "float64"
    ln_eps: float = 1e-5
    anchor: str = "none"
    period: int = 144

    def __post_init__(self):
        object.__setattr__(self, "calendar_features", calendar.canonical(self.calendar_features))
        if self.input_channels < 1:
            raise ConfigurationError("input_channels must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )
        if self.pooling not in ("last", "mean"):
            raise ConfigurationError(f"pooling must be 'last' or 'mean', got {self.pooling!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")
        if self.anchor not in ("none", "last", "seasonal"):
            raise ConfigurationError(
                f"anchor must be 'none', 'last' or 'seasonal', got {self.anchor!r}"
            )
        if self.anchor == "seasonal" and not (self.horizon <= self.period <= self.window):
            raise ConfigurationError(
                f"seasonal anchor needs horizon <= period <= window, got "
                f"{self.horizon}, {self.period}, {self.window}"
            )
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError("dtype must be float64 or float32")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def calendar_dim(self) -> int:
        return 2 * len(self.calendar_features)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["calendar_features"] = list(self.calendar_features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["calendar_features"] = tuple(d.get("calendar_features", calendar.DEFAULT_FEATURES))
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter's shape, in initialization order."""
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.w": (config.input_channels, d),
        "embed.b": (d,),
        "calendar.w": (config.calendar_dim, d),
        "calendar.b": (d,),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.scale"] = (d,)
        shapes[p + "ln1.shift"] = (d,)
        for name in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{name}"] = (d, d)
            shapes[p + f"attn.b{name}"] = (d,)
        shapes[p + "ln2.scale"] = (d,)
        shapes[p + "ln2.shift"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["head.w"] = (d, config.horizon)
    shapes["head.b"] = (config.horizon,)
    return shapes


def _fan_in(name: str, shapes: dict[str, tuple[int, ...]]) -> int:
    stem, _, leaf = name.rpartition(".")
    if leaf.startswith("b"):
        # a bias shares the fan-in of its weight: b -> w, bq -> wq, b1 -> w1
        return shapes[f"{stem}.w{leaf[1:]}"][0]
    return shapes[name][0]


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); layer norms start at identity."""
    rng = np.random.default_rng(config.seed)
    shapes = param_shapes(config)
    params = {}
    for name, shape in shapes.items():
        if ".ln" in name:
            value = np.ones(shape) if name.endswith("scale") else np.zeros(shape)
        else:
            fan_in = max(_fan_in(name, shapes), 1)
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = value.astype(config.dtype)
    return params


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * keep


def encode(
    params: dict[str, Tensor],
    config: ModelConfig,
    x,
    cal,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the encoder stack; returns hidden states [..., L, d_model]."""
    h = linear(x, params["embed.w"], params["embed.b"])
    h = h + linear(cal, params["calendar.w"], params["calendar.b"])
    for i in range(config.n_layers):
        p = f"layers.{i}."
        a = layer_norm(h, params[p + "ln1.scale"], params[p + "ln1.shift"], config.ln_eps)
        a = multi_head_attention(a, params, config.n_heads, prefix=p + "attn.")
        h = h + _dropout(a, config.dropout, dropout_rng)
        f = layer_norm(h, params[p + "ln2.scale"], params[p + "ln2.shift"], config.ln_eps)
        f = feed_forward(
            f, params[p + "ffn.w1"], params[p + "ffn.b1"], params[p + "ffn.w2"], params[p + "ffn.b2"]
        )
        h = h + _dropout(f, config.dropout, dropout_rng)
    return h


def forward_tensors(
    params: dict[str, Tensor],
    config: ModelConfig,
    x,
    timestamps=None,
    cal=None,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Batched forward pass: ``x`` is [B, L, C] (or [L, C]); returns [B, H] (or [H])."""
    x = np.asarray(x, dtype=config.dtype) if not isinstance(x, Tensor) else x
    if x.shape[-1] != config.input_channels:
        raise ConfigurationError(
            f"sample has {x.shape[-1]} channels but the model expects {config.input_channels}"
        )
    if cal is None:
        if timestamps is None:
            raise ConfigurationError("forward needs timestamps or a precomputed calendar matrix")
        cal = calendar.calendar_matrix(timestamps, config.calendar_features)
    cal = np.asarray(cal, dtype=config.dtype)
    level = None
    if config.anchor != "none":
        # the target channel (0) enters relative to its last observed value
        data = x.data if isinstance(x, Tensor) else x
        level = data[..., -1:, 0]
        shift = np.zeros(data.shape[-1], dtype=data.dtype)
        shift[0] = 1.0
        x = x - level[..., None] * shift
        if config.anchor == "seasonal":
            # the head forecasts the change from the mean seasonal profile
            level = seasonal_profile(data[..., 0], config.period, config.horizon)
    h = encode(params, config, x, cal, dropout_rng)
    if config.pooling == "last":
        pooled = h[..., -1, :]
    else:
        pooled = h.mean(axis=-2)
    out = linear(pooled, params["head.w"], params["head.b"])
    return out if level is None else out + level


def seasonal_profile(series: np.ndarray, period: int, horizon: int) -> np.ndarray:
    """Mean over complete periods of the next ``horizon`` steps' seasonal values.

    ``series`` is [..., L]; step ``h`` of the result averages
    ``series[L - k*period + h]`` for every ``k >= 1`` that stays in the window.
    """
    L = series.shape[-1]
    n = L // period
    acc = np.zeros(series.shape[:-1] + (horizon,), dtype=series.dtype)
    for k in range(1, n + 1):
        acc += series[..., L - k * period : L - k * period + horizon]
    return acc / n


@dataclass
class TrainedModel:
    config: ModelConfig
    parameters: dict[str, np.ndarray]
    train_loss_curve: list[float] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.parameters.items()}

    def predict(self, x, timestamps=None, cal=None, batch_size: int = 64) -> np.ndarray:
        """Forecast for a batch [B, L, C]; returns [B, H] as a numpy array."""
        x = np.asarray(x)
        single = x.ndim == 2
        if single:
            x = x[None]
            timestamps = None if timestamps is None else np.asarray(timestamps)[None]
            cal = None if cal is None else np.asarray(cal)[None]
        params = self.tensors()
        outs = []
        with no_grad():
            for s in range(0, len(x), batch_size):
                ts = None if timestamps is None else np.asarray(timestamps)[s : s + batch_size]
                cb = None if cal is None else np.asarray(cal)[s : s + batch_size]
                outs.append(forward_tensors(params, self.config, x[s : s + batch_size], ts, cb).data)
        out = np.concatenate(outs, axis=0) if outs else np.zeros((0, self.config.horizon))
        return out[0] if single else out

    # -- persistence -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "config": self.config.to_dict(),
            "parameters": {
                k: {"shape": list(v.shape), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
                for k, v in self.parameters.items()
            },
            "train_loss_curve": [float(v) for v in self.train_loss_curve],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> TrainedModel:
        if doc.get("format") != FORMAT:
            raise ValueError(f"not a serialized forecaster (format={doc.get('format')!r})")
        config = ModelConfig.from_dict(doc["config"])
        expected = param_shapes(config)
        stored = doc["parameters"]
        if set(stored) != set(expected):
            missing = sorted(set(expected) - set(stored))
            extra = sorted(set(stored) - set(expected))
            raise ValueError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        params = {}
        for name, shape in expected.items():
            entry = stored[name]
            if tuple(entry["shape"]) != shape:
                raise ValueError(f"{name}: stored shape {entry['shape']} != config shape {shape}")
            arr = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
            params[name] = arr.astype(config.dtype)
        return cls(config, params, list(doc.get("train_loss_curve", [])), dict(doc.get("metadata", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> TrainedModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def forward(model: TrainedModel, sample) -> np.ndarray:
    """Forecast H values for one :class:`~parkfusion.preprocess.WindowSample`."""
    return model.predict(np.asarray(sample.input), timestamps=np.asarray(sample.input_timestamps))
