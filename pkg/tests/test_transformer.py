import dataclasses

import numpy as np
import pytest

from conftest import numeric_grad, rel_error
from parkfusion.model import (
    ConfigurationError,
    ModelConfig,
    Tensor,
    TrainedModel,
    TrainingDiverged,
    forward,
    forward_tensors,
    init_params,
    param_shapes,
    train,
)
from parkfusion.model.transformer import seasonal_profile
from parkfusion.preprocess import WindowSample

START = 1704067200


def batch(config, n, rng):
    x = rng.normal(size=(n, config.window, config.input_channels))
    ts = START + 600 * (np.arange(config.window) + rng.integers(0, 1000, size=(n, 1)))
    return x, ts


def gradient_errors(config, rng):
    params = init_params(config)
    for name in params:
        if ".ln" in name:
            params[name] = params[name] + rng.normal(0, 0.1, size=params[name].shape)
    x, ts = batch(config, 3, rng)
    probe = rng.normal(size=(3, config.horizon))

    def value():
        t = {k: Tensor(v) for k, v in params.items()}
        return float((forward_tensors(t, config, x, timestamps=ts).data * probe).sum())

    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    (forward_tensors(tensors, config, x, timestamps=ts) * Tensor(probe)).sum().backward()
    errors = {}
    for name, arr in params.items():
        num = numeric_grad(value, arr, 1e-6)
        if name.endswith("attn.bk"):
            # softmax ignores a per-row constant, so the true gradient is zero
            errors[name] = max(np.abs(tensors[name].grad).max(), np.abs(num).max())
        else:
            errors[name] = rel_error(tensors[name].grad, num)
    return errors


class TestForward:
    def test_output_shape(self, tiny_config, rng):
        model = TrainedModel(tiny_config, init_params(tiny_config))
        x, ts = batch(tiny_config, 5, rng)
        assert model.predict(x, ts).shape == (5, tiny_config.horizon)
        assert model.predict(x[0], ts[0]).shape == (tiny_config.horizon,)

    def test_zero_params_give_head_bias(self, tiny_config, rng):
        params = {k: np.zeros_like(v) for k, v in init_params(tiny_config).items()}
        params["head.b"] = np.array([0.25, -1.5])
        x, ts = batch(tiny_config, 4, rng)
        out = TrainedModel(tiny_config, params).predict(x, ts)
        np.testing.assert_array_equal(out, np.tile([0.25, -1.5], (4, 1)))

    def test_no_cross_sample_coupling(self, tiny_config, rng):
        model = TrainedModel(tiny_config, init_params(tiny_config))
        x, ts = batch(tiny_config, 3, rng)
        one = model.predict(x, ts)
        two = model.predict(np.concatenate([x, x]), np.concatenate([ts, ts]))
        np.testing.assert_array_equal(two[:3], one)
        np.testing.assert_array_equal(two[3:], one)

    def test_channel_mismatch(self, tiny_config, rng):
        model = TrainedModel(tiny_config, init_params(tiny_config))
        with pytest.raises(ConfigurationError, match="channels"):
            model.predict(rng.normal(size=(1, 8, 3)), START + 600 * np.arange(8)[None])

    def test_needs_calendar(self, tiny_config, rng):
        model = TrainedModel(tiny_config, init_params(tiny_config))
        with pytest.raises(ConfigurationError, match="timestamps"):
            model.predict(rng.normal(size=(1, 8, 2)))

    def test_forward_on_window_sample(self, tiny_config, rng):
        model = TrainedModel(tiny_config, init_params(tiny_config))
        x, ts = batch(tiny_config, 1, rng)
        sample = WindowSample(x[0], ts[0], np.zeros(2), "A", "Z0", 4)
        np.testing.assert_array_equal(forward(model, sample), model.predict(x, ts)[0])

    def test_last_pooling(self, tiny_config, rng):
        cfg = dataclasses.replace(tiny_config, pooling="last")
        x, ts = batch(cfg, 2, rng)
        assert TrainedModel(cfg, init_params(cfg)).predict(x, ts).shape == (2, 2)


class TestAnchors:
    def test_last_anchor_level_shift(self, tiny_config, rng):
        cfg = dataclasses.replace(tiny_config, anchor="last", input_channels=1)
        model = TrainedModel(cfg, init_params(cfg))
        x, ts = batch(cfg, 3, rng)
        np.testing.assert_allclose(model.predict(x + 0.7, ts), model.predict(x, ts) + 0.7, atol=1e-12)

    def test_seasonal_anchor_zero_head(self, tiny_config, rng):
        cfg = dataclasses.replace(tiny_config, anchor="seasonal", period=4)
        params = init_params(cfg)
        params["head.w"][:] = 0.0
        params["head.b"][:] = 0.0
        x, ts = batch(cfg, 3, rng)
        out = TrainedModel(cfg, params).predict(x, ts)
        # window 8, period 4: the mean of steps (4, 0) and (5, 1)
        expected = (x[:, [4, 5], 0] + x[:, [0, 1], 0]) / 2
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_seasonal_profile(self):
        series = np.arange(12.0)
        # mean of [8, 9, 10], [4, 5, 6] and [0, 1, 2]
        np.testing.assert_allclose(seasonal_profile(series, 4, 3), [4.0, 5.0, 6.0])

    def test_seasonal_needs_room(self, tiny_config):
        with pytest.raises(ConfigurationError, match="seasonal"):
            dataclasses.replace(tiny_config, anchor="seasonal", period=144)

    def test_unknown_anchor(self, tiny_config):
        with pytest.raises(ConfigurationError, match="anchor"):
            dataclasses.replace(tiny_config, anchor="median")


class TestGradients:
    def test_every_parameter(self, tiny_config, rng):
        errors = gradient_errors(tiny_config, rng)
        assert set(errors) == set(param_shapes(tiny_config))
        bad = {k: v for k, v in errors.items() if v >= 1e-4}
        assert not bad

    @pytest.mark.parametrize("anchor", ["last", "seasonal"])
    def test_anchored(self, tiny_config, rng, anchor):
        cfg = dataclasses.replace(tiny_config, anchor=anchor, period=4, pooling="last", n_layers=2)
        bad = {k: v for k, v in gradient_errors(cfg, rng).items() if v >= 1e-4}
        assert not bad

    def test_unused_parameter_has_zero_gradient(self, tiny_config, rng):
        cfg = dataclasses.replace(tiny_config, pooling="last")
        x, ts = batch(cfg, 2, rng)
        tensors = {k: Tensor(v, requires_grad=True) for k, v in init_params(cfg).items()}
        extra = Tensor(np.ones(3), requires_grad=True)
        loss = forward_tensors(tensors, cfg, x, timestamps=ts).sum() + (extra * 0.0).sum()
        loss.backward()
        np.testing.assert_array_equal(extra.grad, 0.0)

    def test_quadratic(self, rng):
        p = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        (p * p).sum().backward()
        np.testing.assert_array_equal(p.grad, 2 * p.data)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigurationError, match="divisible"):
            ModelConfig(input_channels=1, d_model=10, n_heads=4)

    @pytest.mark.parametrize(
        "kw", [{"pooling": "max"}, {"dropout": 1.0}, {"dtype": "float16"}, {"input_channels": 0}]
    )
    def test_rejects(self, kw):
        with pytest.raises(ConfigurationError):
            ModelConfig(**{"input_channels": 1, **kw})

    def test_dict_round_trip(self, tiny_config):
        assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config

    def test_init_bounds(self, tiny_config):
        params = init_params(tiny_config)
        assert np.abs(params["embed.w"]).max() <= 1 / np.sqrt(2)
        assert np.abs(params["layers.0.ffn.w2"]).max() <= 1 / np.sqrt(16)
        np.testing.assert_array_equal(params["layers.0.ln1.scale"], 1.0)


class TestPersistence:
    def test_round_trip(self, tiny_config, tmp_path, rng):
        model = TrainedModel(tiny_config, init_params(tiny_config), [0.5, 0.25], {"note": "x"})
        path = tmp_path / "m.json"
        model.save(path)
        back = TrainedModel.load(path)
        assert back.config == tiny_config
        assert back.train_loss_curve == [0.5, 0.25]
        for k in model.parameters:
            np.testing.assert_array_equal(back.parameters[k], model.parameters[k])
        x, ts = batch(tiny_config, 2, rng)
        np.testing.assert_array_equal(back.predict(x, ts), model.predict(x, ts))

    def test_rejects_foreign_document(self):
        with pytest.raises(ValueError, match="format"):
            TrainedModel.from_dict({"format": "other"})

    def test_rejects_shape_mismatch(self, tiny_config):
        doc = TrainedModel(tiny_config, init_params(tiny_config)).to_dict()
        doc["parameters"]["head.b"]["shape"] = [3]
        with pytest.raises(ValueError, match="head.b"):
            TrainedModel.from_dict(doc)

    def test_rejects_missing_parameter(self, tiny_config):
        doc = TrainedModel(tiny_config, init_params(tiny_config)).to_dict()
        del doc["parameters"]["embed.w"]
        with pytest.raises(ValueError, match="embed.w"):
            TrainedModel.from_dict(doc)


def periodic_dataset(n=64, L=8, H=2, seed=0):
    rng = np.random.default_rng(seed)
    origins = rng.integers(0, 500, size=n)
    steps = origins[:, None] + np.arange(L + H)
    values = 0.5 + 0.3 * np.sin(2 * np.pi * steps / 12) + rng.normal(0, 0.01, size=steps.shape)
    x = np.stack([values[:, :L], values[:, :L] ** 2], axis=-1)
    ts = START + 600 * steps[:, :L]
    return x, ts, values[:, L:]


class TestTraining:
    def test_deterministic(self, tiny_config):
        data = periodic_dataset()
        a = train(data, tiny_config, epochs=3, batch_size=16, lr=1e-2, seed=7)
        b = train(data, tiny_config, epochs=3, batch_size=16, lr=1e-2, seed=7)
        assert a.train_loss_curve == b.train_loss_curve
        for k in a.parameters:
            assert a.parameters[k].tobytes() == b.parameters[k].tobytes()

    def test_seed_matters(self, tiny_config):
        data = periodic_dataset()
        a = train(data, tiny_config, epochs=1, batch_size=16, lr=1e-2, seed=1)
        b = train(data, tiny_config, epochs=1, batch_size=16, lr=1e-2, seed=2)
        assert a.train_loss_curve != b.train_loss_curve

    def test_constant_target(self, tiny_config):
        x, ts, _ = periodic_dataset()
        y = np.full((len(x), 2), 0.3)
        model = train((x, ts, y), tiny_config, epochs=50, batch_size=16, lr=1e-2, seed=0)
        assert model.train_loss_curve[-1] < 1e-3

    def test_loss_decreases_on_periodic_data(self, tiny_config):
        model = train(periodic_dataset(), tiny_config, epochs=20, batch_size=16, lr=5e-3, seed=0)
        assert model.train_loss_curve[19] < model.train_loss_curve[0]

    def test_window_samples_accepted(self, tiny_config):
        x, ts, y = periodic_dataset(n=8)
        samples = [WindowSample(x[i], ts[i], y[i], "A", "Z0", 1) for i in range(8)]
        model = train(samples, tiny_config, epochs=1, batch_size=4, lr=1e-3)
        assert len(model.train_loss_curve) == 1
        assert model.metadata["n_samples"] == 8

    def test_divergence_reported(self, tiny_config):
        x, ts, y = periodic_dataset(n=16)
        with pytest.raises(TrainingDiverged, match="learning rate"):
            train((x, ts, y * np.inf), tiny_config, epochs=1, batch_size=8, lr=1e-3)

    def test_empty_dataset(self, tiny_config):
        with pytest.raises(ValueError, match="empty"):
            train([], tiny_config)

    def test_horizon_mismatch(self, tiny_config):
        x, ts, y = periodic_dataset(n=8)
        with pytest.raises(ValueError, match="horizon"):
            train((x, ts, y[:, :1]), tiny_config, epochs=1)

    def test_float32(self, tiny_config):
        cfg = dataclasses.replace(tiny_config, dtype="float32")
        model = train(periodic_dataset(n=16), cfg, epochs=1, batch_size=8, lr=1e-3)
        assert all(v.dtype == np.float32 for v in model.parameters.values())
