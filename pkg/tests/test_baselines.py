import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parkfusion.baselines import (
    ARModel,
    FitError,
    HAModel,
    NLinearModel,
    SingularFitWarning,
    ar_fit,
    ar_predict,
    ar_predict_batch,
    ha_fit,
    ha_predict,
    nlinear_fit,
    nlinear_predict,
    slot_keys,
)

MONDAY = 1704067200  # 2024-01-01 00:00 UTC
WEEK = 7 * 144


def ar_process(coef, n, start):
    x = list(start)
    for _ in range(n - len(start)):
        x.append(sum(c * x[-1 - j] for j, c in enumerate(coef)))
    return np.array(x)


class TestHA:
    def test_weekly_periodic_exact(self, rng):
        pattern = rng.uniform(size=WEEK)
        ts = MONDAY + 600 * np.arange(3 * WEEK)
        model = ha_fit(np.tile(pattern, 3)[: 2 * WEEK], ts[: 2 * WEEK])
        pred = ha_predict(model, ts[2 * WEEK :])
        np.testing.assert_array_equal(pred, pattern)

    def test_constant(self):
        ts = MONDAY + 600 * np.arange(500)
        model = ha_fit(np.full(500, 0.37), ts)
        np.testing.assert_array_equal(ha_predict(model, ts + 86400 * 7), 0.37)

    def test_two_mondays(self):
        ts = np.array([MONDAY + 3600, MONDAY + 7 * 86400 + 3600])
        model = ha_fit([0.2, 0.4], ts)
        assert ha_predict(model, [MONDAY + 14 * 86400 + 3600])[0] == pytest.approx(0.3)

    def test_unseen_slot_global_mean(self):
        model = ha_fit([0.2, 0.6], [MONDAY, MONDAY + 600])
        assert ha_predict(model, [MONDAY + 86400])[0] == pytest.approx(0.4)

    def test_empty(self):
        with pytest.raises(FitError):
            ha_fit([], [])

    def test_slot_keys(self):
        assert slot_keys([MONDAY, MONDAY + 86400 + 1200], 600).tolist() == [0, 146]

    def test_shape_kept(self, rng):
        ts = MONDAY + 600 * np.arange(WEEK)
        model = ha_fit(rng.uniform(size=WEEK), ts)
        assert ha_predict(model, ts.reshape(8, -1)).shape == (8, WEEK // 8)

    def test_round_trip(self, rng):
        model = ha_fit(rng.uniform(size=50), MONDAY + 600 * np.arange(50))
        back = HAModel.from_dict(model.to_dict())
        assert back == model

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_shuffle_invariant(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.uniform(size=300)
        ts = MONDAY + 600 * rng.integers(0, 3 * WEEK, size=300)
        perm = rng.permutation(300)
        assert ha_fit(v, ts) == ha_fit(v[perm], ts[perm])


class TestNLinear:
    def test_level_shift_real_data(self, rng):
        # arbitrary reals round differently after the shift, so only rounding-level agreement
        model = NLinearModel(rng.normal(size=(12, 4)), rng.normal(size=4))
        x = rng.uniform(size=(5, 12))
        np.testing.assert_allclose(nlinear_predict(model, x + 0.3), nlinear_predict(model, x) + 0.3, rtol=0, atol=1e-13)

    def test_zero_model_is_persistence(self, rng):
        model = NLinearModel(np.zeros((6, 3)), np.zeros(3))
        x = rng.uniform(size=(4, 6))
        np.testing.assert_array_equal(nlinear_predict(model, x), np.repeat(x[:, -1:], 3, axis=1))

    def test_linear_trend_closed_form(self, rng):
        L, H = 10, 4
        starts = rng.uniform(-1, 1, size=40)
        slopes = rng.uniform(-0.1, 0.1, size=40)
        steps = np.arange(L + H)
        series = starts[:, None] + slopes[:, None] * steps
        model = nlinear_fit(series[:30, :L], series[:30, L:])
        pred = nlinear_predict(model, series[30:, :L])
        assert np.mean((pred - series[30:, L:]) ** 2) < 1e-6

    def test_linear_trend_gradient_descent(self, rng):
        L, H = 6, 2
        slopes = rng.uniform(-0.1, 0.1, size=64)
        series = rng.uniform(size=(64, 1)) + slopes[:, None] * np.arange(L + H)
        model = nlinear_fit(series[:, :L], series[:, L:], lr=0.5, epochs=400, seed=1, batch_size=16)
        pred = nlinear_predict(model, series[:, :L])
        assert np.mean((pred - series[:, L:]) ** 2) < 1e-6
        assert model.train_loss_curve[-1] < model.train_loss_curve[0]

    def test_multichannel_uses_target(self, rng):
        model = NLinearModel(rng.normal(size=(5, 2)), np.zeros(2))
        x = rng.uniform(size=(3, 5, 4))
        np.testing.assert_array_equal(nlinear_predict(model, x), nlinear_predict(model, x[..., 0]))

    def test_ridge(self, rng):
        x, y = rng.uniform(size=(20, 5)), rng.uniform(size=(20, 2))
        plain = nlinear_fit(x, y)
        shrunk = nlinear_fit(x, y, ridge=10.0)
        assert np.abs(shrunk.weight).sum() < np.abs(plain.weight).sum()

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            nlinear_fit(np.zeros((3, 4)), np.zeros((2, 2)))
        with pytest.raises(FitError):
            nlinear_fit(np.zeros((0, 4)), np.zeros((0, 2)))

    def test_round_trip(self, rng):
        model = NLinearModel(rng.normal(size=(4, 2)), rng.normal(size=2))
        back = NLinearModel.from_dict(model.to_dict())
        np.testing.assert_array_equal(back.weight, model.weight)
        assert (back.window, back.horizon) == (4, 2)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1e3, 1e3, allow_nan=False), st.integers(0, 2**31))
    def test_level_shift_property(self, c, seed):
        rng = np.random.default_rng(seed)
        # dyadic data keeps every intermediate exact
        model = NLinearModel(rng.integers(-4, 5, size=(4, 2)) / 8, rng.integers(-4, 5, size=2) / 8)
        x = rng.integers(-64, 64, size=(3, 4)) / 16
        c = np.round(c * 16) / 16
        np.testing.assert_array_equal(nlinear_predict(model, x + c), nlinear_predict(model, x) + c)


class TestAR:
    def test_recovers_ar1(self):
        x = ar_process([0.8], 200, [1.0])
        model = ar_fit(x, p=1, d=0)
        assert abs(model.coefficients[0] - 0.8) < 1e-6
        assert abs(model.intercept) < 1e-6

    def test_constant_with_differencing(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SingularFitWarning)
            model = ar_fit(np.full(50, 0.6), p=2, d=1)
        np.testing.assert_allclose(ar_predict(model, np.full(10, 0.6), 5), 0.6, atol=1e-9)

    def test_singular_warns(self):
        with pytest.warns(SingularFitWarning, match="ridge"):
            ar_fit(np.full(30, 1.0), p=3, d=0)

    def test_unit_coefficient_persistence(self, rng):
        model = ARModel(1, 0, np.array([1.0]), 0.0)
        hist = rng.uniform(size=7)
        np.testing.assert_array_equal(ar_predict(model, hist, 4), hist[-1])

    def test_reproduces_ar2_over_50_steps(self):
        coef = [0.5, 0.3]
        x = ar_process(coef, 250, [1.0, 0.4])
        model = ar_fit(x[:200], p=2, d=0)
        np.testing.assert_allclose(ar_predict(model, x[:200], 50), x[200:], atol=1e-6)

    def test_differenced_trend(self):
        x = 0.5 + 0.01 * np.arange(40) + 0.001 * np.sin(1.3 * np.arange(40) ** 1.5)
        model = ar_fit(x, p=3, d=1)
        np.testing.assert_allclose(ar_predict(model, x, 3), 0.5 + 0.01 * np.arange(40, 43), atol=1e-3)

    def test_second_difference_integrates(self):
        model = ARModel(1, 2, np.array([0.0]), 0.0)
        # zero second difference: linear continuation
        np.testing.assert_allclose(ar_predict(model, [1.0, 2.0, 3.0], 3), [4.0, 5.0, 6.0])

    def test_errors(self):
        with pytest.raises(FitError):
            ar_fit(np.arange(5.0), p=3, d=1)
        with pytest.raises(ValueError):
            ARModel(0, 1, np.zeros(0), 0.0)
        with pytest.raises(ValueError):
            ARModel(1, 3, np.zeros(1), 0.0)
        with pytest.raises(ValueError, match="history"):
            ar_predict(ARModel(3, 1, np.zeros(3), 0.0), [1.0, 2.0], 2)

    def test_batch(self, rng):
        model = ARModel(2, 1, np.array([0.3, -0.1]), 0.01)
        w = rng.uniform(size=(3, 8, 2))
        got = ar_predict_batch(model, w, 4)
        assert got.shape == (3, 4)
        np.testing.assert_array_equal(got[1], ar_predict(model, w[1, :, 0], 4))
        assert ar_predict_batch(model, np.zeros((0, 8)), 4).shape == (0, 4)

    def test_round_trip(self):
        model = ARModel(2, 1, np.array([0.3, -0.1]), 0.01)
        back = ARModel.from_dict(model.to_dict())
        assert (back.p, back.d, back.intercept) == (2, 1, 0.01)
        np.testing.assert_array_equal(back.coefficients, model.coefficients)
