import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parkfusion.evaluation import (
    AblationTable,
    EvalSet,
    MetricsReport,
    cost_report,
    count_macs,
    count_params,
    dumps,
    enumerated_param_count,
    evaluate,
    horizon_sweep,
    instrumented_mac_count,
    mac_count,
    mae,
    mape,
    mape_with_skips,
    mse,
    param_count,
    run_ablation,
    sweep_csv,
)
from parkfusion.model import ModelConfig


class TestMetrics:
    def test_unit_error(self):
        assert mse([1, 1], [0, 0]) == 1.0
        assert mae([1, 1], [0, 0]) == 1.0

    def test_perfect(self, rng):
        a = rng.uniform(0.1, 1, size=20)
        assert mse(a, a) == mae(a, a) == mape(a, a) == 0.0

    def test_single_value(self):
        assert mse([0.5], [0.4]) == pytest.approx(0.01)
        assert mae([0.5], [0.4]) == pytest.approx(0.1)
        assert mape([0.5], [0.4]) == pytest.approx(25.0)

    def test_mape_skips(self):
        value, skipped = mape_with_skips([0.5, 0.2, 0.3], [0.4, 0.0, 0.0005])
        assert skipped == 2
        assert value == pytest.approx(25.0)

    def test_mape_all_skipped(self):
        report = evaluate([0.1, 0.2], [0.0, 0.0])
        assert math.isnan(report.mape) and report.mape_skipped == 2
        assert report.to_dict()["mape"] is None

    def test_errors(self):
        with pytest.raises(ValueError):
            mse([1, 2], [1])
        with pytest.raises(ValueError):
            mae([], [])

    def test_equal_errors_mse_is_mae_squared(self, rng):
        a = rng.uniform(size=50)
        signs = rng.choice([-1.0, 1.0], size=50)
        pred = a + 0.125 * signs
        assert mse(pred, a) == pytest.approx(mae(pred, a) ** 2, rel=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=40), st.randoms())
    def test_permutation_invariant(self, pairs, random):
        shuffled = pairs[:]
        random.shuffle(shuffled)
        p, a = map(list, zip(*pairs))
        ps, as_ = map(list, zip(*shuffled))
        assert mse(p, a) == mse(ps, as_)
        assert mae(p, a) == mae(ps, as_)
        m1, m2 = mape(p, a), mape(ps, as_)
        assert (math.isnan(m1) and math.isnan(m2)) or m1 == m2

    def test_per_lot(self):
        pred = np.array([[0.5, 0.5], [0.2, 0.2]])
        actual = np.array([[0.4, 0.4], [0.2, 0.2]])
        report = evaluate(pred, actual, lots=["A", "B"])
        assert report.n_terms == 4
        assert report.per_lot["B"]["mse"] == 0.0
        assert report.per_lot["A"]["mae"] == pytest.approx(0.1)
        with pytest.raises(ValueError):
            evaluate(pred, actual, lots=["A"])

    def test_report_json(self):
        doc = evaluate([0.5], [0.4]).to_dict()
        assert set(doc) == {"mse", "mae", "mape", "n_terms", "mape_skipped", "per_lot"}
        json.loads(dumps(doc))


CONFIGS = [
    ModelConfig(input_channels=2, window=8, horizon=2, d_model=8, n_heads=2, n_layers=1, d_ff=16, calendar_features=("hour",)),
    ModelConfig(input_channels=7, window=12, horizon=5, d_model=12, n_heads=3, n_layers=2, d_ff=20),
    ModelConfig(input_channels=1, window=6, horizon=3, d_model=4, n_heads=1, n_layers=3, d_ff=8, calendar_features=()),
]


class TestCost:
    def test_tiny_hand_tally(self):
        cfg = CONFIGS[0]
        # embed 2*8+8, calendar 2*8+8, layer 4*64+32 + 2*8*16+16+8 + 32, head 8*2+2
        assert param_count(cfg) == 24 + 24 + (288 + 280 + 32) + 18

    @pytest.mark.parametrize("cfg", CONFIGS)
    def test_formula_matches_enumeration(self, cfg):
        assert param_count(cfg) == enumerated_param_count(cfg)

    @pytest.mark.parametrize("cfg", CONFIGS)
    def test_macs_match_instrumented(self, cfg):
        assert mac_count(cfg) == instrumented_mac_count(cfg)

    def test_macs_other_window(self):
        cfg = CONFIGS[1]
        assert mac_count(cfg, 20) == instrumented_mac_count(cfg, 20)

    def test_layer_increment(self):
        one = CONFIGS[1]
        two = dataclasses.replace(one, n_layers=one.n_layers + 1)
        three = dataclasses.replace(one, n_layers=one.n_layers + 2)
        assert param_count(three) - param_count(two) == param_count(two) - param_count(one) > 0

    def test_quadratic_in_window(self):
        cfg = CONFIGS[1]
        # the L^2 attention term dominates the second difference
        d2 = mac_count(cfg, 40) - 2 * mac_count(cfg, 20) + mac_count(cfg, 0)
        assert d2 == cfg.n_layers * 2 * 40 * 40 * cfg.d_model - cfg.n_layers * 4 * 20 * 20 * cfg.d_model

    def test_units(self):
        cfg = CONFIGS[0]
        report = cost_report(cfg)
        assert report.params_millions == count_params(cfg) == param_count(cfg) / 1e6
        assert report.macs_billions == count_macs(cfg) == mac_count(cfg) / 1e9
        assert report.params_millions > 0 and report.macs_billions > 0


def eval_set(n=20, H=4, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.uniform(0.2, 1.0, size=(n, H))
    return EvalSet(np.zeros((n, 6, 1)), np.zeros((n, 6), dtype=np.int64), y, np.array(["A", "B"] * (n // 2)))


class TestAblation:
    def test_grid_shape(self):
        es = eval_set()
        runners = {
            "NLinear": lambda s, seed: es.y + 0.01 * s,
            "Transformer": lambda s, seed: es.y - 0.02 * s + 0.001 * seed,
        }
        table = run_ablation({s: es for s in (1, 2, 3, 4)}, runners, seeds=(0, 1))
        assert isinstance(table, AblationTable)
        assert sum(len(v) for v in table.cells.values()) == 8
        assert table.mean("NLinear", 3) == pytest.approx(0.03**2)
        assert table.mean("NLinear", 2, "mae") == pytest.approx(0.02)
        assert all(len(r) == 2 for v in table.cells.values() for r in v.values())
        text = table.format_table()
        assert "setting 4 MSE / MAE" in text and text.count("\n") == 4

    def test_runner_calls(self):
        es = eval_set()
        calls = []

        def runner(s, seed):
            calls.append((s, seed))
            return es.y

        run_ablation(lambda s: es, {"m": runner}, settings=(1, 3), seeds=(5, 6))
        assert calls == [(1, 5), (1, 6), (3, 5), (3, 6)]

    def test_serialization_repeatable(self):
        es = eval_set()
        runners = {"m": lambda s, seed: es.y * (1 + 0.1 * s)}
        a = dumps(run_ablation({1: es, 2: es}, runners, settings=(1, 2)).to_dict())
        b = dumps(run_ablation({1: es, 2: es}, runners, settings=(1, 2)).to_dict())
        assert a == b


class TestSweep:
    def test_points_per_model(self, rng):
        y = rng.uniform(0.2, 1, size=(30, 144))
        curves = horizon_sweep({"a": y + 0.1, "b": y}, y)
        assert [h for h, _ in curves["a"]] == [1, 6, 36, 72, 144]
        assert curves["a"][2][1].mse == pytest.approx(0.01)
        assert curves["b"][0][1].mse == 0.0

    def test_uses_hth_column(self, rng):
        y = rng.uniform(0.2, 1, size=(10, 6))
        pred = y.copy()
        pred[:, 3] += 0.5
        curves = horizon_sweep({"m": pred}, y, horizons=(3, 4))
        assert curves["m"][0][1].mse == 0.0 and curves["m"][1][1].mse == pytest.approx(0.25)

    def test_horizon_too_long(self, rng):
        y = rng.uniform(size=(5, 6))
        with pytest.raises(ValueError, match="horizon 7"):
            horizon_sweep({"m": y}, y, horizons=(1, 7))
        with pytest.raises(ValueError):
            horizon_sweep({"m": y[:, :3]}, y, horizons=(1,))

    def test_csv(self):
        report = MetricsReport(0.25, 0.5, math.nan, 4, 4)
        text = sweep_csv({"HA": [(1, report)]})
        assert text.splitlines() == ["horizon,model,mse,mae,mape", "1,HA,0.25,0.5,"]
