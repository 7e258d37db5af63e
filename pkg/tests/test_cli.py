import csv
import json

import numpy as np
import pytest

from parkfusion import cli
from parkfusion.experiment import ConfigError, ExperimentConfig

FAST_CONFIG = """\
synth: {n_lots: 8, n_clusters: 3, n_days: 6}
preprocess: {window: 48, horizon: 12, stride: 24, test_stride: 24, history_days: 3}
model: {d_model: 8, n_heads: 2, d_ff: 16, period: 24}
training: {epochs: 1, seeds: [0, 1]}
evaluation: {horizons: [1, 6, 12], settings: [1, 3]}
"""

STAGES = ("synth", "cluster", "fuse", "train", "evaluate", "ablate", "sweep")


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    config = root / "exp.yaml"
    config.write_text(FAST_CONFIG)
    out = root / "out"
    codes = {stage: run(stage, "--config", str(config), "--out", str(out)) for stage in STAGES}
    return config, out, codes


class TestPipeline:
    def test_all_stages_succeed(self, pipeline):
        _, _, codes = pipeline
        assert codes == dict.fromkeys(STAGES, 0)

    def test_artifacts(self, pipeline):
        _, out, _ = pipeline
        for name in ("zones.json", "split.json", "metrics.json", "ablation.json", "ablation.txt", "sweep.csv"):
            assert (out / name).is_file(), name
        assert (out / "data" / "parking.csv").is_file()
        assert sorted(p.name for p in (out / "models").iterdir()) == [
            "baselines.json",
            "transformer_s1_seed0.json",
            "transformer_s1_seed1.json",
            "transformer_s3_seed0.json",
            "transformer_s3_seed1.json",
        ]

    def test_provenance_everywhere(self, pipeline):
        config, out, _ = pipeline
        digest = ExperimentConfig.load(config).hash()
        for name in ("split.json", "metrics.json", "ablation.json", "train_report.json", "models/baselines.json"):
            prov = json.loads((out / name).read_text())["provenance"]
            assert prov["config_hash"] == digest
            assert {"seed", "tool_version"} <= set(prov)
        assert f"config_hash={digest}" in (out / "sweep.csv").read_text()
        assert f"config_hash={digest}" in (out / "ablation.txt").read_text()

    def test_ablation_grid(self, pipeline):
        _, out, _ = pipeline
        doc = json.loads((out / "ablation.json").read_text())
        assert doc["settings"] == [1, 3]
        assert set(doc["cells"]) == {"Transformer", "NLinear"}
        for by_setting in doc["cells"].values():
            assert set(by_setting) == {"1", "3"}
            assert all(len(reports) == 2 for reports in by_setting.values())

    def test_sweep_curves(self, pipeline):
        _, out, _ = pipeline
        rows = list(csv.DictReader(line for line in (out / "sweep.csv").read_text().splitlines() if not line.startswith("#")))
        models = {r["model"] for r in rows}
        assert models == {"Transformer/seed0", "Transformer/seed1", "NLinear", "HA", "AR"}
        for m in models:
            assert [int(r["horizon"]) for r in rows if r["model"] == m] == [1, 6, 12]

    def test_metrics(self, pipeline):
        _, out, _ = pipeline
        doc = json.loads((out / "metrics.json").read_text())
        assert doc["cost"]["params"] > 0 and doc["cost"]["macs"] > 0
        for report in doc["metrics"].values():
            assert np.isfinite(report["mse"]) and report["mse"] >= 0

    def test_rerun_is_idempotent(self, pipeline, tmp_path):
        config, out, _ = pipeline
        before = (out / "ablation.json").read_bytes()
        assert run("ablate", "--config", str(config), "--out", str(out)) == 0
        assert (out / "ablation.json").read_bytes() == before


class TestErrors:
    def test_evaluate_before_train(self, tmp_path, capsys):
        assert run("evaluate", "--out", str(tmp_path)) == cli.EXIT_DATA
        assert "'fuse'" in capsys.readouterr().err

    def test_missing_models_names_train(self, pipeline, tmp_path, capsys):
        config, out, _ = pipeline
        fresh = tmp_path / "o"
        fresh.mkdir()
        for name in ("split.json",):
            (fresh / name).write_bytes((out / name).read_bytes())
        (fresh / "frames").mkdir()
        for f in (out / "frames").iterdir():
            (fresh / "frames" / f.name).write_bytes(f.read_bytes())
        assert run("evaluate", "--config", str(config), "--out", str(fresh)) == cli.EXIT_DATA
        assert "'train'" in capsys.readouterr().err

    def test_cluster_without_data(self, tmp_path, capsys):
        assert run("cluster", "--out", str(tmp_path)) == cli.EXIT_DATA

    def test_bad_override(self, tmp_path, capsys):
        assert run("synth", "--out", str(tmp_path), "--set", "training.epochz=2") == cli.EXIT_CONFIG
        assert "epochz" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert run("synth", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path)) == cli.EXIT_CONFIG

    def test_bad_synth_section(self, tmp_path):
        config = tmp_path / "c.yaml"
        config.write_text("synth: {kappa: 2.0}\n")
        assert run("synth", "--config", str(config), "--out", str(tmp_path)) == cli.EXIT_CONFIG

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            run("frobnicate")


class TestConfig:
    def test_defaults_valid(self):
        cfg = ExperimentConfig.from_dict({})
        assert cfg.pre["window"] == 432 and cfg.pre["horizon"] == 144

    def test_overrides(self):
        cfg = ExperimentConfig.from_dict({}).with_overrides(["training.epochs=7", "model.calendar_features=[hour_of_day]"], seed=9)
        assert cfg.training["epochs"] == 7
        assert cfg.training["seeds"] == [9] and cfg.raw["synth"]["seed"] == 9
        assert cfg.raw["model"]["calendar_features"] == ["hour_of_day"]

    def test_hash_tracks_content(self):
        a = ExperimentConfig.from_dict({})
        assert a.hash() == ExperimentConfig.from_dict({}).hash()
        assert a.hash() != a.with_overrides(["training.lr=0.1"]).hash()

    @pytest.mark.parametrize(
        "doc",
        [
            {"preprocess": {"stride": 0}},
            {"evaluation": {"settings": [5]}},
            {"evaluation": {"horizons": [200]}},
            {"clustering": {"p": 0.5}},
            {"model": {"d_model": 10, "n_heads": 4}},
            {"bogus": {}},
        ],
    )
    def test_invalid(self, doc):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(doc)

    def test_set_syntax(self):
        with pytest.raises(ConfigError, match="key=value"):
            ExperimentConfig.from_dict({}).with_overrides(["training.epochs"])
