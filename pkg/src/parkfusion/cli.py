"""Command-line entry point: ``parkfusion <command> --config exp.yaml``.

Commands run one pipeline stage each and leave their artifacts in the
output directory, so later stages can be rerun on their own:

    synth -> cluster -> fuse -> train -> evaluate / ablate / sweep
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    ARModel,
    HAModel,
    NLinearModel,
    ar_fit,
    ar_predict_batch,
    ha_fit,
    ha_predict,
    nlinear_fit,
    nlinear_predict,
)
from .evaluation import (
    cost_report,
    evaluate,
    format_rows,
    horizon_sweep,
    mac_count,
    param_count,
    run_ablation,
    sweep_csv,
)
from .experiment import (
    ConfigError,
    DataError,
    ExperimentConfig,
    build_frames,
    cluster_lots,
    dumps,
    fit_transformer,
    history_series,
    load_dataset,
    plan_split,
    test_set,
    train_arrays,
)
from .model import TrainedModel, TrainingDiverged
from .pcz import load_zones, read_frame, save_zones, write_frame
from .preprocess import SplitPlan
from .synth import SynthConfig, SynthConfigError, generate, write_dataset

log = logging.getLogger("parkfusion")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class Workspace:
    """Artifact locations under the output directory."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out

    @property
    def zones(self) -> Path:
        return self.out / "zones.json"

    @property
    def split(self) -> Path:
        return self.out / "split.json"

    @property
    def frames_dir(self) -> Path:
        return self.out / "frames"

    @property
    def models_dir(self) -> Path:
        return self.out / "models"

    def transformer(self, setting: int, seed: int) -> Path:
        return self.models_dir / f"transformer_s{setting}_seed{seed}.json"

    @property
    def baselines(self) -> Path:
        return self.models_dir / "baselines.json"

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise DataError(f"{path} is missing; run the '{producer}' command first")
        return path

    def write(self, path: Path, text: str) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        log.info("wrote %s", path)


# -- loaders for upstream artifacts ------------------------------------------------------


def _load_frames(ws: Workspace):
    ws.require(ws.split, "fuse")
    doc = json.loads(ws.split.read_text())
    frames = {}
    for zid in doc["zones"]:
        path = ws.require(ws.frames_dir / f"{zid}.csv", "fuse")
        with open(path) as fh:
            frames[zid] = read_frame(fh)
    split = SplitPlan(frozenset(doc["train_zones"]), frozenset(doc["test_zones"]), doc["train_fraction"], doc["seed"])
    return frames, split


def _load_transformer(ws: Workspace, setting: int, seed: int) -> TrainedModel:
    return TrainedModel.load(ws.require(ws.transformer(setting, seed), "train"))


def _load_baselines(ws: Workspace):
    doc = json.loads(ws.require(ws.baselines, "train").read_text())
    ha = {lot: HAModel.from_dict(d) for lot, d in doc["ha"].items()}
    ar = {lot: ARModel.from_dict(d) for lot, d in doc["ar"].items()}
    return ha, ar, NLinearModel.from_dict(doc["nlinear"])


def _predictions(ws: Workspace, frames, split, setting: int, seeds) -> tuple[object, dict]:
    cfg = ws.cfg
    es = test_set(frames, split, setting, cfg)
    preds = {}
    for seed in seeds:
        model = _load_transformer(ws, setting, seed)
        preds[f"Transformer/seed{seed}"] = model.predict(es.x, es.timestamps)
    ha, ar, nl = _load_baselines(ws)
    H, step = cfg.pre["horizon"], cfg.pre["step"]
    preds["NLinear"] = nlinear_predict(nl, es.x)
    ha_pred = np.empty_like(es.y)
    ar_pred = np.empty_like(es.y)
    for lot in sorted(set(es.lots.tolist())):
        rows = es.lots == lot
        future = es.timestamps[rows][:, -1:] + step * np.arange(1, H + 1)
        ha_pred[rows] = ha_predict(ha[lot], future)
        ar_pred[rows] = ar_predict_batch(ar[lot], es.x[rows], H)
    preds["HA"] = ha_pred
    preds["AR"] = ar_pred
    return es, preds


# -- commands -------------------------------------------------------------------------------


def cmd_synth(ws: Workspace) -> None:
    """Generate a synthetic dataset into the data directory."""
    cfg = ws.cfg
    try:
        sc = SynthConfig.from_dict(cfg.raw["synth"])
    except (SynthConfigError, TypeError) as exc:
        raise ConfigError(f"synth section: {exc}") from exc
    data_dir = cfg.data_path("parking").parent
    data = generate(sc)
    data.manifest["provenance"] = cfg.provenance(sc.seed)
    write_dataset(data, data_dir)
    log.info("generated %d stays into %s", len(data.parking), data_dir)


def cmd_cluster(ws: Workspace) -> None:
    """Cluster lots into zones; writes zones.json."""
    cfg = ws.cfg
    data = load_dataset(cfg)
    zones, report = cluster_lots(data, cfg)
    save_zones(zones, ws.zones, {"provenance": cfg.provenance(), "report": report, "drops": data.drops})
    rows = [["zone", "lots"]] + [[z.zone_id, " ".join(z.lot_ids)] for z in zones]
    ws.write(ws.out / "cluster_report.txt", f"# config_hash={cfg.hash()}\n" + format_rows(rows))


def cmd_fuse(ws: Workspace) -> None:
    """Build per-zone feature frames and the zone split."""
    cfg = ws.cfg
    zones = load_zones(ws.require(ws.zones, "cluster"))
    data = load_dataset(cfg)
    frames = build_frames(data, zones, cfg)
    ws.frames_dir.mkdir(parents=True, exist_ok=True)
    for zid, frame in frames.items():
        with open(ws.frames_dir / f"{zid}.csv", "w", newline="") as fh:
            write_frame(frame, fh, cfg.provenance())
    split = plan_split(frames, cfg)
    doc = {
        "provenance": cfg.provenance(),
        "zones": sorted(frames),
        "train_zones": sorted(split.train_zones),
        "test_zones": sorted(split.test_zones),
        "train_fraction": split.train_fraction,
        "seed": split.seed,
    }
    ws.write(ws.split, dumps(doc))


def cmd_train(ws: Workspace) -> None:
    """Train forecasters for every feature setting and seed, plus baselines."""
    cfg = ws.cfg
    frames, split = _load_frames(ws)
    curves = {}
    for setting in cfg.evaluation["settings"]:
        arrays = train_arrays(frames, split, setting, cfg)
        for seed in cfg.training["seeds"]:
            log.info("training setting %d seed %d on %d windows", setting, seed, len(arrays[0]))
            model = fit_transformer(arrays, cfg, setting, seed)
            ws.models_dir.mkdir(parents=True, exist_ok=True)
            model.save(ws.transformer(setting, seed))
            curves[f"s{setting}_seed{seed}"] = model.train_loss_curve
    # baselines only see the target channel, so one fit serves every setting
    x, _, y = train_arrays(frames, split, 4, cfg)
    nl = nlinear_fit(x, y, ridge=cfg.training["nlinear_ridge"])
    ev = cfg.evaluation
    ha, ar = {}, {}
    for lot, (ts, values) in history_series(frames, split, cfg).items():
        ha[lot] = ha_fit(values, ts, cfg.pre["step"]).to_dict()
        ar[lot] = ar_fit(values, ev["ar_p"], ev["ar_d"]).to_dict()
    doc = {"provenance": cfg.provenance(), "nlinear": nl.to_dict(), "ha": ha, "ar": ar}
    ws.write(ws.baselines, dumps(doc))
    ws.write(ws.out / "train_report.json", dumps({"provenance": cfg.provenance(), "loss_curves": curves}))


def cmd_evaluate(ws: Workspace) -> None:
    """Score all models on the test zones; writes metrics and cost."""
    cfg = ws.cfg
    frames, split = _load_frames(ws)
    setting = cfg.evaluation["settings"][0]
    es, preds = _predictions(ws, frames, split, setting, cfg.training["seeds"])
    eps = cfg.evaluation["mape_eps"]
    reports = {name: evaluate(p, es.y, es.lots, eps) for name, p in preds.items()}
    mc = cfg.model_config(es.x.shape[-1])
    cost = cost_report(mc)
    doc = {
        "provenance": cfg.provenance(),
        "setting": setting,
        "metrics": {k: r.to_dict() for k, r in reports.items()},
        "cost": {
            "params_millions": cost.params_millions,
            "macs_billions": cost.macs_billions,
            "params": param_count(mc),
            "macs": mac_count(mc),
        },
    }
    ws.write(ws.out / "metrics.json", dumps(doc))
    rows = [["model", "MSE", "MAE", "MAPE %"]]
    for name, r in reports.items():
        rows.append([name, f"{r.mse:.4f}", f"{r.mae:.4f}", f"{r.mape:.2f}"])
    footer = f"Transformer cost: {cost.params_millions:.4f} M params, {cost.macs_billions:.4f} G MACs\n"
    ws.write(ws.out / "metrics.txt", f"# config_hash={cfg.hash()}\n" + format_rows(rows) + footer)


def cmd_ablate(ws: Workspace) -> None:
    """Fill the model by feature-setting grid."""
    cfg = ws.cfg
    frames, split = _load_frames(ws)
    settings = cfg.evaluation["settings"]
    seeds = cfg.training["seeds"]
    eval_sets = {s: test_set(frames, split, s, cfg) for s in settings}
    _, _, nl = _load_baselines(ws)

    def transformer(setting, seed):
        es = eval_sets[setting]
        return _load_transformer(ws, setting, seed).predict(es.x, es.timestamps)

    def nlinear(setting, seed):
        return nlinear_predict(nl, eval_sets[setting].x)

    table = run_ablation(eval_sets, {"Transformer": transformer, "NLinear": nlinear}, settings, seeds, cfg.evaluation["mape_eps"])
    ws.write(ws.out / "ablation.json", dumps({"provenance": cfg.provenance(), **table.to_dict()}))
    ws.write(ws.out / "ablation.txt", f"# config_hash={cfg.hash()}\n" + table.format_table())


def cmd_sweep(ws: Workspace) -> None:
    """Error per forecast horizon as CSV curves."""
    cfg = ws.cfg
    frames, split = _load_frames(ws)
    setting = cfg.evaluation["settings"][0]
    es, preds = _predictions(ws, frames, split, setting, cfg.training["seeds"])
    curves = horizon_sweep(preds, es.y, cfg.evaluation["horizons"], cfg.evaluation["mape_eps"])
    prov = cfg.provenance()
    header = "".join(f"# {k}={v}\n" for k, v in prov.items())
    ws.write(ws.out / "sweep.csv", header + sweep_csv(curves))


COMMANDS = {
    "synth": cmd_synth,
    "cluster": cmd_cluster,
    "fuse": cmd_fuse,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parkfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", type=Path, help="experiment YAML file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--out", type=Path, default=Path("out"), help="artifact directory (default: out)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key, e.g. training.epochs=2")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
        cfg = cfg.with_overrides(args.set, args.seed)
        cfg.out_dir = args.out
        COMMANDS[args.command](Workspace(cfg, args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
