"""Command-line entry point: ``qoetune <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from ..predictor.hybrid import HybridExitPredictor
from ..predictor.features import FeatureSpec
from ..predictor.train import classification_metrics
from ..users import synthesize_logs
from .config import ConfigError, ExperimentConfig
from .experiment import CellError, default_sweep, run_experiment
from .logs import ROW_SETS, log_from_result, read_log, replay_features, select_rows, train_predictor, write_log
from .reports import ReportError, correlation_report, heatmap_report, summarize, write_json
from .state import StateError

MODE_FLAGS = {"fixed": "fixed", "lingxi-fixed": "lingxi_fixed", "lingxi-bayes": "lingxi_bayes"}


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "mode", None):
        cfg.mode = MODE_FLAGS[args.mode]
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "out", None):
        cfg.out = args.out
    return cfg


def cmd_simulate(args) -> dict:
    cfg = _load(args)
    return run_experiment(cfg, cfg.out)


def cmd_sweep(args) -> dict:
    cfg = _load(args)
    cfg.mode = "fixed"
    if not cfg.fixed_params:
        cfg.fixed_params = default_sweep(cfg.param_type(), args.points)
    return run_experiment(cfg, cfg.out)


def cmd_synth_logs(args) -> dict:
    cfg = _load(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = cfg.build_manifest()
    res = synthesize_logs(cfg.build_users(manifest.n_levels), cfg.build_traces(), manifest, cfg.build_abr(),
                          seed=int(cfg.seeds[0]), sessions_per_day=cfg.sessions_per_day, days=cfg.days,
                          buffer_max=cfg.buffer_max)
    log = log_from_result(res, f"s{cfg.seeds[0]}")
    path = out / "log.csv"
    write_log(log, path)
    return {"log": str(path), "rows": int(log["exited"].size), "exits": int(log["exited"].sum()),
            "stall_rows": int((log["stall_s"] > 0).sum())}


def cmd_train_predictor(args) -> dict:
    cfg = _load(args)
    manifest = cfg.build_manifest()
    log = read_log(args.log)
    spec = FeatureSpec.for_setup(manifest, cfg.build_traces())
    pred, metrics = train_predictor(log, manifest, spec, rows=args.rows, lr=args.lr, epochs=args.epochs,
                                    seed=args.seed or 0, balanced=not args.unbalanced)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    pred.save(out / "predictor.json")
    write_json(out / "train_metrics.json", metrics)
    return {"predictor": str(out / "predictor.json"), **metrics}


def cmd_eval_predictor(args) -> dict:
    cfg = _load(args)
    manifest = cfg.build_manifest()
    pred = HybridExitPredictor.load(args.predictor)
    log = read_log(args.log)
    mask = select_rows(log, args.rows)
    feats = replay_features(log, manifest.segment_length_s, pred.spec)["features"][mask]
    y_hat = (pred.net.predict_proba(feats)[:, 1] >= 0.5).astype(int)
    metrics = classification_metrics(log["exited"][mask].astype(int), y_hat)
    metrics["n"] = int(mask.sum())
    return metrics


def cmd_report(args) -> dict:
    d = Path(args.results)
    out: dict = {"summary": summarize(d / "results.csv")}
    if args.heatmap:
        out["heatmap"] = heatmap_report(d / "results.csv", out_csv=d / "heatmap.csv")
    if args.correlation:
        out["correlation"] = correlation_report(d / "days.csv", out_csv=d / "scatter.csv")
    write_json(d / "report.json", out)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qoetune", description="Trace-driven ABR simulator with per-user QoE tuning.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mode=True):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, help="override the seed list with a single seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--jobs", type=int, help="worker processes (default: available cores)")
        if mode:
            sp.add_argument("--mode", choices=sorted(MODE_FLAGS))

    sp = sub.add_parser("simulate", help="run an experiment")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="fixed-parameter sweep over the parameter box")
    common(sp, mode=False)
    sp.add_argument("--points", type=int, default=5, help="grid points per parameter axis")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("synth-logs", help="synthesize playback logs from the configured users")
    common(sp, mode=False)
    sp.set_defaults(func=cmd_synth_logs)

    sp = sub.add_parser("train-predictor", help="train the hybrid exit predictor on a log")
    common(sp, mode=False)
    sp.add_argument("--log", required=True)
    sp.add_argument("--rows", choices=ROW_SETS, default="stall")
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--epochs", type=int, default=40)
    sp.add_argument("--unbalanced", action="store_true", help="skip class rebalancing")
    sp.set_defaults(func=cmd_train_predictor)

    sp = sub.add_parser("eval-predictor", help="score a trained predictor on a log")
    common(sp, mode=False)
    sp.add_argument("--predictor", required=True)
    sp.add_argument("--log", required=True)
    sp.add_argument("--rows", choices=ROW_SETS, default="stall")
    sp.set_defaults(func=cmd_eval_predictor)

    sp = sub.add_parser("report", help="summaries and study reports from a results directory")
    sp.add_argument("results", help="directory holding results.csv and days.csv")
    sp.add_argument("--heatmap", action="store_true", help="rule-grid heatmap of selected stall parameter")
    sp.add_argument("--correlation", action="store_true", help="stall-exit rate vs. selected beta")
    sp.set_defaults(func=cmd_report)
    return p


def _jsonable(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    return str(o)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = args.func(args)
    except (ConfigError, CellError, ReportError, StateError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(out, indent=2, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
