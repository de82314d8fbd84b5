"""Command-line entry point: synth | train | eval | analyze.

Flags override config-file values; every run writes its resolved config next
to its outputs so results can be reproduced from that file alone. Exit codes:
0 success, 2 config/validation error, 3 runtime numerical error, 4 IO error.
HDMOE_LOG controls log verbosity (debug/info/warning).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_desk_preset, load_config, save_config
from .data import generate_synthetic, load_samples, make_folds, write_dataset
from .errors import ConfigError, DataError, MetricError, NumericsError
from .evaluation import (
    RiskTable,
    c_index,
    expert_histogram,
    km_curves_csv,
    km_estimate,
    log_rank_p,
    redundancy_score,
    stability_report,
    welch_t_test,
)
from .model import forward, load_checkpoint, save_checkpoint
from .trainer import (
    FoldResult,
    predict_fold,
    predictions_to_csv,
    split_fold,
    train_fold,
)

log = logging.getLogger("hdmoe.cli")


def _setup_logging() -> None:
    level_name = os.environ.get("HDMOE_LOG", "warning").strip().lower()
    level = {"debug": logging.DEBUG, "info": logging.INFO, "warning": logging.WARNING}.get(
        level_name, logging.WARNING
    )
    logging.basicConfig(level=level, format="%(name)s %(levelname)s %(message)s")


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "desk", False):
        cfg = apply_desk_preset(cfg)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg.validate()


def _load_dataset(cfg: RunConfig):
    if not cfg.manifest:
        raise ConfigError("config.manifest is required for this command")
    records = load_samples(cfg.manifest)
    if records and records[0].features_a.shape[1] != cfg.d_in:
        raise ConfigError(
            f"dataset feature width {records[0].features_a.shape[1]} != config d_in {cfg.d_in}"
        )
    return records


def cmd_synth(cfg: RunConfig) -> int:
    out_dir = Path(cfg.out_dir)
    rng = np.random.default_rng([cfg.seed, 0x5E])
    records, truths = generate_synthetic(cfg.synth_config(), rng)
    manifest = write_dataset(out_dir, records, truths)
    save_config(dataclasses.replace(cfg, manifest=str(manifest)), out_dir / "config.json")
    print(f"wrote {len(records)} samples to {manifest}")
    return 0


def _median_split(table: RiskTable) -> tuple[np.ndarray, np.ndarray]:
    median = float(np.median(table.risks))
    high = table.risks > median
    if not high.any() or high.all():
        raise MetricError("median split degenerate: all risks on one side")
    return high, ~high


def _fold_metrics(table: RiskTable) -> dict:
    out = {"cindex": c_index(table)}
    try:
        high, low = _median_split(table)
        _, lr_p = log_rank_p(
            table.times[high], table.events[high], table.times[low], table.events[low]
        )
        _, tt_p = welch_t_test(table.risks[high], table.risks[low])
        out["logrank_p"] = lr_p
        out["ttest_p"] = tt_p
    except MetricError as exc:
        log.warning("fold stratification tests skipped: %s", exc)
        out["logrank_p"] = None
        out["ttest_p"] = None
    return out


def _write_metrics(path: Path, per_fold: dict, extra: dict | None = None) -> None:
    cindexes = [m["cindex"] for m in per_fold.values()]
    report = {
        "folds": per_fold,
        "overall": {
            "mean": float(np.mean(cindexes)),
            "std": float(np.std(cindexes)),
        },
    }
    if extra:
        report.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(cfg: RunConfig, parallel_folds: int = 1, pin_segment: int | None = None) -> int:
    records = _load_dataset(cfg)
    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    if any(r.fold < 0 for r in records):
        records = make_folds(records, cfg.k_folds, cfg.seed)
    fold_ids = sorted({r.fold for r in records})

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.json")
    with open(out_dir / "folds.csv", "w", encoding="utf-8") as fh:
        fh.write("sample_id,fold\n")
        for r in records:
            fh.write(f"{r.sample_id},{r.fold}\n")

    def run_one(fold_id: int) -> tuple[FoldResult, list]:
        result = train_fold(records, fold_id, model_cfg, train_cfg)
        pred_rng = np.random.default_rng([cfg.seed, fold_id, 0x9E4])
        rows = predict_fold(
            records, fold_id, result.params, result.edges, model_cfg, pred_rng,
            pin_segment=pin_segment,
        )
        return result, rows

    if parallel_folds > 1:
        with ThreadPoolExecutor(max_workers=parallel_folds) as pool:
            outcomes = dict(zip(fold_ids, pool.map(run_one, fold_ids)))
    else:
        outcomes = {fid: run_one(fid) for fid in fold_ids}

    per_fold = {}
    all_rows = []
    for fid in fold_ids:
        result, rows = outcomes[fid]
        fold_dir = out_dir / f"fold{fid}"
        fold_dir.mkdir(exist_ok=True)
        save_checkpoint(
            fold_dir / "checkpoint.json",
            result.params,
            meta={
                "fold": fid,
                "bin_edges": list(result.edges.edges),
                "num_bins": result.edges.num_bins,
                "seed": cfg.seed,
            },
        )
        with open(fold_dir / "run_log.csv", "w", encoding="utf-8") as fh:
            fh.write("\n".join(result.log_rows) + ("\n" if result.log_rows else ""))
        with open(fold_dir / "predictions.csv", "w", encoding="utf-8") as fh:
            fh.write(predictions_to_csv(rows, model_cfg.num_bins))
        all_rows.extend(rows)
        table = RiskTable.from_predictions(rows)
        per_fold[str(fid)] = _fold_metrics(table)
        print(f"fold {fid}: c-index {per_fold[str(fid)]['cindex']:.4f}")

    with open(out_dir / "predictions.csv", "w", encoding="utf-8") as fh:
        fh.write(predictions_to_csv(all_rows, model_cfg.num_bins))
    _write_metrics(out_dir / "metrics.json", per_fold)
    cindexes = [m["cindex"] for m in per_fold.values()]
    print(f"overall c-index {np.mean(cindexes):.4f} +/- {np.std(cindexes):.4f}")
    return 0


def _checkpoint_paths(checkpoint: str) -> list[Path]:
    path = Path(checkpoint)
    if path.is_dir():
        found = sorted(path.glob("fold*/checkpoint.json"))
        if not found:
            raise FileNotFoundError(f"no fold checkpoints under {path}")
        return found
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return [path]


def _records_for_checkpoint(records, meta, folds_file: Path | None):
    """Held-out split when fold assignments are recoverable, else all samples."""
    fold = meta.get("fold")
    if fold is None:
        return records
    by_id = {}
    if folds_file is not None and folds_file.exists():
        with open(folds_file, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                sample_id, f = line.strip().split(",")
                by_id[sample_id] = int(f)
        subset = [r for r in records if by_id.get(r.sample_id) == fold]
        return subset or records
    if any(r.fold >= 0 for r in records):
        _, test = split_fold(records, fold)
        return test or records
    return records


def cmd_eval(
    cfg: RunConfig,
    checkpoint: str,
    repeats: int | None = None,
    pin_segment: int | None = None,
) -> int:
    records = _load_dataset(cfg)
    model_cfg = cfg.model_config()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.json")

    paths = _checkpoint_paths(checkpoint)
    per_fold = {}
    stability = {}
    pooled_risks, pooled_times, pooled_events = [], [], []
    for path in paths:
        params, meta = load_checkpoint(path, model_cfg)
        fold = meta.get("fold", 0)
        folds_file = path.parent.parent / "folds.csv" if path.parent.name.startswith("fold") else None
        subset = _records_for_checkpoint(records, meta, folds_file)
        rng = np.random.default_rng([cfg.seed, int(fold), 0xE7A1])
        pins = (pin_segment, pin_segment)
        risks = np.array(
            [
                forward(r, params, model_cfg, rng, pin_segments=pins, requires_grad=False).prediction.risk
                for r in subset
            ]
        )
        times = np.array([r.time_months for r in subset])
        events = np.array([1 - r.censored for r in subset])
        table = RiskTable(risks=risks, times=times, events=events)
        per_fold[str(fold)] = _fold_metrics(table)
        pooled_risks.append(risks)
        pooled_times.append(times)
        pooled_events.append(events)
        if repeats:
            srng = np.random.default_rng([cfg.seed, int(fold), 0x57AB])
            scores, mean, std = stability_report(params, model_cfg, subset, repeats, srng)
            stability[str(fold)] = {"scores": scores, "mean": mean, "std": std}

    risks = np.concatenate(pooled_risks)
    times = np.concatenate(pooled_times)
    events = np.concatenate(pooled_events)
    table = RiskTable(risks=risks, times=times, events=events)
    high, low = _median_split(table)
    groups = {
        "high_risk": km_estimate(times[high], events[high]),
        "low_risk": km_estimate(times[low], events[low]),
    }
    with open(out_dir / "km_curves.csv", "w", encoding="utf-8") as fh:
        fh.write(km_curves_csv(groups))
    extra = {"stability": stability} if stability else None
    _write_metrics(out_dir / "metrics.json", per_fold, extra)
    overall = [m["cindex"] for m in per_fold.values()]
    print(f"eval c-index {np.mean(overall):.4f} +/- {np.std(overall):.4f}")
    if stability:
        for fold, s in stability.items():
            print(f"fold {fold} stability: mean {s['mean']:.4f} std {s['std']:.5f}")
    return 0


def cmd_analyze(cfg: RunConfig, checkpoint: str, pin_segment: int | None = None) -> int:
    records = _load_dataset(cfg)
    model_cfg = cfg.model_config()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.json")

    path = _checkpoint_paths(checkpoint)[0]
    params, _ = load_checkpoint(path, model_cfg)

    rng = np.random.default_rng([cfg.seed, 0xA7A])
    pins = (pin_segment, pin_segment)
    trace_groups = [
        forward(r, params, model_cfg, rng, pin_segments=pins, requires_grad=False).traces
        for r in records
    ]
    counts = expert_histogram(trace_groups)
    router_names = ["level1_a", "level1_b", "level2"]
    for name, row in zip(router_names, counts):
        with open(out_dir / f"histogram_{name}.csv", "w", encoding="utf-8") as fh:
            fh.write("expert,count\n")
            for j, c in enumerate(row):
                fh.write(f"{j},{int(c)}\n")

    summary_lines = ["modality,delta"]
    for modality in ("a", "b"):
        rng_m = np.random.default_rng([cfg.seed, 0xD0D, ord(modality)])
        pre, post, delta = redundancy_score(params, model_cfg, records, 1, modality, rng_m)
        np.savetxt(out_dir / f"redundancy_{modality}_pre.csv", pre, delimiter=",", fmt="%.17g")
        np.savetxt(out_dir / f"redundancy_{modality}_post.csv", post, delimiter=",", fmt="%.17g")
        summary_lines.append(f"{modality},{delta:.17g}")
    with open(out_dir / "redundancy_summary.csv", "w", encoding="utf-8") as fh:
        fh.write("\n".join(summary_lines) + "\n")
    print(f"analysis written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "train", "eval", "analyze"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", type=str, default=None, help="override output directory")
        p.add_argument("--desk", action="store_true", help="desk-scale preset (dims / 8)")
        p.add_argument("--pin-segment", type=int, default=None, help="pin the fusion segment value")
        if name == "train":
            p.add_argument("--parallel-folds", type=int, default=1)
        if name in ("eval", "analyze"):
            p.add_argument("--checkpoint", type=str, required=True,
                           help="checkpoint file or training output directory")
        if name == "eval":
            p.add_argument("--repeats", type=int, default=None,
                           help="stability repeats with independent fusion draws")
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, parallel_folds=args.parallel_folds, pin_segment=args.pin_segment)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, repeats=args.repeats, pin_segment=args.pin_segment)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.checkpoint, pin_segment=args.pin_segment)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, MetricError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
