"""Command-line entry point: ``mtlseg {synth-data,train,evaluate,report}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import report as R
from . import trainer as TR

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
ARMS = {False: "mtn", True: "baseline"}

logger = logging.getLogger("mtlseg")


class UsageError(Exception):
    """Bad arguments, bad config or inputs that do not fit together."""


def _load_config(path) -> C.RunConfig:
    try:
        cfg = C.load(path)
        cfg.train_config().validate()
        cfg.ring_spec().validate()
    except (C.ConfigError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return cfg


def _load_data(path) -> D.Dataset:
    if path is None or not Path(path, "manifest.json").is_file():
        raise UsageError(f"no dataset found at {path} (expected manifest.json)")
    try:
        return D.load_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from exc


# ------------------------------------------------------------------ commands


def cmd_synth_data(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    syn = cfg.synth
    ds = D.generate_synthetic_dataset(cfg.ring_spec(), syn.n_patients, syn.phases, syn.slices)
    D.save_dataset(ds, out)
    cfg.dataset_path = str(out)
    cfg.save(out / "config.json")
    areas = [s.area_mm2 for s in ds.samples]
    print(f"patients: {len(ds.patient_ids)}")
    print(f"slices: {len(ds.samples)}")
    print(f"mean area (mm^2): {np.mean(areas):.2f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.select_on:
        cfg.train.select_on = args.select_on
    data_path = args.data or cfg.dataset_path
    dataset = _load_data(data_path)
    tcfg = cfg.train_config()
    arm = ARMS[args.baseline]
    out = Path(args.out) / arm
    out.mkdir(parents=True, exist_ok=True)
    cfg.dataset_path, cfg.output_dir = str(data_path), str(args.out)
    cfg.save(out / "config.json")
    results, _ = TR.cross_validate(dataset, tcfg, multi_task=not args.baseline, out_dir=out,
                                   resume=args.resume, jobs=args.jobs)
    summary = []
    for res in results:
        row = {"fold": res.fold.fold_id, "best_epoch": res.best_epoch, "best_dice": res.best_dice}
        if not args.baseline:
            s1, s2, ratio = TR.learned_uncertainty_report(res.log, tcfg.loss_form)
            row.update(s1=s1, s2=s2, weight_ratio=ratio)
        summary.append(row)
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    root = Path(args.checkpoints)
    mtn_dir, unet_dir = root / ARMS[False], root / ARMS[True]
    for d in (mtn_dir, unet_dir):
        if not (d / "config.json").is_file():
            raise UsageError(f"{d} has no config.json; train both arms into {root} first")
    cfg = _load_config(mtn_dir / "config.json")
    other = _load_config(unet_dir / "config.json")
    if cfg.net_config() != other.net_config() or cfg.seed != other.seed:
        raise UsageError("multi-task and baseline runs were trained with different configs")
    dataset = _load_data(args.data)
    try:
        scores, areas = R.evaluate_checkpoints(mtn_dir, unet_dir, dataset, cfg.train_config())
    except R.MismatchError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    R.write_csv(out / "scores.csv", scores, R.SCORE_FIELDS)
    R.write_csv(out / "areas.csv", areas, R.AREA_FIELDS)
    print(f"volumes scored: {len(scores) // len(R.SEG_METHODS)}; slices: {len(areas)}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_config(args.config)
    src = Path(args.scores)
    paths = [src / "scores.csv", src / "areas.csv"]
    for p in paths:
        if not p.is_file():
            raise UsageError(f"missing {p}")
    scores, areas = (R.read_csv(p) for p in paths)
    if not scores or not areas:
        raise UsageError(f"{src}: scores.csv and areas.csv must not be empty")
    reports = R.build_reports(scores, areas, cfg.report.n_resamples, cfg.report.confidence, cfg.seed)
    R.write_reports(reports, args.out)
    for name, rows in reports.items():
        print(f"{name}: {len(rows)} rows")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtlseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate the synthetic ring dataset")
    s.add_argument("--config", help="run config JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", help="cross-validated training of one arm")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory (falls back to dataset_path in the config)")
    t.add_argument("--out", required=True)
    t.add_argument("--baseline", action="store_true", help="single-task network without regression head")
    t.add_argument("--resume", action="store_true", help="continue from last.ckpt where present")
    t.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    t.add_argument("--select-on", choices=("test", "train"),
                   help="split whose Dice picks the best epoch (overrides train.select_on)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score held-out patients of both trained arms")
    e.add_argument("--checkpoints", required=True, help="the --out directory used for train")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="tables, intervals, KS tests and correlations")
    r.add_argument("--scores", required=True, help="directory holding scores.csv and areas.csv")
    r.add_argument("--out", required=True)
    r.add_argument("--config", help="run config JSON (report section and seed)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
