"""Checkpoint evaluation and the tabular reports built on the stats module.

``evaluate`` produces two row sets:

* scores: one row per (volume, method) with Dice, Jaccard, MSD and HD;
* areas: one row per test slice with the gold area and three estimates
  (MTN regression head, MTN segmentation, baseline segmentation).

``build_reports`` turns them into ``table1.csv``, ``table2.csv``,
``mad_ci.csv``, ``ks.csv`` and ``correlation.csv``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict
from itertools import combinations
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from . import network as N
from . import stats as S
from . import trainer as TR

logger = logging.getLogger(__name__)

SEG_METHODS = ("unet", "mtn")
METRICS = ("dice", "jaccard", "msd_mm", "hd_mm")
AREA_METHODS = {"reg_mtn": "area_reg_mtn_mm2", "seg_mtn": "area_seg_mtn_mm2",
                "seg_unet": "area_seg_unet_mm2"}
PHASE_GROUPS = ("ED", "ES", "all")

SCORE_FIELDS = ["patient", "phase", "phase_label", "method", *METRICS]
AREA_FIELDS = ["patient", "phase", "phase_label", "slice", "region", "area_true_mm2",
               *AREA_METHODS.values()]


class MismatchError(ValueError):
    """Checkpoints do not belong to the supplied config or dataset."""


def phase_label(dataset: D.Dataset, patient: str, phase: int) -> str:
    meta = dataset.patients.get(patient, {})
    if phase == meta.get("ed_phase"):
        return "ED"
    if phase == meta.get("es_phase"):
        return "ES"
    return ""


def score_volumes(pairs, method: str) -> list[dict]:
    """``pairs`` yields ``((patient, phase, label), pred Mask3D, gold Mask3D)``."""
    rows = []
    for (pid, phase, label), pred, gold in pairs:
        sc = M.evaluate_volume(pred, gold)
        rows.append({"patient": pid, "phase": phase, "phase_label": label, "method": method,
                     **asdict(sc)})
    return rows


# ---------------------------------------------------------------- evaluation


def _load_fold(path: Path, cfg: TR.TrainConfig, fold: D.FoldSplit, multi_task: bool) -> N.UNet:
    if not path.is_file():
        raise MismatchError(f"missing checkpoint {path}")
    net, header, _ = N.load_checkpoint(path)
    if header["config"] != asdict(cfg.net):
        raise MismatchError(f"{path}: network config differs from the run config")
    if bool(header["multi_task"]) != multi_task:
        raise MismatchError(f"{path}: expected a {'multi-task' if multi_task else 'baseline'} network")
    tested = tuple(header.get("extra", {}).get("test_patients", ()))
    if tested != fold.test:
        raise MismatchError(f"{path}: checkpoint test patients {list(tested)} do not match "
                            f"fold {fold.fold_id} of this dataset {list(fold.test)}")
    return net


def evaluate_checkpoints(mtn_dir, unet_dir, dataset: D.Dataset,
                         cfg: TR.TrainConfig) -> tuple[list[dict], list[dict]]:
    """Score the best checkpoint of every trained fold on its held-out patients."""
    folds = D.split_folds(dataset.patient_ids, cfg.seed)
    mtn_dir, unet_dir = Path(mtn_dir), Path(unet_dir)
    fold_ids = sorted(int(p.name[4:]) for p in mtn_dir.glob("fold*") if p.name[4:].isdigit())
    if not fold_ids:
        raise MismatchError(f"no fold directories under {mtn_dir}")
    scores, areas = [], []
    for k in fold_ids:
        if k >= len(folds):
            raise MismatchError(f"fold {k} does not exist for this dataset")
        fold = folds[k]
        mtn = _load_fold(mtn_dir / f"fold{k}" / "best.ckpt", cfg, fold, True)
        unet = _load_fold(unet_dir / f"fold{k}" / "best.ckpt", cfg, fold, False)
        test = TR.prepare_test(dataset, fold, cfg)
        vm = TR.volume_predictions(mtn, test, dataset.slice_thickness_mm)
        vu = TR.volume_predictions(unet, test, dataset.slice_thickness_mm)
        labels = {key: phase_label(dataset, *key) for key, *_ in vm}
        for method, vols in (("unet", vu), ("mtn", vm)):
            scores += score_volumes((((*key, labels[key]), pred, gold)
                                     for key, _, gold, pred, _ in vols), method)
        for (key, idx, gold, pred_m, reg), (_, _, _, pred_u, _) in zip(vm, vu):
            regions = S.classify_regions(list(gold.voxels))
            if regions.degenerate:
                logger.warning("volume %s has fewer than five foreground slices", key)
            for j, i in enumerate(idx):
                s = test.samples[i]
                areas.append({
                    "patient": key[0], "phase": key[1], "phase_label": labels[key],
                    "slice": s.slice_index, "region": regions.labels[j] or "",
                    "area_true_mm2": s.area_mm2,
                    "area_reg_mtn_mm2": float(reg[j]),
                    "area_seg_mtn_mm2": M.mask_area(pred_m.voxels[j], s.spacing_mm),
                    "area_seg_unet_mm2": M.mask_area(pred_u.voxels[j], s.spacing_mm),
                })
    scores.sort(key=lambda r: (r["patient"], r["phase"], SEG_METHODS.index(r["method"])))
    areas.sort(key=lambda r: (r["patient"], r["phase"], r["slice"]))
    return scores, areas


# ------------------------------------------------------------------- CSV I/O


def write_csv(path, rows: list[dict], fieldnames: list[str]) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.DictWriter(fp, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fieldnames})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fp:
        return list(csv.DictReader(fp))


def _num(v) -> float:
    return float(v) if v not in ("", None) else math.nan


# ------------------------------------------------------------------- reports


def _in_group(row: dict, group: str) -> bool:
    return group == "all" or row["phase_label"] == group


def table1(score_rows, n_resamples: int = 1000, confidence: float = 0.99, seed: int = 0) -> list[dict]:
    """Mean, std and bootstrap CI of each metric per phase group and method.

    Volumes whose surface distance is undefined (empty prediction) are left
    out of that metric and counted in ``n_missing``.
    """
    methods = [m for m in SEG_METHODS if any(r["method"] == m for r in score_rows)]
    rows = []
    for metric in METRICS:
        for group in PHASE_GROUPS:
            for method in methods:
                vals = np.array([_num(r[metric]) for r in score_rows
                                 if r["method"] == method and _in_group(r, group)])
                ok = vals[~np.isnan(vals)]
                row = {"metric": metric, "phase_group": group, "method": method,
                       "n": int(ok.size), "n_missing": int(vals.size - ok.size)}
                if ok.size:
                    ci = S.bootstrap_ci_mean(ok, n_resamples, confidence, seed)
                    row.update(mean=ci.point_mean, std=float(ok.std()), ci_low=ci.ci_low,
                               ci_high=ci.ci_high)
                rows.append(row)
    return rows


def _area_methods(area_rows) -> list[str]:
    return [m for m, col in AREA_METHODS.items() if any(r.get(col, "") != "" for r in area_rows)]


def table2(area_rows) -> list[dict]:
    """MAD (mean and std of |estimate - gold|) per region, phase group and estimator."""
    rows = []
    fg = [r for r in area_rows if r["region"]]
    for region in S.REGIONS:
        for group in PHASE_GROUPS:
            sel = [r for r in fg if r["region"] == region and _in_group(r, group)]
            for method in _area_methods(area_rows):
                col = AREA_METHODS[method]
                row = {"region": region, "phase_group": group, "method": method, "n": len(sel)}
                if sel:
                    (mr,) = S.mad_summary([_num(r[col]) for r in sel],
                                          [_num(r["area_true_mm2"]) for r in sel], [0] * len(sel))
                    row.update(mad_mean=mr.mean, mad_std=mr.std)
                rows.append(row)
    return rows


def mad_ci(area_rows, n_resamples: int = 1000, confidence: float = 0.99, seed: int = 0) -> list[dict]:
    """Bootstrap CI of the overall absolute area error per phase group and estimator."""
    rows = []
    for group in PHASE_GROUPS:
        sel = [r for r in area_rows if _in_group(r, group)]
        for method in _area_methods(area_rows):
            if not sel:
                continue
            err = _abs_err(sel, method)
            ci = S.bootstrap_ci_mean(err, n_resamples, confidence, seed)
            rows.append({"phase_group": group, "method": method, "n": int(err.size),
                         "mean": ci.point_mean, "std": float(err.std()),
                         "ci_low": ci.ci_low, "ci_high": ci.ci_high})
    return rows


def _abs_err(rows, method: str) -> np.ndarray:
    col = AREA_METHODS[method]
    return np.abs(np.array([_num(r[col]) - _num(r["area_true_mm2"]) for r in rows]))


def ks_table(score_rows, area_rows) -> list[dict]:
    """Pairwise two-sample KS tests: segmentation metrics between networks, area errors between estimators."""
    rows = []
    methods = [m for m in SEG_METHODS if any(r["method"] == m for r in score_rows)]
    for metric in METRICS:
        for a, b in combinations(methods, 2):
            va = _finite([_num(r[metric]) for r in score_rows if r["method"] == a])
            vb = _finite([_num(r[metric]) for r in score_rows if r["method"] == b])
            rows.append(_ks_row(metric, a, b, va, vb))
    for a, b in combinations(_area_methods(area_rows), 2):
        rows.append(_ks_row("area_abs_error_mm2", a, b, _abs_err(area_rows, a), _abs_err(area_rows, b)))
    return rows


def _finite(vals) -> np.ndarray:
    v = np.asarray(vals, dtype=float)
    return v[~np.isnan(v)]


def _ks_row(quantity, a, b, va, vb) -> dict:
    row = {"quantity": quantity, "method_a": a, "method_b": b, "n_a": int(va.size), "n_b": int(vb.size)}
    if va.size >= 2 and vb.size >= 2:
        res = S.ks_two_sample(va, vb)
        row.update(statistic=res.statistic, p_value=res.p_value)
    return row


def correlation_table(area_rows) -> list[dict]:
    """Pearson r between each estimator and the gold area, per phase group."""
    rows = []
    for group in PHASE_GROUPS:
        sel = [r for r in area_rows if _in_group(r, group)]
        for method in _area_methods(area_rows):
            x = np.array([_num(r[AREA_METHODS[method]]) for r in sel])
            y = np.array([_num(r["area_true_mm2"]) for r in sel])
            row = {"phase_group": group, "method": method, "n": len(sel)}
            try:
                row["r"] = S.pearson_r(x, y)
            except ValueError as exc:
                logger.warning("correlation %s/%s undefined: %s", group, method, exc)
            rows.append(row)
    return rows


REPORT_FIELDS = {
    "table1.csv": ["metric", "phase_group", "method", "n", "n_missing", "mean", "std", "ci_low", "ci_high"],
    "table2.csv": ["region", "phase_group", "method", "n", "mad_mean", "mad_std"],
    "mad_ci.csv": ["phase_group", "method", "n", "mean", "std", "ci_low", "ci_high"],
    "ks.csv": ["quantity", "method_a", "method_b", "n_a", "n_b", "statistic", "p_value"],
    "correlation.csv": ["phase_group", "method", "n", "r"],
}


def build_reports(score_rows, area_rows, n_resamples: int = 1000, confidence: float = 0.99,
                  seed: int = 0) -> dict[str, list[dict]]:
    if not score_rows or not area_rows:
        raise ValueError("report needs non-empty scores and areas")
    return {
        "table1.csv": table1(score_rows, n_resamples, confidence, seed),
        "table2.csv": table2(area_rows),
        "mad_ci.csv": mad_ci(area_rows, n_resamples, confidence, seed),
        "ks.csv": ks_table(score_rows, area_rows),
        "correlation.csv": correlation_table(area_rows),
    }


def write_reports(reports: dict[str, list[dict]], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in reports.items():
        write_csv(out / name, rows, REPORT_FIELDS[name])
