"""Bootstrap intervals, two-sample KS test, correlation and area-error summaries."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

APICAL, MID, BASAL = "apical", "mid", "basal"
REGIONS = (APICAL, MID, BASAL)


@dataclass
class BootstrapResult:
    point_mean: float
    ci_low: float
    ci_high: float
    confidence: float = 0.99
    n_resamples: int = 1000
    seed: int = 0


@dataclass
class KSResult:
    statistic: float
    p_value: float


def bootstrap_means(values, n_resamples: int = 1000, seed: int = 0) -> np.ndarray:
    """Means of ``n_resamples`` with-replacement resamples of ``values``."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("bootstrap needs at least one value")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(n_resamples, x.size))
    return x[idx].mean(axis=1)


def bootstrap_ci_mean(values, n_resamples: int = 1000, confidence: float = 0.99,
                      seed: int = 0) -> BootstrapResult:
    """Percentile bootstrap interval for the mean."""
    if not 0 < confidence < 1:
        raise ValueError("confidence must be in (0, 1)")
    x = np.asarray(values, dtype=float)
    means = bootstrap_means(x, n_resamples, seed)
    alpha = 1.0 - confidence
    lo, hi = np.quantile(means, [alpha / 2, 1 - alpha / 2])
    mean = float(x.mean())
    # the percentile interval can miss the sample mean by rounding when all values agree
    return BootstrapResult(mean, min(float(lo), mean), max(float(hi), mean),
                           confidence, n_resamples, seed)


def ks_statistic(a, b) -> float:
    a, b = np.sort(np.asarray(a, dtype=float)), np.sort(np.asarray(b, dtype=float))
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def kolmogorov_sf(lam: float, tol: float = 1e-12, max_terms: int = 200) -> float:
    """P(K > lam) = 2 * sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lam^2)."""
    if lam <= 0:
        return 1.0
    total = 0.0
    for k in range(1, max_terms + 1):
        term = math.exp(-2.0 * k * k * lam * lam)
        total += term if k % 2 else -term
        if term < tol:
            break
    else:
        # series has not converged: lam is tiny and the tail probability is 1
        return 1.0
    return min(1.0, max(2.0 * total, 0.0))


def ks_two_sample(a, b) -> KSResult:
    """Two-sample Kolmogorov-Smirnov test with the asymptotic p-value."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("KS test needs at least two values per sample")
    d = ks_statistic(a, b)
    ne = a.size * b.size / (a.size + b.size)
    sq = math.sqrt(ne)
    lam = (sq + 0.12 + 0.11 / sq) * d
    p = kolmogorov_sf(lam)
    # underflow for extreme separations; keep p inside (0, 1]
    return KSResult(d, max(p, np.finfo(float).tiny))


def pearson_r(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson_r needs two 1-D sequences of equal length")
    if x.size < 2:
        raise ValueError("pearson_r needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson_r is undefined for zero variance input")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class RegionAssignment:
    labels: list[str | None]  # one per slice, None for slices without gold foreground
    degenerate: bool


def classify_regions(gold_masks) -> RegionAssignment:
    """Label foreground slices apical / mid / basal.

    Slices are ordered apex to base. Among slices with gold foreground the
    first two are apical, the last two basal, the rest mid. With fewer than
    five foreground slices apical is filled first and the result is flagged.
    """
    fg = [k for k, m in enumerate(gold_masks) if np.any(np.asarray(m))]
    labels: list[str | None] = [None] * len(gold_masks)
    n = len(fg)
    for rank, k in enumerate(fg):
        if rank < 2:
            labels[k] = APICAL
        elif rank >= n - 2:
            labels[k] = BASAL
        else:
            labels[k] = MID
    return RegionAssignment(labels, degenerate=n < 5)


@dataclass
class MadRow:
    key: tuple
    mean: float
    std: float
    n: int


def mad_summary(pred_areas, true_areas, group_keys, expected_keys=None) -> list[MadRow]:
    """Mean and (population) standard deviation of |pred - true| per group.

    Groups listed in ``expected_keys`` without members are skipped with a warning.
    """
    pred = np.asarray(pred_areas, dtype=float)
    true = np.asarray(true_areas, dtype=float)
    keys = list(group_keys)
    if not (pred.shape == true.shape == (len(keys),)):
        raise ValueError("pred_areas, true_areas and group_keys must be aligned")
    err = np.abs(pred - true)
    groups: dict = {}
    for k, e in zip(keys, err):
        groups.setdefault(k, []).append(e)
    order = list(expected_keys) if expected_keys is not None else sorted(groups, key=str)
    rows = []
    for k in order:
        vals = groups.get(k)
        if not vals:
            logger.warning("MAD group %s has no members; omitted", k)
            continue
        v = np.asarray(vals)
        rows.append(MadRow(k, float(v.mean()), float(v.std()), int(v.size)))
    return rows
