"""Task losses and the uncertainty-weighted joint objective.

Two weightings of the segmentation term are supported:

``precision``   total = exp(-s1) * L1 + exp(-s2) * L2 + s1 + s2
``mixed``       total = exp(-s1) * L1 + exp(-2 * s2) * L2 + s1 + s2
                (1/sigma1 * L1 + 1/sigma2**2 * L2 + log sigma1 + log sigma2, sigma = exp(s))

``s1`` belongs to the area regression (Laplacian / MAD) task and ``s2`` to
the segmentation (cross-entropy) task.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

FORMS = ("precision", "mixed")
CE_EPS = 1e-7


@dataclass
class LossState:
    s1: Tensor | float = 0.0
    s2: Tensor | float = 0.0
    form: str = "precision"

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"loss form must be one of {FORMS}, got {self.form!r}")

    @property
    def sigma1(self) -> float:
        return math.exp(_value(self.s1))

    @property
    def sigma2(self) -> float:
        return math.exp(_value(self.s2))


@dataclass
class LossBreakdown:
    l1_mad: float
    l2_ce: float
    w1: float
    w2: float
    reg_terms: float
    total: float
    total_tensor: Tensor | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("l1_mad", "l2_ce", "w1", "w2", "reg_terms", "total")}


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def mad_loss(pred_area, true_area) -> Tensor:
    """Mean absolute difference between predicted and true areas (batch mean)."""
    pred = T.as_tensor(pred_area)
    true = np.asarray(true_area, dtype=float).reshape(pred.shape)
    return T.reduce_mean(T.abs_(T.sub(pred, true)))


def ce_loss(seg_prob, mask) -> Tensor:
    """Mean per-pixel binary cross-entropy of sigmoid probabilities vs a {0,1} mask."""
    p = T.as_tensor(seg_prob)
    m = _binary_mask(mask, p.shape)
    pc = T.clip(p, CE_EPS, 1.0 - CE_EPS)
    ll = T.add(T.mul(m, T.log(pc)), T.mul(1.0 - m, T.log(T.sub(1.0, pc))))
    return T.neg(T.reduce_mean(ll))


def ce_loss_logits(logits, mask) -> Tensor:
    """Same cross-entropy as :func:`ce_loss`, taken on pre-sigmoid scores.

    Equal to ``ce_loss(sigmoid(x), mask)`` wherever the probability lies
    inside the clamp range; beyond it the clamped form has zero gradient
    and a saturated network could never recover, so training uses this one.
    """
    x = T.as_tensor(logits)
    m = _binary_mask(mask, x.shape)
    return T.reduce_mean(T.sub(T.softplus(x), T.mul(m, x)))


def _binary_mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=float)
    if m.shape != shape:
        raise ValueError(f"mask shape {m.shape} != prediction shape {shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary (values in {0, 1})")
    return m


def joint_loss(l1, l2, state: LossState) -> LossBreakdown:
    """Weight the two task losses by their learned log-uncertainties.

    ``l1``, ``l2``, ``state.s1`` and ``state.s2`` may be tensors (for
    training) or plain floats (for analysis); ``total_tensor`` carries the
    differentiable result.
    """
    l1t, l2t = T.as_tensor(l1), T.as_tensor(l2)
    s1, s2 = T.as_tensor(state.s1), T.as_tensor(state.s2)
    if _value(l1t) < 0 or _value(l2t) < 0:
        raise ValueError("task losses must be non-negative")
    w1 = T.exp(T.neg(s1))
    w2 = T.exp(T.neg(s2) if state.form == "precision" else T.mul(-2.0, s2))
    reg = T.add(s1, s2)
    total = T.add(T.add(T.mul(w1, l1t), T.mul(w2, l2t)), reg)
    return LossBreakdown(
        l1_mad=_value(l1t), l2_ce=_value(l2t), w1=_value(w1), w2=_value(w2),
        reg_terms=_value(reg), total=_value(total), total_tensor=total,
    )


def task_weights(state: LossState) -> tuple[float, float]:
    """(regression weight, segmentation weight) under the configured form."""
    s1, s2 = _value(state.s1), _value(state.s2)
    w2 = math.exp(-s2) if state.form == "precision" else math.exp(-2.0 * s2)
    return math.exp(-s1), w2


def effective_weight_ratio(state: LossState) -> float:
    """Segmentation weight divided by regression weight."""
    w1, w2 = task_weights(state)
    return w2 / w1
