"""Robustness metrics for multi-label predictions.

All functions work in float64 on plain arrays. Conventions:

* score vectors have 18 entries; ``truth_ranking`` is the ground-truth
  ranking view (positive 1, uncertain 0.5, negative/missing 0);
* top-k ties are broken by ascending label index;
* ``direction`` tells whether a larger value means a more robust model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from advbench.data import N_LABELS, LabelState

logger = logging.getLogger(__name__)

METRIC_DIRECTIONS = {
    "k_robust_acc": "up",
    "auc": "up",
    "mse": "down",
    "bce": "down",
    "ol": "down",
    "mlacc": "down",
    "risk": "down",
}


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class TopKSet:
    k: int
    indices: tuple


@dataclass
class MetricSeries:
    name: str
    values: list
    batch_ids: list

    def __post_init__(self):
        if len(self.values) != len(self.batch_ids):
            raise MetricError(f"series {self.name}: {len(self.values)} values for {len(self.batch_ids)} batch ids")


@dataclass(frozen=True)
class PearsonResult:
    r: float
    p: float


# ---------------------------------------------------------------- top-k accuracy


def _check_k(k, m=N_LABELS):
    if not 1 <= int(k) <= m:
        raise MetricError(f"k must be in [1, {m}], got {k}")
    return int(k)


def _topk_mask(scores, k):
    """Boolean (N, M) mask of each row's top-k entries (stable: lower index wins ties)."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def topk_indices(scores, k) -> TopKSet:
    k = _check_k(k, len(scores))
    return TopKSet(k, tuple(int(i) for i in np.flatnonzero(_topk_mask(scores, k)[0])))


def k_accuracy_input(predicted, truth_ranking, k) -> float:
    """|top-k(predicted) & top-k(truth)| / k."""
    k = _check_k(k, len(predicted))
    return float((_topk_mask(predicted, k) & _topk_mask(truth_ranking, k)).sum() / k)


def k_accuracy_batch(predicted, truth_ranking, k) -> np.ndarray:
    """Per-input k-accuracy for (N, 18) score and truth arrays."""
    k = _check_k(k, np.shape(predicted)[-1])
    hits = (_topk_mask(predicted, k) & _topk_mask(truth_ranking, k)).sum(axis=1)
    return hits / k


def k_accuracy_percent(predicted, truth_ranking, k) -> float:
    """Mean k-accuracy over a batch in percent, from exact integer hit counts."""
    k = _check_k(k, np.shape(predicted)[-1])
    hits = int((_topk_mask(predicted, k) & _topk_mask(truth_ranking, k)).sum())
    n = np.atleast_2d(predicted).shape[0]
    return 100.0 * hits / (k * n)


def k_accuracy_model(model, images, labels, k) -> float:
    """Mean k-accuracy of ``model`` over (images, label states), as a fraction."""
    from advbench.data import ranking_view
    from advbench.models import predict_probabilities

    if len(images) == 0:
        raise MetricError("k-accuracy of a model needs at least one input")
    probs = predict_probabilities(model, images)
    return float(k_accuracy_batch(probs, ranking_view(labels), k).mean())


# ---------------------------------------------------------------- losses as metrics


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _prepare(logits, target, mask):
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    t = np.atleast_2d(np.asarray(target, dtype=np.float64))
    m = np.atleast_2d(np.asarray(mask, dtype=bool))
    if z.shape != t.shape or z.shape != m.shape:
        raise MetricError(f"shape mismatch: logits {z.shape}, target {t.shape}, mask {m.shape}")
    if (m.sum(axis=1) == 0).any():
        raise MetricError("every input needs at least one unmasked label")
    return z, t, m


def loss_per_input(kind, logits, target, mask) -> np.ndarray:
    """Per-input MSE / BCE / OL over (N, 18) logits against real-valued targets."""
    z, t, m = _prepare(logits, target, mask)
    if kind == "mse":
        per = (_sigmoid(z) - t) ** 2
    elif kind == "bce":
        per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    elif kind == "ol":
        ordered = (t[:, :, None] > t[:, None, :]) & m[:, :, None] & m[:, None, :]
        counts = ordered.sum(axis=(1, 2))
        if (counts == 0).any():
            raise MetricError("OL needs at least two unmasked labels with distinct targets")
        hinge = np.maximum(0.0, 1.0 - (z[:, :, None] - z[:, None, :]))
        return (hinge * ordered).sum(axis=(1, 2)) / counts
    else:
        raise MetricError(f"unknown loss kind {kind!r}")
    return (per * m).sum(axis=1) / m.sum(axis=1)


def attack_loss_value(kind, logits, target, mask) -> float:
    return float(loss_per_input(kind, logits, target, mask)[0])


def metric_mse(adv_logits, reference, mask) -> float:
    return attack_loss_value("mse", adv_logits, reference, mask)


def metric_bce(adv_logits, reference, mask) -> float:
    return attack_loss_value("bce", adv_logits, reference, mask)


def metric_ol(adv_logits, reference, mask) -> float:
    return attack_loss_value("ol", adv_logits, reference, mask)


# ---------------------------------------------------------------- MLACC / RISK


def mlacc_batch(adv_probs, target, thresholds, mask) -> np.ndarray:
    p = np.atleast_2d(np.asarray(adv_probs, dtype=np.float64))
    t = np.atleast_2d(np.asarray(target, dtype=np.float64))
    m = np.atleast_2d(np.asarray(mask, dtype=bool))
    th = np.asarray(thresholds, dtype=np.float64)
    if not ((th > 0) & (th < 1)).all():
        raise MetricError("thresholds must lie strictly inside (0, 1)")
    counts = m.sum(axis=1)
    if (counts == 0).any():
        raise MetricError("MLACC needs at least one unmasked label")
    agree = ((p >= th) == (t >= 0.5)) & m
    return agree.sum(axis=1) / counts


def mlacc(adv_probs, target, thresholds, mask) -> float:
    """Fraction of unmasked labels whose thresholded prediction matches target >= 0.5."""
    return float(mlacc_batch(adv_probs, target, thresholds, mask)[0])


def risk_batch(adv_probs, c_rows) -> np.ndarray:
    p = np.atleast_2d(np.asarray(adv_probs, dtype=np.float64))
    c = np.atleast_2d(np.asarray(c_rows, dtype=np.float64))
    return (p * c).sum(axis=1) / (N_LABELS - 1)


def risk(adv_probs, c_row) -> float:
    """Dot product of adversarial probabilities with C(y*), divided by 17."""
    return float(risk_batch(adv_probs, c_row)[0])


# ---------------------------------------------------------------- AUC


def _midranks(values):
    """1-based ranks with ties sharing the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    uniq, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    return (upper - (counts - 1) / 2.0)[inverse]


def binary_auc(scores, is_positive) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    is_positive = np.asarray(is_positive, dtype=bool)
    n_pos, n_neg = int(is_positive.sum()), int((~is_positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    ranks = _midranks(scores)
    u = ranks[is_positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def label_aucs(probs, labels) -> np.ndarray:
    """Per-label AUC (positive vs negative; uncertain/missing excluded), NaN where undefined."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.full(probs.shape[1], np.nan)
    for i in range(probs.shape[1]):
        col = labels[:, i]
        keep = (col == LabelState.POSITIVE) | (col == LabelState.NEGATIVE)
        pos = col[keep] == LabelState.POSITIVE
        if pos.any() and (~pos).any():
            out[i] = binary_auc(probs[keep, i], pos)
    return out


def macro_auc(probs, labels) -> float:
    """Mean AUC over labels that have both classes; skipped labels are logged."""
    if len(probs) < 2:
        raise MetricError("macro AUC needs at least two inputs")
    aucs = label_aucs(probs, labels)
    defined = ~np.isnan(aucs)
    if not defined.any():
        raise MetricError("no label has both positive and negative examples")
    skipped = np.flatnonzero(~defined)
    if skipped.size:
        logger.debug("macro AUC skipped labels %s (single class)", skipped.tolist())
    return float(aucs[defined].mean())


# ---------------------------------------------------------------- Pearson


def _betacf(a, b, x, max_iter=500, tol=1e-16):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = a * math.log(x) + b * math.log1p(-x) + math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def pearson_with_pvalue(a, b) -> PearsonResult:
    """Pearson r and two-sided p-value from the t-distribution with n - 2 dof."""
    x = np.asarray(a.values if isinstance(a, MetricSeries) else a, dtype=np.float64)
    y = np.asarray(b.values if isinstance(b, MetricSeries) else b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError(f"series must be 1-D with equal length, got {x.shape} and {y.shape}")
    n = x.size
    if n < 3:
        raise MetricError("Pearson p-value needs at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise MetricError("Pearson correlation undefined for a constant series")
    # identical series: the product formula can land one ulp below 1
    r = 1.0 if np.array_equal(x, y) else float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if abs(r) == 1.0:
        return PearsonResult(r, 0.0)
    t = r * math.sqrt(df / (1.0 - r * r))
    return PearsonResult(r, min(1.0, max(0.0, t_two_sided_p(t, df))))
