"""Classification, regression, verification and privacy-disclosure metrics.

Scores are always "higher means more positive/target". EER and minDCF are
computed on the threshold sweep over distinct score values with tied scores
collapsed to a single operating point; EER uses linear interpolation between
the two points where miss and false-alarm rates cross.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

__all__ = [
    "uar", "auprc", "ccc", "pcc", "eer", "min_dcf",
    "isotonic_fit", "pav_calibrate", "zebra",
    "cosine_scores", "asv_trials", "roc_points",
]

LN2 = math.log(2.0)


def _scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    if labels.all() or not labels.any():
        raise ValueError("need at least one positive and one negative label")
    return scores, labels


def uar(y_true, y_pred):
    """Unweighted average recall over the classes present, in percent."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("prediction/label length mismatch")
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return 100.0 * float(np.mean(recalls))


def auprc(scores, labels):
    """Average precision (stepwise precision-recall integral), in percent."""
    scores, labels = _scores_labels(scores, labels)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order].astype(np.float64)
    n = len(scores)
    # last index of each tied block
    block_end = np.flatnonzero(np.append(sorted_scores[1:] != sorted_scores[:-1], True))
    tp = np.cumsum(sorted_labels)[block_end]
    pp = block_end + 1.0
    precision = tp / pp
    recall = tp / labels.sum()
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return 100.0 * float(np.sum((recall - prev_recall) * precision))


def roc_points(scores, labels):
    """Sweep operating points (P_fa, P_miss) from reject-all to accept-all."""
    scores, labels = _scores_labels(scores, labels)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    n_tar = labels.sum()
    n_non = len(labels) - n_tar
    block_end = np.flatnonzero(np.append(sorted_scores[1:] != sorted_scores[:-1], True))
    tp = np.cumsum(sorted_labels)[block_end]
    fp = (block_end + 1) - tp
    p_fa = np.concatenate([[0.0], fp / n_non])
    p_miss = np.concatenate([[1.0], 1.0 - tp / n_tar])
    return p_fa, p_miss


def eer(scores, labels):
    """Equal error rate in percent, linear interpolation on the ROC sweep."""
    p_fa, p_miss = roc_points(scores, labels)
    diff = p_miss - p_fa
    j = int(np.flatnonzero(diff <= 0.0)[0])
    if diff[j] == 0.0:
        return 100.0 * p_fa[j]
    s = diff[j - 1] / (diff[j - 1] - diff[j])
    return 100.0 * (p_fa[j - 1] + s * (p_fa[j] - p_fa[j - 1]))


def min_dcf(scores, labels, p_target=0.01, c_miss=1.0, c_fa=1.0):
    """Minimum normalized detection cost over the threshold sweep."""
    p_fa, p_miss = roc_points(scores, labels)
    cost = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target)
    return float(cost.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


def pcc(predictions, targets):
    """Pearson correlation; 0 when either side is constant."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    sp, st = p.std(), t.std()
    if sp == 0.0 or st == 0.0:
        warnings.warn("constant sequence in pcc; returning 0", stacklevel=2)
        return 0.0
    return float(((p - p.mean()) * (t - t.mean())).mean() / (sp * st))


def ccc(predictions, targets):
    """Concordance correlation: 2 cov / (var_p + var_t + (mean_p - mean_t)^2)."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    cov = ((p - p.mean()) * (t - t.mean())).mean()
    denom = p.var() + t.var() + (p.mean() - t.mean()) ** 2
    if denom == 0.0:
        warnings.warn("degenerate ccc denominator; returning 0", stacklevel=2)
        return 0.0
    return float(2.0 * cov / denom)


# ---------------------------------------------------------------------------
# oracle calibration and privacy disclosure


def isotonic_fit(y, w):
    """Pool-adjacent-violators: weighted least-squares non-decreasing fit."""
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    means, weights, sizes = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        weights.append(wi)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, s2 = means.pop(), weights.pop(), sizes.pop()
            means[-1] = (means[-1] * weights[-1] + m2 * w2) / (weights[-1] + w2)
            weights[-1] += w2
            sizes[-1] += s2
    return np.repeat(means, sizes)


def pav_calibrate(scores, labels):
    """Oracle score calibration to log-likelihood ratios (natural log).

    One pseudo target below and one pseudo non-target above every score keep
    the PAV posteriors away from 0/1; tied scores share one fitted value. The
    empirical prior log-odds of the augmented pool is subtracted so that
    non-informative scores map to LLR exactly 0.
    """
    scores, labels = _scores_labels(scores, labels)
    n = len(scores)
    aug_scores = np.concatenate([[-np.inf], scores, [np.inf]])
    aug_labels = np.concatenate([[1.0], labels.astype(np.float64), [0.0]])
    order = np.argsort(aug_scores, kind="stable")
    s_sorted = aug_scores[order]
    y_sorted = aug_labels[order]
    # pool tied scores into weighted points
    block_start = np.concatenate([[0], np.flatnonzero(s_sorted[1:] != s_sorted[:-1]) + 1])
    block_id = np.cumsum(np.isin(np.arange(n + 2), block_start)) - 1
    counts = np.bincount(block_id)
    sums = np.bincount(block_id, weights=y_sorted)
    fitted = isotonic_fit(sums / counts, counts)
    posteriors = np.empty(n + 2)
    posteriors[order] = fitted[block_id]
    n_tar = labels.sum() + 1
    n_non = n - labels.sum() + 1
    prior_log_odds = math.log(n_tar / n_non)
    p = posteriors[1:-1]
    return np.log(p / (1.0 - p)) - prior_log_odds


def _empirical_cross_entropy(llrs, labels, prior_log_odds):
    """ECE in bits of Bayes decisions for each prior log-odds on the grid."""
    tar = llrs[labels]
    non = llrs[~labels]
    pi = prior_log_odds[:, None]
    p_tar = 1.0 / (1.0 + np.exp(-prior_log_odds))
    ece_tar = np.logaddexp(0.0, -(tar[None, :] + pi)).mean(axis=1) / LN2
    ece_non = np.logaddexp(0.0, non[None, :] + pi).mean(axis=1) / LN2
    return p_tar * ece_tar + (1.0 - p_tar) * ece_non


def zebra(scores, labels, grid_lo=-10.0, grid_hi=10.0, grid_points=201):
    """Expected (D_ECE) and worst-case (llr_max) privacy disclosure in bits.

    D_ECE is the mean over a prior-log-odds grid of the positive part of the
    gap between the non-informative (LLR == 0) cross-entropy and the
    PAV-calibrated one; llr_max is the largest calibrated |LLR|.
    """
    scores, labels = _scores_labels(scores, labels)
    llrs = pav_calibrate(scores, labels)
    grid = np.linspace(grid_lo, grid_hi, grid_points)
    ece_cal = _empirical_cross_entropy(llrs, labels, grid)
    ece_def = _empirical_cross_entropy(np.zeros_like(llrs), labels, grid)
    d_ece = float(np.maximum(0.0, ece_def - ece_cal).mean())
    llr_max = float(np.abs(llrs).max() / LN2)
    return d_ece, llr_max


# ---------------------------------------------------------------------------
# verification scoring


def cosine_scores(a, b):
    """Row-wise cosine similarity between two stacks of vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return np.sum(a * b, axis=-1) / (na * nb)


def asv_trials(embeddings_by_utt, trials):
    """Cosine score per trial; returns (scores, target_labels)."""
    try:
        enroll = np.stack([embeddings_by_utt[t.enroll_utt] for t in trials])
        test = np.stack([embeddings_by_utt[t.test_utt] for t in trials])
    except KeyError as exc:
        raise KeyError(f"trial references unknown utterance {exc.args[0]!r}") from exc
    labels = np.array([t.target for t in trials], dtype=bool)
    return cosine_scores(enroll, test), labels
