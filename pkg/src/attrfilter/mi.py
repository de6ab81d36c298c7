"""Non-parametric k-NN mutual information estimators.

Two estimators are provided, each in a plain (evaluation) and a
straight-through differentiable (loss) form:

* ``mi_discrete``   -- continuous Z against discrete labels (Ross-style
  combination of nearest-neighbour entropy estimators).
* ``mi_continuous`` -- continuous Z against continuous Y (bias-corrected
  KSG variant with l2 distances; the k-th neighbour is selected in the
  joint space and marginal counts use the joint radius).

The differentiable forms compute the identical forward value and route
gradients through the k-th-neighbour selection (``topk_st``) and through
the <= counts (``heaviside_st``); gradients flow into Z only.

Distances are always l2; neighbour searches exclude the query point; a
boundary tie counts (<=); neighbour ties break to the lowest index.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import integrate

from . import autodiff as ad
from .autodiff import Tensor, pdist_sq_values, pdist_values

__all__ = [
    "EstimationError", "digamma", "trigamma", "unit_ball_volume",
    "log_unit_ball_volume",
    "mi_discrete", "mi_discrete_loss", "mi_continuous", "mi_continuous_loss",
    "kl_entropy", "mi_oracle_gaussian", "mi_oracle_mixture",
]


class EstimationError(ValueError):
    """Raised when a batch cannot support the requested estimate."""


# ---------------------------------------------------------------------------
# special functions


def digamma(x):
    """Digamma via the recurrence psi(x+1) = psi(x) + 1/x and an asymptotic
    series above 6; absolute error below 1e-10 on the positive axis."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr <= 0.0):
        raise ValueError("digamma requires strictly positive arguments")
    scalar = arr.ndim == 0
    z = np.atleast_1d(arr).copy()
    acc = np.zeros_like(z)
    small = z < 6.0
    while small.any():
        acc[small] -= 1.0 / z[small]
        z[small] += 1.0
        small = z < 6.0
    inv = 1.0 / z
    inv2 = inv * inv
    ser = inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0
          - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))))
    out = acc + np.log(z) - 0.5 * inv - ser
    return float(out[0]) if scalar else out


def trigamma(x):
    """First derivative of digamma, same recurrence/series scheme."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr <= 0.0):
        raise ValueError("trigamma requires strictly positive arguments")
    scalar = arr.ndim == 0
    z = np.atleast_1d(arr).copy()
    acc = np.zeros_like(z)
    small = z < 8.0
    while small.any():
        acc[small] += 1.0 / (z[small] * z[small])
        z[small] += 1.0
        small = z < 8.0
    inv = 1.0 / z
    inv2 = inv * inv
    ser = inv * (1.0 + 0.5 * inv + inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0
          - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0)))))
    out = acc + ser
    return float(out[0]) if scalar else out


def log_unit_ball_volume(d):
    """log volume of the d-dimensional unit l2 ball, pi^{d/2}/Gamma(d/2+1)."""
    return (d / 2.0) * math.log(math.pi) - math.lgamma(d / 2.0 + 1.0)


def unit_ball_volume(d):
    return math.exp(log_unit_ball_volume(d))


def _digamma_op(counts):
    """Differentiable digamma of a count tensor."""
    return ad.elementwise(counts, digamma(counts.values), trigamma(counts.values))


def _offdiag_index(n):
    """[n, n-1] column indices enumerating j != i per row."""
    idx = np.tile(np.arange(n - 1), (n, 1))
    idx += idx >= np.arange(n)[:, None]
    return idx


def _as_2d(a):
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


# ---------------------------------------------------------------------------
# discrete-label estimator


def _discrete_setup(z, y, k):
    z = _as_2d(z)
    y = np.asarray(y)
    n = z.shape[0]
    if y.shape[0] != n:
        raise EstimationError("Z and labels must have the same length")
    if n < k + 1:
        raise EstimationError(f"need at least k+1={k + 1} samples, got {n}")
    classes = np.unique(y)
    members = {c: np.flatnonzero(y == c) for c in classes}
    deficient = [c for c in classes if len(members[c]) < k + 1]
    if len(deficient) == len(classes):
        raise EstimationError(
            f"every class has fewer than k+1={k + 1} members: {list(deficient)}")
    if deficient:
        warnings.warn(
            f"classes {list(deficient)} have fewer than k+1={k + 1} members; "
            "their samples are dropped from the average", stacklevel=3)
    kept = [c for c in classes if len(members[c]) >= k + 1]
    return z, members, kept


def mi_discrete(z, y, k=4):
    """MI estimate (nats) between continuous rows ``z`` and discrete labels ``y``.

    psi(N) + psi(k) - <psi(N_y)> - <psi(n_z)>, averaged per sample; n_z counts
    the full batch (self excluded) within the k-th same-label neighbour
    distance. Samples of classes with fewer than k+1 members are dropped.
    """
    z, members, kept = _discrete_setup(z, y, k)
    n = z.shape[0]
    dist = pdist_values(z)
    const = digamma(float(n)) + digamma(float(k))
    pieces = []
    for c in kept:
        mem = members[c]
        sub = dist[np.ix_(mem, mem)]
        # (k+1)-th smallest including the zero self-distance == k-th excluding self
        kd = np.partition(sub, k, axis=1)[:, k]
        counts = (dist[mem] <= kd[:, None]).sum(axis=1) - 1
        pieces.append(const - digamma(np.full(len(mem), float(len(mem))))
                      - digamma(counts.astype(np.float64)))
    per_sample = np.concatenate(pieces)
    return float(np.mean(np.sort(per_sample, kind="stable")))


def mi_discrete_loss(z, y, k=4):
    """Differentiable twin of :func:`mi_discrete`; ``z`` is a Tensor."""
    members_kept = _discrete_setup(z.values, y, k)[1:]
    members, kept = members_kept
    n = z.values.shape[0]
    dist = ad.pairwise_euclidean_distance_matrix(z)
    offdiag = _offdiag_index(n)
    dist_off = ad.gather_cols(dist, offdiag)
    const = digamma(float(n)) + digamma(float(k))
    pieces = []
    for c in kept:
        mem = members[c]
        sub = ad.submatrix(dist, mem, mem)
        kd, _, _ = ad.topk_st(sub, k + 1)
        rows = ad.take_rows(dist_off, mem)
        ones = ad.heaviside_st(ad.sub(ad.reshape(kd, (len(mem), 1)), rows))
        counts = ad.sum_(ones, axis=1)
        psi_ny = Tensor(digamma(np.full(len(mem), float(len(mem)))))
        pieces.append(ad.sub(ad.sub(Tensor(np.float64(const)), psi_ny),
                             _digamma_op(counts)))
    per_sample = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
    return ad.mean(ad.sort_ascending(per_sample))


# ---------------------------------------------------------------------------
# continuous-continuous estimator


def _continuous_setup(z, y, k):
    z, y = _as_2d(z), _as_2d(y)
    n = z.shape[0]
    if y.shape[0] != n:
        raise EstimationError("Z and Y must have the same number of rows")
    if n <= k:
        raise EstimationError(f"need more than k={k} samples, got {n}")
    return z, y


def _volume_const(n, k, dz, dy):
    # log N + psi(k) + log of the unit-ball volume ratio v_z*v_y/v_{zy}
    return (math.log(n) + digamma(float(k)) + log_unit_ball_volume(dz)
            + log_unit_ball_volume(dy) - log_unit_ball_volume(dz + dy))


def mi_continuous(z, y, k=4):
    """MI estimate (nats) between continuous rows ``z`` and continuous ``y``.

    log N + psi(k) + log(v_z v_y / v_zy) - <log n_z + log n_y>; the k-th
    neighbour distance rho is taken in the joint (Z,Y) space and n_z, n_y
    count marginal distances <= rho, self excluded.
    """
    z, y = _continuous_setup(z, y, k)
    n = z.shape[0]
    sq_z = pdist_sq_values(z)
    sq_y = pdist_sq_values(y)
    dist_z = np.sqrt(sq_z)
    dist_y = np.sqrt(sq_y)
    dist_j = np.sqrt(sq_z + sq_y)
    rho = np.partition(dist_j, k, axis=1)[:, k]
    n_z = (dist_z <= rho[:, None]).sum(axis=1) - 1
    n_y = (dist_y <= rho[:, None]).sum(axis=1) - 1
    per_sample = np.log(n_z.astype(np.float64)) + np.log(n_y.astype(np.float64))
    const = _volume_const(n, k, z.shape[1], y.shape[1])
    return float(const - np.mean(np.sort(per_sample, kind="stable")))


def mi_continuous_loss(z, y, k=4):
    """Differentiable twin of :func:`mi_continuous`; ``z`` is a Tensor,
    ``y`` is treated as a constant."""
    y = _continuous_setup(z.values, y, k)[1]
    n = z.values.shape[0]
    sq_z = ad.pairwise_sq_dists(z)
    sq_y = Tensor(pdist_sq_values(y))
    dist_z = ad.sqrt(sq_z)
    dist_y_vals = np.sqrt(sq_y.values)
    dist_j = ad.sqrt(ad.add(sq_z, sq_y))
    rho, _, _ = ad.topk_st(dist_j, k + 1)
    offdiag = _offdiag_index(n)
    rho_col = ad.reshape(rho, (n, 1))
    ones_z = ad.heaviside_st(ad.sub(rho_col, ad.gather_cols(dist_z, offdiag)))
    ones_y = ad.heaviside_st(ad.sub(rho_col, ad.gather_cols(Tensor(dist_y_vals), offdiag)))
    n_z = ad.sum_(ones_z, axis=1)
    n_y = ad.sum_(ones_y, axis=1)
    per_sample = ad.add(ad.log(n_z), ad.log(n_y))
    const = _volume_const(n, k, z.values.shape[1], y.shape[1])
    return ad.sub(Tensor(np.float64(const)), ad.mean(ad.sort_ascending(per_sample)))


# ---------------------------------------------------------------------------
# entropy estimator and test oracles


def kl_entropy(z, k=4):
    """Kozachenko-Leonenko differential entropy estimate (nats).

    psi(N) - psi(k) + log v_d + (d/N) sum_i log r_i with r_i the k-th
    neighbour distance (l2, self excluded). Duplicate points give r = 0 and
    raise, rather than silently returning -inf.
    """
    z = _as_2d(z)
    n, d = z.shape
    if n < k + 1:
        raise EstimationError(f"need at least k+1={k + 1} samples, got {n}")
    dist = pdist_values(z)
    kd = np.partition(dist, k, axis=1)[:, k]
    if np.any(kd == 0.0):
        raise EstimationError("duplicate points give a zero k-th neighbour distance")
    return float(digamma(float(n)) - digamma(float(k)) + log_unit_ball_volume(d)
                 + (d / n) * np.sum(np.log(kd)))


def mi_oracle_gaussian(rho):
    """Exact MI of a bivariate Gaussian with correlation rho: -0.5 ln(1-rho^2)."""
    if not -1.0 < rho < 1.0:
        raise ValueError("rho must lie in (-1, 1)")
    return -0.5 * math.log(1.0 - rho * rho)


def mi_oracle_mixture(class_means, class_priors, variance):
    """MI between a 1-D Gaussian-mixture observation and its component label.

    I = H(mixture) - sum_c pi_c H(component), entropies by adaptive quadrature.
    """
    means = np.asarray(class_means, dtype=np.float64)
    priors = np.asarray(class_priors, dtype=np.float64)
    if means.shape != priors.shape:
        raise ValueError("means and priors must align")
    if abs(priors.sum() - 1.0) > 1e-12 or np.any(priors < 0.0):
        raise ValueError("priors must be a distribution")
    sd = math.sqrt(variance)
    active = priors > 0.0

    def neg_p_log_p(x):
        comps = np.exp(-0.5 * ((x - means[active]) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
        p = float(priors[active] @ comps)
        return -p * math.log(p) if p > 0.0 else 0.0

    lo = float(means[active].min() - 15 * sd)
    hi = float(means[active].max() + 15 * sd)
    h_mix, _ = integrate.quad(neg_p_log_p, lo, hi, limit=500, epsabs=1e-10)
    h_component = 0.5 * math.log(2 * math.pi * math.e * variance)
    return float(h_mix - priors[active].sum() * h_component)
