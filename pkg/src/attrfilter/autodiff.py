"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Covers exactly what the filter's training losses need: linear algebra,
activations, normalisations, the straight-through estimators used by the
quantizer and the MI losses, and dropout/batch-norm with explicit train/eval
modes. Everything is float64; all randomness comes in through caller-supplied
numpy Generators.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "tensor", "elementwise",
    "add", "sub", "mul", "div", "neg", "scale",
    "matmul", "linear_forward", "reshape", "concat", "submatrix", "gather_cols",
    "sum_", "mean", "exp", "log", "sqrt", "clip", "take_rows", "sort_ascending",
    "sin", "cos", "arccos",
    "leaky_relu", "softmax", "log_softmax", "cross_entropy", "mse",
    "l2_normalize", "cosine_similarity",
    "pairwise_sq_dists", "pairwise_euclidean_distance_matrix",
    "pdist_sq_values", "pdist_values",
    "batch_norm", "dropout",
    "gumbel_softmax_st", "heaviside_st", "topk_st", "grad_reverse",
    "codebook_select",
]


class Tensor:
    """A dense float64 array plus an optional gradient tape entry."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        # Backward closures hand over fresh or shared-read-only arrays and
        # never mutate them afterwards, so the first accumulation can keep a
        # reference instead of copying.
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Reverse-mode pass from this node; accumulates into .grad fields."""
        if grad is None:
            if self.values.size != 1:
                raise ValueError("backward() without a gradient requires a scalar output")
            grad = np.ones_like(self.values)
        order = _toposort(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; scalars are promoted to constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad=False):
    return Tensor(values, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _node(values, parents, backward):
    """Create an op output; the tape entry is kept only if a parent needs it."""
    needs = any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def elementwise(x, values, dvalues):
    """Custom elementwise op: forward `values`, local derivative `dvalues`."""

    def backward(g):
        x._accumulate(g * dvalues)

    return _node(values, (x,), backward)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.values.shape))

    return _node(a.values + b.values, (a, b), backward)


def sub(a, b):
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.values.shape))

    return _node(a.values - b.values, (a, b), backward)


def mul(a, b):
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.values, a.values.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.values, b.values.shape))

    return _node(a.values * b.values, (a, b), backward)


def div(a, b):
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.values, a.values.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.values / (b.values * b.values),
                                       b.values.shape))

    return _node(a.values / b.values, (a, b), backward)


def neg(a):
    def backward(g):
        a._accumulate(-g)

    return _node(-a.values, (a,), backward)


def scale(a, c):
    c = float(c)

    def backward(g):
        a._accumulate(c * g)

    return _node(c * a.values, (a,), backward)


def matmul(a, b):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.values.T)
        if b.requires_grad:
            b._accumulate(a.values.T @ g)

    return _node(a.values @ b.values, (a, b), backward)


def linear_forward(x, weights, bias):
    """x [N,d_in] @ weights [d_in,d_out] + bias [d_out]."""
    if x.values.ndim != 2 or weights.values.ndim != 2 \
            or x.values.shape[1] != weights.values.shape[0] \
            or bias.values.shape != (weights.values.shape[1],):
        raise ValueError(
            f"linear shapes do not conform: x{x.values.shape} "
            f"w{weights.values.shape} b{bias.values.shape}")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weights.values.T)
        if weights.requires_grad:
            weights._accumulate(x.values.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _node(x.values @ weights.values + bias.values, (x, weights, bias), backward)


def reshape(a, shape):
    def backward(g):
        a._accumulate(g.reshape(a.values.shape))

    return _node(a.values.reshape(shape), (a,), backward)


def transpose(a):
    def backward(g):
        a._accumulate(g.T)

    return _node(a.values.T, (a,), backward)


def xlogx(a):
    """x * log(x) with the 0 log 0 := 0 convention (zero gradient at 0)."""
    pos = a.values > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(pos, np.log(a.values), 0.0)

    def backward(g):
        a._accumulate(g * np.where(pos, logs + 1.0, 0.0))

    return _node(np.where(pos, a.values * logs, 0.0), (a,), backward)


def concat(parts, axis=1):
    parts = list(parts)
    sizes = [p.values.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p._accumulate(piece)

    return _node(np.concatenate([p.values for p in parts], axis=axis), parts, backward)


def submatrix(a, rows, cols):
    """a[rows][:, cols] for unique index arrays."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)

    def backward(g):
        ga = np.zeros_like(a.values)
        ga[np.ix_(rows, cols)] = g
        a._accumulate(ga)

    return _node(a.values[np.ix_(rows, cols)], (a,), backward)


def gather_cols(a, col_idx):
    """out[i, j] = a[i, col_idx[i, j]] with an integer index matrix."""
    col_idx = np.asarray(col_idx)
    rows = np.arange(a.values.shape[0])[:, None]

    def backward(g):
        ga = np.zeros_like(a.values)
        np.add.at(ga, (np.broadcast_to(rows, col_idx.shape), col_idx), g)
        a._accumulate(ga)

    return _node(a.values[rows, col_idx], (a,), backward)


def take_rows(a, row_idx):
    """Select unique rows of a 2-D tensor."""
    row_idx = np.asarray(row_idx)

    def backward(g):
        ga = np.zeros_like(a.values)
        ga[row_idx] = g
        a._accumulate(ga)

    return _node(a.values[row_idx], (a,), backward)


def sort_ascending(a):
    """Stable ascending sort of a 1-D tensor (permutation-proof reductions)."""
    order = np.argsort(a.values, kind="stable")

    def backward(g):
        ga = np.empty_like(a.values)
        ga[order] = g
        a._accumulate(ga)

    return _node(a.values[order], (a,), backward)


def sum_(a, axis=None):
    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.values.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.values.shape).copy())

    return _node(a.values.sum(axis=axis), (a,), backward)


def mean(a, axis=None):
    n = a.values.size if axis is None else a.values.shape[axis]

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g / n, a.values.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g / n, axis),
                                          a.values.shape).copy())

    return _node(a.values.mean(axis=axis), (a,), backward)


def exp(a):
    out_vals = np.exp(a.values)

    def backward(g):
        a._accumulate(g * out_vals)

    return _node(out_vals, (a,), backward)


def log(a):
    def backward(g):
        a._accumulate(g / a.values)

    return _node(np.log(a.values), (a,), backward)


def sqrt(a):
    """Square root with a guarded derivative: zero where the input is zero."""
    out_vals = np.sqrt(a.values)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out_vals > 0.0, 0.5 / out_vals, 0.0)
        a._accumulate(g * d)

    return _node(out_vals, (a,), backward)


def clip(a, lo, hi):
    """Clamp; gradient passes only strictly inside the interval."""
    inside = (a.values > lo) & (a.values < hi)

    def backward(g):
        a._accumulate(g * inside)

    return _node(np.clip(a.values, lo, hi), (a,), backward)


def sin(a):
    def backward(g):
        a._accumulate(g * np.cos(a.values))

    return _node(np.sin(a.values), (a,), backward)


def cos(a):
    def backward(g):
        a._accumulate(-g * np.sin(a.values))

    return _node(np.cos(a.values), (a,), backward)


def arccos(a):
    def backward(g):
        a._accumulate(-g / np.sqrt(1.0 - a.values * a.values))

    return _node(np.arccos(a.values), (a,), backward)


# ---------------------------------------------------------------------------
# activations and losses


def leaky_relu(a, negative_slope=0.01):
    pos = a.values >= 0.0

    def backward(g):
        a._accumulate(g * np.where(pos, 1.0, negative_slope))

    return _node(np.where(pos, a.values, negative_slope * a.values), (a,), backward)


def softmax(a, axis=-1):
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_vals = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_vals).sum(axis=axis, keepdims=True)
        a._accumulate(out_vals * (g - dot))

    return _node(out_vals, (a,), backward)


def log_softmax(a, axis=-1):
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_vals = shifted - lse
    soft = np.exp(out_vals)

    def backward(g):
        a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _node(out_vals, (a,), backward)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer class labels, natural log."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.values.shape[0]
    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -np.mean(logp[np.arange(n), labels])
    soft = np.exp(logp)

    def backward(g):
        d = soft.copy()
        d[np.arange(n), labels] -= 1.0
        logits._accumulate(g * d / n)

    return _node(loss, (logits,), backward)


def mse(pred, target):
    """Mean over rows of the squared l2 norm of (pred - target)."""
    tgt = target.values if isinstance(target, Tensor) else np.asarray(target, float)
    diff = pred.values - tgt
    n = pred.values.shape[0] if pred.values.ndim > 1 else pred.values.size
    loss = float(np.sum(diff * diff) / n)

    def backward(g):
        pred._accumulate(g * 2.0 * diff / n)

    return _node(loss, (pred,), backward)


def l2_normalize(a, axis=1):
    norms = np.sqrt((a.values * a.values).sum(axis=axis, keepdims=True))
    out_vals = a.values / norms

    def backward(g):
        dot = (g * a.values).sum(axis=axis, keepdims=True)
        a._accumulate(g / norms - a.values * dot / norms**3)

    return _node(out_vals, (a,), backward)


def cosine_similarity(a, b):
    """Row-wise cosine similarity between two [N,d] tensors."""
    return sum_(mul(l2_normalize(a), l2_normalize(b)), axis=1)


# ---------------------------------------------------------------------------
# pairwise distances (shared numpy kernels, used verbatim by the MI module)


def pdist_sq_values(v):
    """Squared euclidean distance matrix with an exact zero diagonal."""
    sq = np.sum(v * v, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (v @ v.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def pdist_values(v):
    return np.sqrt(pdist_sq_values(v))


def _pdist_sq_backward(x, g):
    """Gradient of the squared-distance matrix wrt its input rows."""
    m = g + g.T
    return 2.0 * (m.sum(axis=1)[:, None] * x - m @ x)


def pairwise_sq_dists(a):
    def backward(g):
        a._accumulate(_pdist_sq_backward(a.values, g))

    return _node(pdist_sq_values(a.values), (a,), backward)


def pairwise_euclidean_distance_matrix(a):
    sq = pdist_sq_values(a.values)
    out_vals = np.sqrt(sq)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gsq = np.where(out_vals > 0.0, g * 0.5 / out_vals, 0.0)
        a._accumulate(_pdist_sq_backward(a.values, gsq))

    return _node(out_vals, (a,), backward)


# ---------------------------------------------------------------------------
# stateful layers (functional style; state passed in)


def batch_norm(a, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Batch normalisation over axis 0. Mutates the running buffers in train mode."""
    if training:
        mu = a.values.mean(axis=0)
        var = a.values.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.values - mu) * inv
    out_vals = gamma.values * xhat + beta.values

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if a.requires_grad:
            gx = g * gamma.values
            if training:
                n = a.values.shape[0]
                dvar = (gx * (a.values - mu)).sum(axis=0) * (-0.5) * inv**3
                dmu = (-gx * inv).sum(axis=0) + dvar * (-2.0 / n) * (a.values - mu).sum(axis=0)
                a._accumulate(gx * inv + dvar * 2.0 * (a.values - mu) / n + dmu / n)
            else:
                a._accumulate(gx * inv)

    return _node(out_vals, (a, gamma, beta), backward)


def dropout(a, p, rng, training):
    """Inverted dropout; identity in eval mode."""
    if not training or p == 0.0:
        return a
    keep = rng.random(a.values.shape) >= p
    factor = keep / (1.0 - p)

    def backward(g):
        a._accumulate(g * factor)

    return _node(a.values * factor, (a,), backward)


# ---------------------------------------------------------------------------
# straight-through estimators


def gumbel_softmax_st(logits, temperature, rng, hard):
    """Gumbel-softmax rows over the last axis, straight-through when hard.

    Returns (selections, soft_probs). In hard mode the forward selections are
    one-hot at the argmax of the soft probabilities while gradients follow the
    soft path unchanged; otherwise selections are the soft probabilities.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    u = rng.random(logits.values.shape)
    np.clip(u, 1e-300, 1.0 - 1e-16, out=u)
    np.log(u, out=u)
    np.negative(u, out=u)
    np.log(u, out=u)
    np.negative(u, out=u)
    noisy = add(logits, Tensor(u))
    soft = softmax(noisy if temperature == 1.0 else scale(noisy, 1.0 / temperature),
                   axis=-1)
    if not hard:
        return soft, soft
    idx = soft.values.argmax(axis=-1)
    hard_vals = np.zeros_like(soft.values)
    np.put_along_axis(hard_vals, idx[..., None], 1.0, axis=-1)

    def backward(g):
        soft._accumulate(g)

    return _node(hard_vals, (soft,), backward), soft


def heaviside_st(a):
    """Forward step function (1 where x >= 0); backward identity surrogate."""

    def backward(g):
        a._accumulate(g)

    return _node((a.values >= 0.0).astype(np.float64), (a,), backward)


def topk_st(a, k):
    """k-th smallest value per row of a [N,M] tensor (bottom-k semantics).

    Gradient is routed only to the selected entries; ties break to the lowest
    column index. Returns (kth_values, kth_indices, gradient_mask).
    """
    n, m = a.values.shape
    if not 1 <= k <= m:
        raise ValueError(f"k={k} out of range for {m} columns")
    order = np.argsort(a.values, axis=1, kind="stable")
    idx = order[:, k - 1]
    rows = np.arange(n)
    mask = np.zeros_like(a.values, dtype=bool)
    mask[rows, idx] = True

    def backward(g):
        ga = np.zeros_like(a.values)
        ga[rows, idx] = g
        a._accumulate(ga)

    return _node(a.values[rows, idx], (a,), backward), idx, mask


def grad_reverse(a, lam=1.0):
    """Identity forward; backward multiplies the gradient by -lam."""
    lam = float(lam)

    def backward(g):
        a._accumulate(-lam * g)

    return _node(a.values.copy(), (a,), backward)


def codebook_select(selections, codebook):
    """Contract one-hot selections [N,G,V] with a codebook [G,V,D] -> [N,G,D].

    Implemented with stacked matmuls over the codebook axis (BLAS) rather
    than einsum.
    """
    sel_gnv = selections.values.transpose(1, 0, 2)

    def backward(g):
        g_gnd = g.transpose(1, 0, 2)
        if selections.requires_grad:
            dsel = np.matmul(g_gnd, codebook.values.transpose(0, 2, 1))
            selections._accumulate(dsel.transpose(1, 0, 2))
        if codebook.requires_grad:
            codebook._accumulate(np.matmul(sel_gnv.transpose(0, 2, 1), g_gnd))

    out = np.matmul(sel_gnv, codebook.values).transpose(1, 0, 2)
    return _node(out, (selections, codebook), backward)
