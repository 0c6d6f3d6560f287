"""A small reverse-mode differentiation engine on numpy arrays.

Covers exactly the primitives the graph encoders and their objective need:
dense and sparse-dense products, softplus/LeakyReLU/exp/log, log-gamma and
digamma, gather/segment reductions with a neighborhood softmax, elementwise
arithmetic with broadcasting, the Weibull noise transform, and two fused
likelihood terms (Poisson bag-of-words, Bernoulli-Poisson edges).  Double
precision throughout; gradients accumulate additively across fan-out.
"""

import numpy as np
import scipy.sparse as sp
from scipy.special import digamma as _digamma_fn
from scipy.special import gammaln, polygamma

from ._scatter import scatter_rows

EPS_FLOOR = 1e-6  # uniform-noise clamp before the log-log path

_CHECK_FINITE = False

diagnostics = {"edge_prob_clamped": 0}


class NumericsError(ArithmeticError):
    """A primitive produced a non-finite value while checking is enabled."""


def set_check_finite(flag):
    """Enable per-primitive NaN/Inf detection (used by gradient checks)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


class Tensor:
    """A node in the expression graph: value, adjoint, and backward rule."""

    __slots__ = ("value", "grad", "parents", "bwd", "op")

    def __init__(self, value, parents=(), bwd=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        self.op = op
        if _CHECK_FINITE and not np.all(np.isfinite(self.value)):
            raise NumericsError(f"non-finite value produced by primitive {op!r}")

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    for _ in range(extra):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        a.accumulate(_unbroadcast(g, a.value.shape))
        b.accumulate(_unbroadcast(g, b.value.shape))

    return Tensor(a.value + b.value, (a, b), bwd, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        a.accumulate(_unbroadcast(g, a.value.shape))
        b.accumulate(_unbroadcast(-g, b.value.shape))

    return Tensor(a.value - b.value, (a, b), bwd, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        a.accumulate(_unbroadcast(g * b.value, a.value.shape))
        b.accumulate(_unbroadcast(g * a.value, b.value.shape))

    return Tensor(a.value * b.value, (a, b), bwd, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        a.accumulate(_unbroadcast(g / b.value, a.value.shape))
        b.accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return Tensor(a.value / b.value, (a, b), bwd, "div")


def pow_const(a, p):
    a = as_tensor(a)
    p = float(p)

    def bwd(g):
        a.accumulate(g * p * np.power(a.value, p - 1.0))

    return Tensor(np.power(a.value, p), (a,), bwd, "pow")


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.value)

    def bwd(g):
        a.accumulate(g * y)

    return Tensor(y, (a,), bwd, "exp")


def log(a):
    a = as_tensor(a)

    def bwd(g):
        a.accumulate(g / a.value)

    return Tensor(np.log(a.value), (a,), bwd, "log")


def softplus(a):
    a = as_tensor(a)

    def bwd(g):
        a.accumulate(g / (1.0 + np.exp(-a.value)))

    return Tensor(np.logaddexp(0.0, a.value), (a,), bwd, "softplus")


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    mask = a.value > 0

    def bwd(g):
        a.accumulate(g * np.where(mask, 1.0, slope))

    return Tensor(np.where(mask, a.value, slope * a.value), (a,), bwd, "leaky_relu")


def lgamma(a):
    a = as_tensor(a)

    def bwd(g):
        a.accumulate(g * _digamma_fn(a.value))

    return Tensor(gammaln(a.value), (a,), bwd, "lgamma")


def digamma(a):
    a = as_tensor(a)

    def bwd(g):
        a.accumulate(g * polygamma(1, a.value))

    return Tensor(_digamma_fn(a.value), (a,), bwd, "digamma")


def clamp(a, lo=None, hi=None):
    """Clip values; gradient passes only through the unclamped region."""
    a = as_tensor(a)
    inside = np.ones(a.value.shape, dtype=bool)
    if lo is not None:
        inside &= a.value > lo
    if hi is not None:
        inside &= a.value < hi

    def bwd(g):
        a.accumulate(g * inside)

    return Tensor(np.clip(a.value, lo, hi), (a,), bwd, "clamp")


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.value.shape

    def bwd(g):
        a.accumulate(g.reshape(orig))

    return Tensor(a.value.reshape(shape), (a,), bwd, "reshape")


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.value.shape).copy())

    return Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def matmul(a, b):
    """Dense 2-D product; vectors must be carried as column matrices."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")

    def bwd(g):
        a.accumulate(g @ b.value.T)
        b.accumulate(a.value.T @ g)

    return Tensor(a.value @ b.value, (a, b), bwd, "matmul")


def sparse_matmul(a_sparse, b):
    """Product of a constant scipy sparse matrix with a dense tensor.

    Gradients flow only to the dense operand; the sparsity pattern is fixed.
    """
    if not sp.issparse(a_sparse):
        raise ValueError("sparse_matmul expects a scipy sparse left operand")
    b = as_tensor(b)

    def bwd(g):
        b.accumulate(a_sparse.T @ g)

    return Tensor(a_sparse @ b.value, (b,), bwd, "sparse_matmul")


def gather_rows(a, idx):
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        a.accumulate(scatter_rows(idx, g, a.value.shape[0]).reshape(a.value.shape))

    return Tensor(a.value[idx], (a,), bwd, "gather_rows")


def segment_sum(a, seg, num_segments):
    a = as_tensor(a)
    seg = np.asarray(seg, dtype=np.int64)
    out = scatter_rows(seg, a.value, num_segments).reshape((num_segments,) + a.value.shape[1:])

    def bwd(g):
        a.accumulate(g[seg])

    return Tensor(out, (a,), bwd, "segment_sum")


def segment_softmax(scores, seg, num_segments):
    """Softmax of per-edge scores within each destination segment.

    Shift-invariant: a constant per-segment max is subtracted before the
    exponential, which leaves both value and gradient exact.
    """
    scores = as_tensor(scores)
    seg = np.asarray(seg, dtype=np.int64)
    sizes = np.bincount(seg, minlength=num_segments)
    if np.any(sizes == 0):
        raise ValueError(f"empty neighborhood for segment {int(np.flatnonzero(sizes == 0)[0])}")
    shift = np.full(num_segments, -np.inf)
    np.maximum.at(shift, seg, scores.value)
    e = exp(sub(scores, shift[seg]))
    denom = segment_sum(e, seg, num_segments)
    return div(e, gather_rows(denom, seg))


def weibull_transform(shape_t, scale_t, eps):
    """Reparameterized Weibull draw ``scale * (-ln(1-eps))**(1/shape)``.

    ``eps`` is fixed uniform noise (clamped away from {0, 1}); gradients flow
    through shape and scale only.
    """
    shape_t, scale_t = as_tensor(shape_t), as_tensor(scale_t)
    eps = np.clip(np.asarray(eps, dtype=np.float64), EPS_FLOOR, 1.0 - EPS_FLOOR)
    w = -np.log1p(-eps)
    y = scale_t.value * np.power(w, 1.0 / shape_t.value)

    def bwd(g):
        shape_t.accumulate(
            _unbroadcast(-g * y * np.log(w) / (shape_t.value * shape_t.value), shape_t.value.shape)
        )
        scale_t.accumulate(_unbroadcast(g * np.power(w, 1.0 / shape_t.value), scale_t.value.shape))

    return Tensor(y, (shape_t, scale_t), bwd, "weibull_transform")


def poisson_bow_loglik(theta, phi, x_csr, node_weights=None):
    """Poisson bag-of-words log-likelihood, the ``ln x!`` constant dropped.

    ``theta`` is (N, K), ``phi`` a constant (V, K) topic matrix, ``x_csr`` the
    sparse V x N count matrix.  Only nonzero counts touch the log term; the
    exposure term reduces to column sums of phi.  Optional per-node weights
    scale each node's contribution (subsampling debias).
    """
    theta = as_tensor(theta)
    phi = np.asarray(phi, dtype=np.float64)
    n = theta.value.shape[0]
    w = np.ones(n) if node_weights is None else np.asarray(node_weights, dtype=np.float64)
    coo = x_csr.tocoo()
    v_idx, j_idx, x = coo.row, coo.col, coo.data
    rates = np.einsum("ek,ek->e", phi[v_idx], theta.value[j_idx])
    rates = np.maximum(rates, 1e-30)
    col = phi.sum(axis=0)
    value = float(np.dot(x * w[j_idx], np.log(rates)) - (w @ theta.value) @ col)

    def bwd(g):
        acc = scatter_rows(j_idx, (x * w[j_idx] / rates)[:, None] * phi[v_idx], n)
        acc -= w[:, None] * col[None, :]
        theta.accumulate(g * acc)

    return Tensor(value, (theta,), bwd, "poisson_bow_loglik")


def bernoulli_poisson_loglik(thetas, us, edges, num_nodes, node_weights=None):
    """Bernoulli-Poisson log-likelihood of a binary edge set over all pairs.

    ``sum_{i<j} [a_ij ln(1 - e^{-S_ij}) - (1 - a_ij) S_ij]`` with
    ``S_ij = sum_t sum_k u_k θ_ik θ_jk``, computed in O(E + NK) by writing the
    all-pairs exposure as a square-of-sums identity.  Optional per-node
    weights w_i turn each pair term into ``w_i w_j * term`` (subsampling
    debias); probabilities are floored at 1e-12 and the event counted in
    ``diagnostics``.
    """
    thetas = [as_tensor(t) for t in thetas]
    us = [as_tensor(u) for u in us]
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    src, dst = edges[:, 0], edges[:, 1]
    w = np.ones(num_nodes) if node_weights is None else np.asarray(node_weights, dtype=np.float64)

    s_e = np.zeros(len(edges))
    for th, u in zip(thetas, us):
        s_e += np.einsum("ek,ek->e", th.value[src] * u.value[None, :], th.value[dst])
    one_minus = np.maximum(-np.expm1(-s_e), 1e-12)
    n_clamped = int(np.sum(-np.expm1(-s_e) < 1e-12))
    if n_clamped:
        diagnostics["edge_prob_clamped"] += n_clamped
    w_e = w[src] * w[dst]

    value = float(np.dot(w_e, np.log(one_minus) + s_e))
    for th, u in zip(thetas, us):
        z = th.value * w[:, None]
        tot, sq = z.sum(axis=0), (z * z).sum(axis=0)
        value -= 0.5 * float(u.value @ (tot * tot - sq))

    def bwd(g):
        g_e = w_e / one_minus
        n_rows = thetas[0].value.shape[0]
        for th, u in zip(thetas, us):
            z = th.value * w[:, None]
            tot = z.sum(axis=0)
            d_th = scatter_rows(src, g_e[:, None] * (u.value[None, :] * th.value[dst]), n_rows)
            d_th += scatter_rows(dst, g_e[:, None] * (u.value[None, :] * th.value[src]), n_rows)
            d_th -= u.value[None, :] * (w[:, None] * tot[None, :] - (w * w)[:, None] * th.value)
            th.accumulate(g * d_th)
            pair_prod = np.einsum("ek,ek->k", th.value[src], th.value[dst] * g_e[:, None])
            sq = (z * z).sum(axis=0)
            u.accumulate(g * (pair_prod - 0.5 * (tot * tot - sq)))

    return Tensor(value, tuple(thetas) + tuple(us), bwd, "bernoulli_poisson_loglik")


def backward(root):
    """Reverse pass from a scalar root; fills ``grad`` on reachable tensors."""
    if root.value.ndim != 0:
        raise ValueError("backward requires a scalar root")
    topo, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    root.accumulate(np.ones(()))
    for node in reversed(topo):
        if node.bwd is not None and node.grad is not None:
            node.bwd(node.grad)


def evaluate_with_gradients(fn, params):
    """Evaluate a scalar expression and return (value, gradient per parameter).

    ``fn`` maps a dict of leaf Tensors to a scalar Tensor; NaN/Inf in any
    primitive raises with the offending op named.
    """
    was = _CHECK_FINITE
    set_check_finite(True)
    try:
        leaves = {k: Tensor(v) for k, v in params.items()}
        out = fn(leaves)
        if out.value.ndim != 0:
            raise ValueError("expression root must be scalar")
        backward(out)
    finally:
        set_check_finite(was)
    grads = {k: (t.grad if t.grad is not None else np.zeros(t.value.shape)) for k, t in leaves.items()}
    return float(out.value), grads


class GradCheckReport:
    """Outcome of a finite-difference comparison over every coordinate."""

    def __init__(self, tolerance):
        self.tolerance = tolerance
        self.max_rel_err = 0.0
        self.failures = []  # (param, flat index, analytic, numeric, rel err)
        self.kinks = []  # non-checkable coordinates (one-sided slopes disagree)
        self.checked = 0

    @property
    def ok(self):
        return not self.failures

    def __repr__(self):
        status = "OK" if self.ok else f"{len(self.failures)} FAILURES"
        return (
            f"GradCheckReport({status}, checked={self.checked}, "
            f"max_rel_err={self.max_rel_err:.3e}, kinks={len(self.kinks)})"
        )


def check_gradients(fn, params, tolerance=1e-4, step=1e-5, abs_tol=1e-6):
    """Central finite-difference check of ``fn``'s gradients at ``params``.

    The step is relative (``step * max(1, |x|)``).  A coordinate passes when
    the relative error is within tolerance or the absolute gap is below
    ``abs_tol`` (near-zero gradients sit inside finite-difference round-off).
    Coordinates where the two one-sided slopes disagree are reported as
    kinks instead of failures.
    """
    value, grads = evaluate_with_gradients(fn, params)

    def eval_at(p):
        leaves = {k: Tensor(v) for k, v in p.items()}
        return float(fn(leaves).value)

    report = GradCheckReport(tolerance)
    for name, x in params.items():
        x = np.asarray(x, dtype=np.float64)
        flat = x.ravel()
        g_flat = np.asarray(grads[name]).ravel()
        for i in range(flat.size):
            h = step * max(1.0, abs(flat[i]))
            bumped = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
            bumped[name].ravel()[i] = flat[i] + h
            f_plus = eval_at(bumped)
            bumped[name].ravel()[i] = flat[i] - h
            f_minus = eval_at(bumped)
            central = (f_plus - f_minus) / (2 * h)
            analytic = g_flat[i]
            gap = abs(analytic - central)
            scale = max(abs(analytic), abs(central))
            rel = gap / max(scale, 1e-12)
            report.checked += 1
            if scale > 1e-5:  # keep round-off-dominated coordinates out of the headline
                report.max_rel_err = max(report.max_rel_err, rel)
            if rel > tolerance and gap > abs_tol:
                fwd = (f_plus - value) / h
                back = (value - f_minus) / h
                slope_gap = abs(fwd - back) / max(abs(fwd), abs(back), 1e-6)
                if slope_gap > 0.1:
                    report.kinks.append((name, i))
                else:
                    report.failures.append((name, i, analytic, central, rel))
    return report
