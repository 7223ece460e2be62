"""A small dense-tensor engine with reverse-mode differentiation.

Operations executed inside a :class:`GradientTape` context are recorded in
execution order; :meth:`GradientTape.gradient` replays the record backwards,
summing gradients wherever a tensor feeds more than one consumer. Only the
operations the mesh regressor needs are provided, each with an explicit
backward rule.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradientTape() as tape:
    ...     y = sum_all(mul(x, x))
    >>> tape.gradient(y, [x])[0]
    array([2., 4.])
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from cmr.meshgraph import SparseMatrix, sparse_dense_multiply, DimensionError

DEBUG = bool(os.environ.get("CMR_DEBUG"))

_ACTIVE_TAPES: list = []


class NonFiniteError(FloatingPointError):
    pass


class GradCheckError(AssertionError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: object


class GradientTape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def gradient(self, target: Tensor, sources):
        """Gradients of scalar ``target`` with respect to each source.

        Sources the target does not depend on get zero arrays.
        """
        if target.data.size != 1:
            raise ValueError(f"gradient target must be scalar, got shape {target.shape}")
        keep = {id(s) for s in sources}
        grads = {id(target): np.ones_like(target.data)}
        for rec in reversed(self.records):
            key = id(rec.output)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                k = id(inp)
                grads[k] = grads[k] + gi if k in grads else gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _record(out_data, inputs, backward):
    out = Tensor(out_data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        raise NonFiniteError("non-finite value produced by " + getattr(backward, "__qualname__", "op"))
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        if _ACTIVE_TAPES:
            _ACTIVE_TAPES[-1].records.append(_Record(tuple(inputs), out, backward))
    return out


def custom_op(out_data, inputs, backward):
    """Register an operation whose backward maps output grad to input grads."""
    return _record(out_data, inputs, backward)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ------------------------------------------------------------------ plumbing

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c):
    a = as_tensor(a)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def sum_all(a):
    a = as_tensor(a)
    return _record(np.sum(a.data), (a,), lambda g: (np.full_like(a.data, g),))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, index):
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return _record(a.data[index], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def mean_over_rows(a):
    """Average over the second-to-last axis: (N, C) -> (C,), (B, N, C) -> (B, C)."""
    a = as_tensor(a)
    n = a.shape[-2]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / n, a.shape).copy(),)

    return _record(a.data.mean(axis=-2), (a,), backward)


def tile_rows(a, n):
    """Repeat a row vector n times: (k,) -> (n, k), (B, k) -> (B, n, k)."""
    a = as_tensor(a)
    out = np.repeat(np.expand_dims(a.data, -2), n, axis=-2)
    return _record(out, (a,), lambda g: (g.sum(axis=-2),))


# ------------------------------------------------------------ linear algebra

def matmul(a, b):
    """(..., m, k) @ (k, n); leading axes of ``a`` act as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward)


def bias_add(x, b):
    """Add a row vector to every row of x."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add: {b.shape} does not match rows of {x.shape}")

    def backward(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _record(x.data + b.data, (x, b), backward)


def sparse_matmul(s: SparseMatrix, x):
    """S @ X for a constant sparse S; X is (n, C) or (B, n, C)."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] != s.shape[1]:
        raise DimensionError(f"sparse_matmul: {s.shape} cannot multiply {x.shape}")
    out = sparse_dense_multiply(s, x.data)
    return _record(out, (x,), lambda g: (sparse_dense_multiply(s.T, g),))


# ------------------------------------------------------------- nonlinearities

def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def softplus(x):
    x = as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.log1p(e) + np.maximum(d, 0.0)
    sig = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (x,), lambda g: (g * sig,))


def group_norm(x, groups, gamma, beta, eps=1e-5, per_sample=False):
    """Standardize within channel groups, then scale and shift.

    ``x`` is (..., C). By default every row (each leading index) is
    normalized on its own. With ``per_sample`` the first axis indexes
    samples and statistics pool over all middle axes as well, the usual
    group norm for feature maps (B, H, W, C) or vertex features (B, N, C).
    Variances are biased.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible by {groups} groups")
    if eps <= 0:
        raise ValueError("group_norm eps must be positive")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm: gamma/beta must have shape ({c},)")
    m = c // groups
    rows = x.shape[0] if per_sample else x.data.size // c
    xg = x.data.reshape(rows, -1, groups, m)
    # small-axis means as matrix-vector products; much faster than .mean(-1)
    avg = np.full(m, 1.0 / m, dtype=x.dtype)
    mu = (xg @ avg).mean(axis=1)[:, None, :, None]
    xc = xg - mu
    inv = 1.0 / np.sqrt((np.square(xc) @ avg).mean(axis=1) + eps)[:, None, :, None]
    xhat = xc * inv
    out = xhat.reshape(x.shape) * gamma.data + beta.data

    def backward(g):
        gflat = g.reshape(-1, c)
        dgamma = np.einsum("ij,ij->j", gflat, xhat.reshape(-1, c))
        dbeta = gflat.sum(axis=0)
        dxhat = (g * gamma.data).reshape(xhat.shape)
        a = (dxhat @ avg).mean(axis=1)[:, None, :, None]
        b = ((dxhat * xhat) @ avg).mean(axis=1)[:, None, :, None]
        dx = (dxhat - a - xhat * b) * inv
        return dx.reshape(x.shape), dgamma, dbeta

    return _record(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- convolution

def _im2col(xp, kh, kw, stride, ho, wo):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]  # (B, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def conv2d(x, w, stride=1, pad=0):
    """NHWC convolution; ``w`` is (kh, kw, C_in, C_out). No bias."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    b, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(b * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(b, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        if not x.requires_grad:
            return None, gw
        gcols = (g2 @ wmat.T).reshape(b, ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, pad:pad + h, pad:pad + wd, :]
        return gx, gw

    return _record(out, (x, w), backward)


# --------------------------------------------------------------------- losses

def l1_loss(p, t, weight=None):
    """Sum of absolute residuals, i.e. the sum over rows of row-wise L1 norms.

    ``weight`` (constant, same shape or broadcastable) masks entries; the
    subgradient at a zero residual is 0.
    """
    p, t = as_tensor(p), as_tensor(t)
    _check_same(p, t, "l1_loss")
    r = p.data - t.data
    w = np.ones_like(r) if weight is None else np.broadcast_to(np.asarray(weight, dtype=r.dtype), r.shape)
    out = np.sum(w * np.abs(r))
    sgn = np.sign(r) * w
    return _record(out, (p, t), lambda g: (g * sgn, -g * sgn))


def l2_loss(p, t):
    """Mean of squared residuals."""
    p, t = as_tensor(p), as_tensor(t)
    _check_same(p, t, "l2_loss")
    r = p.data - t.data
    n = r.size
    return _record(np.sum(r * r) / n, (p, t), lambda g: (g * 2.0 * r / n, -g * 2.0 * r / n))


# ------------------------------------------------------------ rotation output

def so3_project_array(m):
    """Nearest rotation (Frobenius) to each 3x3 block of ``m``.

    Returns ``(R, U', sigma', Vt, degenerate)`` where U' and sigma' carry the
    determinant sign correction.
    """
    m = np.asarray(m)
    if m.dtype != np.float32:
        m = m.astype(np.float64)
    u, s, vt = np.linalg.svd(m)
    d = np.where(np.linalg.det(u @ vt) < 0, -1.0, 1.0)
    u = u.copy()
    u[..., :, 2] *= d[..., None]
    s = s.copy()
    s[..., 2] *= d
    r = u @ vt
    pair = np.stack([s[..., 0] + s[..., 1], s[..., 0] + s[..., 2], s[..., 1] + s[..., 2]], axis=-1)
    scale_ = np.maximum(np.abs(s[..., 0]), 1e-300)
    degenerate = pair.min(axis=-1) <= 1e-10 * scale_
    return r, u, s, vt, degenerate


def so3_project(m):
    """Differentiable projection of (..., 3, 3) blocks onto SO(3).

    Gradients are undefined where a pair of corrected singular values sums
    to zero; :func:`so3_project_array` reports those blocks as degenerate.
    """
    m = as_tensor(m)
    r, u, s, vt, _ = so3_project_array(m.data)

    def backward(g):
        h = np.swapaxes(u, -1, -2) @ g @ np.swapaxes(vt, -1, -2)
        denom = s[..., :, None] + s[..., None, :]
        eye = np.eye(3, dtype=bool)
        denom = np.where(eye, 1.0, denom)
        k = (h - np.swapaxes(h, -1, -2)) / denom
        k = np.where(eye, 0.0, k)
        return (u @ k @ vt,)

    return _record(r.astype(m.dtype), (m,), backward)


# ------------------------------------------------------------ gradient checks

def numeric_gradient(f, arrays, step=1e-5):
    """Central differences of scalar ``f(*Tensors)`` w.r.t. every coordinate."""
    out = []
    base = [np.array(a, dtype=np.float64) for a in arrays]
    for k, a in enumerate(base):
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + step
            fp = float(f(*[Tensor(x) for x in base]).data)
            a[idx] = old - step
            fm = float(f(*[Tensor(x) for x in base]).data)
            a[idx] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite function value perturbing input {k} at {idx}")
            g[idx] = (fp - fm) / (2.0 * step)
        out.append(g)
    return out


@dataclass
class GradCheckReport:
    max_error: float
    input_index: int
    coordinate: tuple


def grad_check_report(f, inputs, step=1e-5, mask=None) -> GradCheckReport:
    """Compare tape gradients against central differences.

    The relative error per coordinate is |a - b| / max(|a|, |b|, 1e-8).
    ``mask`` optionally lists boolean arrays selecting which coordinates of
    each input to compare (used to skip non-differentiable kinks).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with GradientTape() as tape:
        y = f(*tensors)
    analytic = tape.gradient(y, tensors)
    numeric = numeric_gradient(f, arrays, step)
    worst = GradCheckReport(0.0, -1, ())
    for k, (a, b) in enumerate(zip(analytic, numeric)):
        if not np.all(np.isfinite(a)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(a))[0])
            raise GradCheckError(f"non-finite analytic gradient for input {k} at {bad}")
        err = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
        if mask is not None and mask[k] is not None:
            err = np.where(mask[k], err, 0.0)
        if err.size and err.max() > worst.max_error:
            idx = np.unravel_index(int(np.argmax(err)), err.shape)
            worst = GradCheckReport(float(err.max()), k, tuple(int(i) for i in idx))
    return worst


def grad_check(f, inputs, step=1e-5, mask=None) -> float:
    """Maximum relative error between tape and finite-difference gradients."""
    return grad_check_report(f, inputs, step, mask).max_error
