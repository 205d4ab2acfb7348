"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every array entering the model is wrapped in a :class:`Tensor`. While a
:class:`Tape` is active, primitive operations append vector-Jacobian
records to it; :func:`backward` replays the tape in reverse to produce a
gradient for each requested parameter (exact zeros for parameters that
never participated).

Matrix products go through a fixed-order accumulation kernel (numba when
available, unoptimized einsum otherwise) instead of BLAS. BLAS reorders
the reduction depending on operand shapes, which breaks two contracts we
rely on everywhere: equal input rows must produce bitwise-equal output
rows, and a row's result must not depend on how many other rows share the
call. The fixed-order kernel guarantees both.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation

try:
    import numba

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAS_NUMBA = False


# -----------------------------------------------------------------------------
# Fixed-order matrix multiply kernels
# -----------------------------------------------------------------------------

if _HAS_NUMBA:

    @numba.njit(cache=True, nogil=True)
    def _mm2_kernel(a, b):
        m, k = a.shape
        n = b.shape[1]
        out = np.zeros((m, n))
        for i in range(m):
            for p in range(k):
                aip = a[i, p]
                for j in range(n):
                    out[i, j] += aip * b[p, j]
        return out

    @numba.njit(cache=True, nogil=True)
    def _mm3_kernel(a, b):
        t, m, k = a.shape
        n = b.shape[2]
        out = np.zeros((t, m, n))
        for s in range(t):
            for i in range(m):
                for p in range(k):
                    aip = a[s, i, p]
                    for j in range(n):
                        out[s, i, j] += aip * b[s, p, j]
        return out

else:  # einsum with optimize=False accumulates in the same fixed order

    def _mm2_kernel(a, b):
        return np.einsum("mk,kn->mn", a, b, optimize=False)

    def _mm3_kernel(a, b):
        return np.einsum("bmk,bkn->bmn", a, b, optimize=False)


def matmul_raw(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Deterministic matrix product on plain arrays.

    Supports (m,k)@(k,n), (t,m,k)@(t,k,n) and (t,m,k)@(k,n). Row i of the
    output depends only on row i of ``a`` and on ``b``, bitwise, for every
    supported shape.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ContractViolation(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
        return _mm2_kernel(a, b)
    if a.ndim == 3 and b.ndim == 2:
        if a.shape[2] != b.shape[0]:
            raise ContractViolation(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
        t, m, k = a.shape
        return _mm2_kernel(a.reshape(t * m, k), b).reshape(t, m, b.shape[1])
    if a.ndim == 3 and b.ndim == 3:
        if a.shape[2] != b.shape[1] or a.shape[0] != b.shape[0]:
            raise ContractViolation(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
        return _mm3_kernel(a, b)
    raise ContractViolation(f"matmul unsupported ranks: {a.shape} @ {b.shape}")


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.swapaxes(x, -1, -2))


# -----------------------------------------------------------------------------
# Tensor and tape
# -----------------------------------------------------------------------------


class Tensor:
    """Immutable dense float64 array. Mutate only through the optimizer."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractViolation(f"tensor '{name}' contains non-finite entries")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class _Record:
    __slots__ = ("out", "parents", "vjps")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], vjps: Sequence[Optional[Callable]]):
        self.out = out
        self.parents = parents
        self.vjps = vjps


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Use as a context manager; operations executed inside record a
    vector-Jacobian closure per differentiable parent. Independent tapes on
    different threads do not interact (the active-tape stack is
    thread-local).
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._records)


def _emit(out_data: np.ndarray, parents: Sequence[Tensor], vjps: Sequence[Optional[Callable]]) -> Tensor:
    """Wrap an op result, recording it when a tape is active and a parent needs grad."""
    if not np.all(np.isfinite(out_data)):
        raise ContractViolation("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.name = ""
    stack = _tape_stack()
    if stack and any(p.requires_grad for p in parents):
        out.requires_grad = True
        stack[-1]._records.append(_Record(out, tuple(parents), tuple(vjps)))
    else:
        out.requires_grad = False
    return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss with respect to ``params``.

    Parameters that never participated in the taped forward pass receive an
    exact zero gradient. Repeat calls on the same tape and loss return
    identical values (the tape is not consumed).
    """
    if loss.data.size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape._records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        for parent, vjp in zip(rec.parents, rec.vjps):
            if vjp is None or not parent.requires_grad:
                continue
            piece = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = piece if acc is None else acc + piece
    return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


# -----------------------------------------------------------------------------
# Primitives
# -----------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = matmul_raw(a.data, b.data)
    ad, bd = a.data, b.data

    def vjp_a(g):
        return matmul_raw(g, _swap_last(bd))

    def vjp_b(g):
        if ad.ndim == 3 and bd.ndim == 2:
            t, m, k = ad.shape
            return matmul_raw(_swap_last(ad.reshape(t * m, k)), g.reshape(t * m, -1))
        return matmul_raw(_swap_last(ad), g)

    return _emit(out, (a, b), (vjp_a, vjp_b))


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _emit(out, (a, b), (lambda g: _unbroadcast(g, a.data.shape),
                               lambda g: _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _emit(out, (a, b), (lambda g: _unbroadcast(g, a.data.shape),
                               lambda g: _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _emit(out, (a, b), (lambda g: _unbroadcast(g * bd, ad.shape),
                               lambda g: _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), (lambda g: g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit(out, (a,), (lambda g: g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.log(ad), (a,), (lambda g: g / ad,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(np.maximum(ad, 0.0), (a,), (lambda g: g * (ad > 0.0),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _emit(np.clip(ad, lo, hi), (a,), (lambda g: g * inside,))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _emit(out, (a,), (vjp,))


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape) / count

    return _emit(out, (a,), (vjp,))


def reshape(a: Tensor, dims: tuple) -> Tensor:
    shape = a.data.shape
    return _emit(a.data.reshape(dims), (a,), (lambda g: g.reshape(shape),))


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _emit(out, (a,), (lambda g: np.ascontiguousarray(np.transpose(g, inv)),))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    na = a.data.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return _emit(out, (a, b), (lambda g: g[:na], lambda g: g[na:]))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.data.shape
    out = np.ascontiguousarray(a.data[start:stop])

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return full

    return _emit(out, (a,), (vjp,))


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Rows of ``a`` selected by an integer index vector (axis 0)."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ContractViolation(f"gather index out of range [0, {a.data.shape[0]})")
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return _emit(a.data[idx].copy(), (a,), (vjp,))


def take_per_row(a: Tensor, indices: np.ndarray) -> Tensor:
    """Element ``a[i, indices[i]]`` per row; output shape (rows,)."""
    idx = np.asarray(indices)
    rows = np.arange(a.data.shape[0])
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise ContractViolation(f"per-row index out of range [0, {a.data.shape[1]})")
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return full

    return _emit(a.data[rows, idx].copy(), (a,), (vjp,))


def expand_batch(a: Tensor, batch: int) -> Tensor:
    """Replicate a (m, n) tensor into (batch, m, n); gradient sums over copies."""
    out = np.broadcast_to(a.data, (batch,) + a.data.shape).copy()
    return _emit(out, (a,), (lambda g: g.sum(axis=0),))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax: per-axis max is subtracted before exp."""
    ld = logits.data
    if ld.shape[axis] == 0:
        raise ContractViolation("softmax over an empty axis")
    shifted = ld - ld.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (out * g).sum(axis=axis, keepdims=True))

    return _emit(out, (logits,), (vjp,))


def masked_softmax(logits: Tensor, allowed: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to positions where ``allowed`` is True.

    Disallowed positions get exact zero weight and zero gradient. Every
    slice along ``axis`` must keep at least one allowed position.
    """
    ld = logits.data
    mask = np.broadcast_to(np.asarray(allowed, dtype=bool), ld.shape)
    if not mask.any(axis=axis).all():
        raise ContractViolation("masked_softmax: a slice has no allowed positions")
    neg = np.where(mask, ld, -np.inf)
    shifted = neg - neg.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (out * g).sum(axis=axis, keepdims=True))

    return _emit(out, (logits,), (vjp,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mean) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = gain.data * xhat + bias.data
    width = xd.shape[-1]

    def vjp_x(g):
        gg = g * gain.data
        return inv * (gg - gg.mean(axis=-1, keepdims=True)
                      - xhat * (gg * xhat).mean(axis=-1, keepdims=True))

    def vjp_gain(g):
        return _unbroadcast(g * xhat, gain.data.shape)

    def vjp_bias(g):
        return _unbroadcast(g, bias.data.shape)

    del width
    return _emit(out, (x, gain, bias), (vjp_x, vjp_gain, vjp_bias))


def sqdist(q: Tensor, k: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances: out[i, j] = ||q_i - k_j||^2."""
    diff = q.data[:, None, :] - k.data[None, :, :]
    out = (diff ** 2).sum(axis=-1)

    def vjp_q(g):
        return 2.0 * (g[:, :, None] * diff).sum(axis=1)

    def vjp_k(g):
        return -2.0 * (g[:, :, None] * diff).sum(axis=0)

    return _emit(out, (q, k), (vjp_q, vjp_k))


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale every row to unit Euclidean norm."""
    xd = x.data
    norm = np.sqrt((xd ** 2).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = xd / norm

    def vjp(g):
        return (g - out * (g * out).sum(axis=-1, keepdims=True)) / norm

    return _emit(out, (x,), (vjp,))


# -----------------------------------------------------------------------------
# Finite-difference oracle
# -----------------------------------------------------------------------------


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    if eps <= 0:
        raise ContractViolation("finite differences need eps > 0")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xflat = x.reshape(-1)
    for i in range(xflat.size):
        orig = xflat[i]
        xflat[i] = orig + eps
        hi = float(f(x))
        xflat[i] = orig - eps
        lo = float(f(x))
        xflat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ContractViolation(f"finite differences: non-finite value at coordinate {i}")
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """max |a - r| scaled by max(1, largest magnitude in either gradient)."""
    denom = max(1.0, float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(reference).max(initial=0.0)))
    return float(np.abs(analytic - reference).max(initial=0.0)) / denom
