"""Minimal reverse-mode differentiation tape over dense float64 arrays.

Tensors record their parents and a backward closure; ``backward()`` on a
scalar walks the graph in reverse topological order.  Only the operations
the lattice-deformation model needs are provided: dense linear algebra,
pointwise nonlinearities, gathers and contiguous-segment reductions (the
reductions run on the kernel backend, see :mod:`cellmend._kernels`).

Operations whose inputs all have ``requires_grad=False`` produce constant
outputs and are pruned from the backward graph.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import _kernels


class Tensor:
    """A dense float64 array plus an optional backward-graph node."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.shape != ():
            raise ValueError("backward() expects a scalar")
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones(())
        for node in reversed(topo):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _make(data, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents),
                      backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * out / b.data, b.data.shape))

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bw)


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluated on the negative half-line to avoid exp overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), bw)


def silu(a: Tensor) -> Tensor:
    sig = _sigmoid(a.data)
    out = a.data * sig

    def bw(g):
        _accum(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _make(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _make(out, (a,), bw)


def cos(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g * np.sin(a.data))

    return _make(np.cos(a.data), (a,), bw)


def sin(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g * np.cos(a.data))

    return _make(np.sin(a.data), (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        _accum(a, g * 0.5 / out)

    return _make(out, (a,), bw)


def absval(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g * np.sign(a.data))

    return _make(np.abs(a.data), (a,), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient is zero outside [lo, hi]."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        _accum(a, g * inside)

    return _make(out, (a,), bw)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    denom = x.data * x.data + y.data * y.data

    def bw(g):
        _accum(y, _unbroadcast(g * x.data / denom, y.data.shape))
        _accum(x, _unbroadcast(-g * y.data / denom, x.data.shape))

    return _make(np.arctan2(y.data, x.data), (y, x), bw)


# ---------------------------------------------------------------------------
# shape and linear algebra
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bw(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product on stacks of matrices."""

    def bw(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def transpose_last(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2), (a,), bw)


def concat(ts: Sequence[Tensor], axis: int = 1) -> Tensor:
    widths = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(widths)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        full[:, j0:j1] = g
        _accum(a, full)

    return _make(a.data[:, j0:j1], (a,), bw)


def stack_cols(ts: Sequence[Tensor]) -> Tensor:
    """Stack 1-d tensors of equal length as the columns of a matrix."""

    def bw(g):
        for c, t in enumerate(ts):
            _accum(t, g[:, c])

    return _make(np.stack([t.data for t in ts], axis=1), tuple(ts), bw)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the leading axis; backward scatter-adds."""
    n = a.data.shape[0]
    trail = a.data.shape[1:]

    def bw(g):
        flat = g.reshape(idx.shape[0], -1)
        acc = _kernels.scatter_add_rows(np.ascontiguousarray(flat), idx, n)
        _accum(a, acc.reshape((n,) + trail))

    return _make(a.data[idx], (a,), bw)


def segment_sum(a: Tensor, starts: np.ndarray) -> Tensor:
    """Sum contiguous row segments delimited by ``starts`` (length S+1)."""
    counts = np.diff(starts)
    trail = a.data.shape[1:]
    flat = a.data.reshape(a.data.shape[0], -1)
    out = _kernels.segment_sum_rows(np.ascontiguousarray(flat), starts)

    def bw(g):
        rep = np.repeat(g.reshape(g.shape[0], -1), counts, axis=0)
        _accum(a, rep.reshape((a.data.shape[0],) + trail))

    return _make(out.reshape((starts.shape[0] - 1,) + trail), (a,), bw)


def rows_norm(v: Tensor, floor: float = 0.0) -> Tensor:
    """Euclidean norm of each row; ``floor`` regularises the gradient at 0."""
    sq = np.einsum("...k,...k->...", v.data, v.data) + floor * floor
    out = np.sqrt(sq)

    def bw(g):
        _accum(v, (g / out)[..., None] * v.data)

    return _make(out, (v,), bw)


def rows_dot(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g[..., None] * b.data)
        _accum(b, g[..., None] * a.data)

    return _make(np.einsum("...k,...k->...", a.data, b.data), (a, b), bw)


def cross3(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.cross(b.data, g))
        _accum(b, np.cross(g, a.data))

    return _make(np.cross(a.data, b.data), (a, b), bw)


def outer_rows(a: Tensor, b: Tensor) -> Tensor:
    """Per-row outer product: (E, 3) x (E, 3) -> (E, 3, 3)."""

    def bw(g):
        _accum(a, np.einsum("...ij,...j->...i", g, b.data))
        _accum(b, np.einsum("...ij,...i->...j", g, a.data))

    return _make(a.data[..., :, None] * b.data[..., None, :], (a, b), bw)


def trace3(a: Tensor) -> Tensor:
    eye = np.eye(a.data.shape[-1])

    def bw(g):
        _accum(a, g[..., None, None] * eye)

    return _make(np.trace(a.data, axis1=-2, axis2=-1), (a,), bw)


def select_row(a: Tensor, i: int) -> Tensor:
    """Row i of each matrix in a stack: (B, 3, 3) -> (B, 3)."""

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, i, :] = g
        _accum(a, full)

    return _make(a.data[:, i, :], (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(a.data.sum(), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    size = a.data.size

    def bw(g):
        _accum(a, np.broadcast_to(g / size, a.data.shape))

    return _make(a.data.mean(), (a,), bw)


# ---------------------------------------------------------------------------
# graph-structured operations
# ---------------------------------------------------------------------------


def edge_matvec(
    e_const: np.ndarray, rho: Tensor, edge_sample: np.ndarray,
    sample_starts: np.ndarray,
) -> Tensor:
    """Physical edge vectors e @ rho[sample] for a batch of lattices.

    ``e_const`` (E, 3) are the constant fractional edge vectors, ``rho``
    stacks one stored lattice per sample, ``edge_sample`` maps edges to
    samples and must be sorted (``sample_starts`` delimits the groups).
    """
    out = np.einsum("ei,eij->ej", e_const, rho.data[edge_sample])

    def bw(g):
        _accum(rho, _kernels.segment_outer(
            e_const, np.ascontiguousarray(g), sample_starts))

    return _make(out, (rho,), bw)


def weighted_matsum(
    w: Tensor, mats: Tensor, edge_sample: np.ndarray, sample_starts: np.ndarray
) -> Tensor:
    """Per-sample sum of w_e * mats_e: returns a (B, 3, 3) stack."""
    out = _kernels.segment_weighted_matsum(
        np.ascontiguousarray(w.data), np.ascontiguousarray(mats.data), sample_starts
    )

    def bw(g):
        gseg = g[edge_sample]
        _accum(w, np.einsum("eij,eij->e", mats.data, gseg))
        _accum(mats, w.data[:, None, None] * gseg)

    return _make(out, (w, mats), bw)
