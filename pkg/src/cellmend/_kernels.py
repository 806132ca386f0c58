"""Hot numeric kernels: numba @njit implementations with numpy fallbacks.

The public names (``edge_candidates``, ``triplet_pairs``,
``segment_sum_rows``, ``scatter_add_rows``, ``segment_outer``,
``segment_weighted_matsum``) are bound to one of the two paths at import
time according to :mod:`cellmend.backend`.  Each path is deterministic
on its own; across backends results agree to rounding level.

Conventions: lattice rows are generators, fractional row-vectors map to
physical space as ``v = e @ rho``.
"""

from __future__ import annotations

import numpy as np

from .backend import NUMBA_ENABLED

# ---------------------------------------------------------------------------
# numpy fallbacks
# ---------------------------------------------------------------------------


def _tau_grid(tmax: np.ndarray) -> np.ndarray:
    ax = [np.arange(-int(t), int(t) + 1, dtype=np.int64) for t in tmax]
    g = np.meshgrid(*ax, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


def edge_candidates_numpy(x, rho, tmax, cut):
    """All (i, j, tau) with 0 < |(x_j - x_i + tau) @ rho| < cut[i].

    tau ranges over the box [-tmax, tmax]^3.  Returns (ci, cj, ctau, cr).
    """
    n = x.shape[0]
    taus = _tau_grid(tmax)
    diff = x[None, :, None, :] - x[:, None, None, :] + taus[None, None, :, :]
    v = diff @ rho
    r = np.sqrt(np.einsum("ijtk,ijtk->ijt", v, v))
    mask = (r > 0.0) & (r < cut[:, None, None])
    ci, cj, ct = np.nonzero(mask)
    return (
        ci.astype(np.int64),
        cj.astype(np.int64),
        taus[ct],
        r[ci, cj, ct],
    )


def triplet_pairs_numpy(src, dst, tau, out_start):
    """Chained edge pairs (g, g2) with src(g2) = dst(g), reverse image excluded.

    Edges must be in canonical (src-major) order; ``out_start[v]`` is the
    first edge whose src is v.
    """
    e = src.shape[0]
    starts = out_start[dst]
    counts = out_start[dst + 1] - starts
    total = int(counts.sum())
    first = np.repeat(np.arange(e, dtype=np.int64), counts)
    offs = np.arange(total, dtype=np.int64) - np.repeat(
        np.cumsum(counts) - counts, counts
    )
    second = np.repeat(starts, counts) + offs
    back = (dst[second] == src[first]) & np.all(tau[second] == -tau[first], axis=1)
    keep = ~back
    return first[keep], second[keep]


def segment_sum_rows_numpy(values, starts):
    """Sum rows of ``values`` over contiguous segments delimited by ``starts``."""
    cs = np.empty((values.shape[0] + 1, values.shape[1]), dtype=values.dtype)
    cs[0] = 0.0
    np.cumsum(values, axis=0, out=cs[1:])
    return cs[starts[1:]] - cs[starts[:-1]]


def scatter_add_rows_numpy(values, idx, n):
    out = np.zeros((n, values.shape[1]), dtype=values.dtype)
    np.add.at(out, idx, values)
    return out


def segment_outer_numpy(a, b, starts):
    """Per-segment sum of outer(a_e, b_e); a, b are (E, 3)."""
    prod = a[:, :, None] * b[:, None, :]
    return segment_sum_rows_numpy(prod.reshape(-1, 9), starts).reshape(-1, 3, 3)


def segment_weighted_matsum_numpy(w, mats, starts):
    """Per-segment sum of w_e * mats_e; mats is (E, 3, 3)."""
    prod = w[:, None] * mats.reshape(-1, 9)
    return segment_sum_rows_numpy(prod, starts).reshape(-1, 3, 3)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:
    from numba import njit

    @njit(cache=True)
    def _edge_candidates_nb(x, rho, tmax, cut):
        n = x.shape[0]
        t1, t2, t3 = tmax[0], tmax[1], tmax[2]
        # first pass: count
        count = 0
        for i in range(n):
            ci2 = cut[i] * cut[i]
            for j in range(n):
                dx0 = x[j, 0] - x[i, 0]
                dx1 = x[j, 1] - x[i, 1]
                dx2 = x[j, 2] - x[i, 2]
                for a in range(-t1, t1 + 1):
                    e0 = dx0 + a
                    for b in range(-t2, t2 + 1):
                        e1 = dx1 + b
                        for c in range(-t3, t3 + 1):
                            e2 = dx2 + c
                            v0 = e0 * rho[0, 0] + e1 * rho[1, 0] + e2 * rho[2, 0]
                            v1 = e0 * rho[0, 1] + e1 * rho[1, 1] + e2 * rho[2, 1]
                            v2 = e0 * rho[0, 2] + e1 * rho[1, 2] + e2 * rho[2, 2]
                            r2 = v0 * v0 + v1 * v1 + v2 * v2
                            if 0.0 < r2 < ci2:
                                count += 1
        ci = np.empty(count, dtype=np.int64)
        cj = np.empty(count, dtype=np.int64)
        ct = np.empty((count, 3), dtype=np.int64)
        cr = np.empty(count, dtype=np.float64)
        k = 0
        for i in range(n):
            ci2 = cut[i] * cut[i]
            for j in range(n):
                dx0 = x[j, 0] - x[i, 0]
                dx1 = x[j, 1] - x[i, 1]
                dx2 = x[j, 2] - x[i, 2]
                for a in range(-t1, t1 + 1):
                    e0 = dx0 + a
                    for b in range(-t2, t2 + 1):
                        e1 = dx1 + b
                        for c in range(-t3, t3 + 1):
                            e2 = dx2 + c
                            v0 = e0 * rho[0, 0] + e1 * rho[1, 0] + e2 * rho[2, 0]
                            v1 = e0 * rho[0, 1] + e1 * rho[1, 1] + e2 * rho[2, 1]
                            v2 = e0 * rho[0, 2] + e1 * rho[1, 2] + e2 * rho[2, 2]
                            r2 = v0 * v0 + v1 * v1 + v2 * v2
                            if 0.0 < r2 < ci2:
                                ci[k] = i
                                cj[k] = j
                                ct[k, 0] = a
                                ct[k, 1] = b
                                ct[k, 2] = c
                                cr[k] = np.sqrt(r2)
                                k += 1
        return ci, cj, ct, cr

    def edge_candidates_numba(x, rho, tmax, cut):
        ci, cj, ct, cr = _edge_candidates_nb(x, rho, tmax, cut)
        # recompute r via the same matmul as the numpy path so that both
        # backends agree bitwise (kernel r2 only gates the inequality)
        e = x[cj] - x[ci] + ct
        v = e @ rho
        return ci, cj, ct, np.sqrt(np.einsum("ek,ek->e", v, v))

    @njit(cache=True)
    def triplet_pairs_numba(src, dst, tau, out_start):
        e = src.shape[0]
        count = 0
        for g in range(e):
            j = dst[g]
            for g2 in range(out_start[j], out_start[j + 1]):
                if (
                    dst[g2] == src[g]
                    and tau[g2, 0] == -tau[g, 0]
                    and tau[g2, 1] == -tau[g, 1]
                    and tau[g2, 2] == -tau[g, 2]
                ):
                    continue
                count += 1
        first = np.empty(count, dtype=np.int64)
        second = np.empty(count, dtype=np.int64)
        k = 0
        for g in range(e):
            j = dst[g]
            for g2 in range(out_start[j], out_start[j + 1]):
                if (
                    dst[g2] == src[g]
                    and tau[g2, 0] == -tau[g, 0]
                    and tau[g2, 1] == -tau[g, 1]
                    and tau[g2, 2] == -tau[g, 2]
                ):
                    continue
                first[k] = g
                second[k] = g2
                k += 1
        return first, second

    @njit(cache=True)
    def segment_sum_rows_numba(values, starts):
        nseg = starts.shape[0] - 1
        f = values.shape[1]
        out = np.zeros((nseg, f), dtype=values.dtype)
        for s in range(nseg):
            for e in range(starts[s], starts[s + 1]):
                for c in range(f):
                    out[s, c] += values[e, c]
        return out

    @njit(cache=True)
    def scatter_add_rows_numba(values, idx, n):
        f = values.shape[1]
        out = np.zeros((n, f), dtype=values.dtype)
        for e in range(values.shape[0]):
            i = idx[e]
            for c in range(f):
                out[i, c] += values[e, c]
        return out

    @njit(cache=True)
    def segment_outer_numba(a, b, starts):
        nseg = starts.shape[0] - 1
        out = np.zeros((nseg, 3, 3), dtype=a.dtype)
        for s in range(nseg):
            for e in range(starts[s], starts[s + 1]):
                for i in range(3):
                    for j in range(3):
                        out[s, i, j] += a[e, i] * b[e, j]
        return out

    @njit(cache=True)
    def segment_weighted_matsum_numba(w, mats, starts):
        nseg = starts.shape[0] - 1
        out = np.zeros((nseg, 3, 3), dtype=mats.dtype)
        for s in range(nseg):
            for e in range(starts[s], starts[s + 1]):
                we = w[e]
                for i in range(3):
                    for j in range(3):
                        out[s, i, j] += we * mats[e, i, j]
        return out


if NUMBA_ENABLED:
    edge_candidates = edge_candidates_numba
    triplet_pairs = triplet_pairs_numba
    segment_sum_rows = segment_sum_rows_numba
    scatter_add_rows = scatter_add_rows_numba
    segment_outer = segment_outer_numba
    segment_weighted_matsum = segment_weighted_matsum_numba
else:
    edge_candidates = edge_candidates_numpy
    triplet_pairs = triplet_pairs_numpy
    segment_sum_rows = segment_sum_rows_numpy
    scatter_add_rows = scatter_add_rows_numpy
    segment_outer = segment_outer_numpy
    segment_weighted_matsum = segment_weighted_matsum_numpy
