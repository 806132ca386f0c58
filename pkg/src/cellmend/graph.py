"""Periodic directed 2-graphs and their edge/triplet geometry.

An edge is a triple (src, dst, tau): it points from atom ``src`` to the
periodic image of atom ``dst`` shifted by the integer offset ``tau``.
A triplet chains two edges head-to-tail.  Edge and triplet sets are kept
in canonical order -- edges sorted by (src, dst, tau), triplets by
(first edge index, second edge index) -- so identical inputs always give
bitwise-identical graphs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import _kernels
from .core import DomainError, Material, supercell_bound

#: cross-product norm below 1e-10 * r * r' marks a triplet as collinear
_COLLINEAR_TOL = 1e-10

#: KNN ties are broken on r rounded to this quantum, then (dst, tau)
_TIE_QUANTUM = 1e-9


@dataclass(frozen=True)
class KNN:
    """Keep the k nearest images of every atom."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise DomainError("k must be at least 1")


@dataclass(frozen=True)
class Cutoff:
    """Keep every image strictly closer than the cutoff (per-vertex or shared)."""

    c: Union[float, np.ndarray]


Policy = Union[KNN, Cutoff]


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    tau: tuple

    def __post_init__(self):
        if self.src == self.dst and all(t == 0 for t in self.tau):
            raise DomainError("the zero self-image is not an edge")


@dataclass(frozen=True)
class Triplet:
    first: int
    second: int


@dataclass(frozen=True)
class PeriodicGraph:
    """Vertices 0..n-1 plus canonical edge and triplet index arrays.

    ``out_start`` delimits the src-major edge groups: edges of vertex v
    occupy ``[out_start[v], out_start[v + 1])``.
    """

    n_vertices: int
    src: np.ndarray  # (E,)  int64
    dst: np.ndarray  # (E,)  int64
    tau: np.ndarray  # (E,3) int64
    t_first: np.ndarray  # (T,) int64, index into edges
    t_second: np.ndarray  # (T,) int64
    out_start: np.ndarray  # (n+1,) int64
    policy: Policy

    def __post_init__(self):
        for arr in (self.src, self.dst, self.tau, self.t_first, self.t_second,
                    self.out_start):
            arr.setflags(write=False)
        if self.t_first.shape[0] and np.any(
            self.dst[self.t_first] != self.src[self.t_second]
        ):
            raise DomainError("triplet chaining condition violated")

    @property
    def n_edges(self) -> int:
        return self.src.shape[0]

    @property
    def n_triplets(self) -> int:
        return self.t_first.shape[0]

    def edge_list(self):
        return [
            Edge(int(i), int(j), tuple(int(t) for t in tau))
            for i, j, tau in zip(self.src, self.dst, self.tau)
        ]

    def triplet_list(self):
        return [Triplet(int(a), int(b)) for a, b in zip(self.t_first, self.t_second)]

    def to_json_dict(self) -> dict:
        return {
            "n": self.n_vertices,
            "edges": [
                [int(i), int(j), int(t0), int(t1), int(t2)]
                for i, j, (t0, t1, t2) in zip(self.src, self.dst, self.tau)
            ],
            "triplets": [
                [int(a), int(b)] for a, b in zip(self.t_first, self.t_second)
            ],
        }


def _canonical_edge_order(ci, cj, ct):
    return np.lexsort((ct[:, 2], ct[:, 1], ct[:, 0], cj, ci))


def _knn_select(ci, cj, ct, cr, n, k):
    """Per-vertex nearest images by rounded r, whole tie groups kept.

    Every candidate strictly closer than the k-th rounded distance is
    taken, plus the complete group tied with the k-th.  Keeping tie
    groups intact makes the selection a function of the (invariant)
    distance multiset alone, so the edge set maps bijectively under
    orthogonal maps and lattice re-basings even when a self-image pair
    (i, i, +-tau) straddles the k boundary.
    """
    rq = np.round(cr / _TIE_QUANTUM).astype(np.int64)
    order = np.lexsort((ct[:, 2], ct[:, 1], ct[:, 0], cj, rq, ci))
    ci_s = ci[order]
    rq_s = rq[order]
    counts = np.bincount(ci_s, minlength=n)
    if np.any(counts < k):
        return None
    starts = np.concatenate(([0], np.cumsum(counts)))[:-1]
    kth_rq = rq_s[starts + k - 1]
    pos_in_group = np.arange(order.shape[0]) - np.repeat(starts, counts)
    keep = (pos_in_group < k) | (rq_s <= np.repeat(kth_rq, counts))
    return order[keep]


def build_graph(m: Material, policy: Policy) -> PeriodicGraph:
    """Build the periodic 2-graph of a material under a KNN or cutoff policy.

    Cutoff keeps exactly the (i, j, tau) with 0 < r < c_i.  KNN keeps, for
    each vertex, the k nearest images by rounded distance with whole tie
    groups included (so at least k edges; see _knn_select for why split
    ties would break re-basing stability).  Triplets chain every edge
    pair head-to-tail except the exact backtracking pair (j -> i, -tau).
    """
    n = m.n_atoms
    x = np.ascontiguousarray(m.x)
    rho = np.ascontiguousarray(m.rho)

    if isinstance(policy, Cutoff):
        cut = np.asarray(policy.c, dtype=np.float64)
        cut = np.full(n, float(cut)) if cut.ndim == 0 else cut.astype(np.float64)
        if cut.shape != (n,):
            raise DomainError("per-vertex cutoffs must have one entry per atom")
        if np.any(cut <= 0):
            raise DomainError("cutoffs must be positive")
        tmax = supercell_bound(rho, float(cut.max()))
        ci, cj, ct, cr = _kernels.edge_candidates(x, rho, tmax, cut)
        keep = _canonical_edge_order(ci, cj, ct)
    elif isinstance(policy, KNN):
        k = policy.k
        # density-based start: the ball holding k images on average, plus
        # 30% slack; the doubling loop below keeps this correct for any start
        radius = 0.81 * (k * abs(np.linalg.det(rho)) / n) ** (1.0 / 3.0)
        keep = None
        for _ in range(60):
            cut = np.full(n, radius)
            tmax = supercell_bound(rho, radius)
            ci, cj, ct, cr = _kernels.edge_candidates(x, rho, tmax, cut)
            sel = _knn_select(ci, cj, ct, cr, n, k)
            if sel is not None:
                keep = sel
                break
            radius *= 2.0
        if keep is None:
            raise RuntimeError("neighbour search failed to find k candidates")
        ci, cj, ct = ci[keep], cj[keep], ct[keep]
        keep = _canonical_edge_order(ci, cj, ct)
    else:
        raise DomainError(f"unknown graph policy {type(policy).__name__}")

    src = np.ascontiguousarray(ci[keep])
    dst = np.ascontiguousarray(cj[keep])
    tau = np.ascontiguousarray(ct[keep])

    counts = np.bincount(src, minlength=n)
    out_start = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    t_first, t_second = _kernels.triplet_pairs(src, dst, tau, out_start)

    return PeriodicGraph(
        n_vertices=n,
        src=src,
        dst=dst,
        tau=tau,
        t_first=np.asarray(t_first, dtype=np.int64),
        t_second=np.asarray(t_second, dtype=np.int64),
        out_start=out_start,
        policy=policy,
    )


# ---------------------------------------------------------------------------
# Geometry (vectorised over the canonical edge/triplet order)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeGeometry:
    """Per-edge geometry: fractional edge vector ``e``, physical vector
    ``v = e @ rho`` (A), length ``r`` and unit vector ``u``."""

    e: np.ndarray  # (E, 3)
    v: np.ndarray  # (E, 3)
    r: np.ndarray  # (E,)
    u: np.ndarray  # (E, 3)


@dataclass(frozen=True)
class TripletGeometry:
    """Per-triplet geometry: unoriented angle ``theta`` in [0, pi], triangle
    ``area`` (A^2), unit normal ``omega`` and a ``collinear`` flag (omega is
    zeroed where set)."""

    theta: np.ndarray  # (T,)
    area: np.ndarray  # (T,)
    omega: np.ndarray  # (T, 3)
    collinear: np.ndarray  # (T,) bool


def edge_geometry(
    graph: PeriodicGraph, m: Material, rho: Optional[np.ndarray] = None
) -> EdgeGeometry:
    """Geometry of every edge, optionally against a deformed lattice that
    shares the topology."""
    rho_use = m.rho if rho is None else np.asarray(rho, dtype=np.float64)
    e = m.x[graph.dst] - m.x[graph.src] + graph.tau
    v = e @ rho_use
    r = np.linalg.norm(v, axis=1)
    if np.any(r <= 0.0):
        raise DomainError("zero-length edge vector")
    u = v / r[:, None]
    return EdgeGeometry(e=e, v=v, r=r, u=u)


def triplet_geometry(
    graph: PeriodicGraph,
    m: Material,
    rho: Optional[np.ndarray] = None,
    eg: Optional[EdgeGeometry] = None,
) -> TripletGeometry:
    """Angle (atan2 form, stable near 0 and pi), area and unit normal of
    every chained edge pair."""
    if eg is None:
        eg = edge_geometry(graph, m, rho)
    v1 = eg.v[graph.t_first]
    v2 = eg.v[graph.t_second]
    r1 = eg.r[graph.t_first]
    r2 = eg.r[graph.t_second]
    cross = np.cross(v1, v2)
    s = np.linalg.norm(cross, axis=1)
    c = np.einsum("tk,tk->t", v1, v2)
    theta = np.arctan2(s, c)
    area = 0.5 * s
    collinear = s < _COLLINEAR_TOL * r1 * r2
    denom = np.where(s > 0.0, s, 1.0)
    omega = np.where(collinear[:, None], 0.0, cross / denom[:, None])
    return TripletGeometry(theta=theta, area=area, omega=omega, collinear=collinear)
