"""Material representation, torus arithmetic, group actions and 3x3 utilities.

Storage convention, fixed once for the whole package: the three lattice
generators are the ROWS of ``rho``.  A fractional row-vector ``x`` maps
to physical space as ``x @ rho`` (equivalently ``rho.T`` applied to the
column coordinate).  Every formula below is written against this
convention.

All functions are pure; materials are immutable after construction and
safe to share across workers.  Randomness always comes in through an
explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

MAX_ATOMIC_NUMBER = 100

#: snap width for fractional coordinates sitting just below an integer
_WRAP_SNAP = 1e-12


class DomainError(ValueError):
    """Raised when an input violates a documented precondition."""


def _as_matrix(rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != (3, 3):
        raise DomainError(f"expected a 3x3 matrix, got shape {rho.shape}")
    return rho


# ---------------------------------------------------------------------------
# Material
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Material:
    """A periodic structure: lattice rows ``rho`` (A), fractional positions
    ``x`` in [0, 1), and atomic numbers ``z``.

    Invariants are checked at construction: ``rho`` is invertible, every
    fractional component lies in [0, 1), and ``len(x) == len(z) >= 1``.
    """

    rho: np.ndarray
    x: np.ndarray
    z: np.ndarray
    ident: str = ""

    def __post_init__(self):
        rho = _as_matrix(self.rho)
        x = np.asarray(self.x, dtype=np.float64)
        z = np.asarray(self.z, dtype=np.int64)
        if not np.all(np.isfinite(rho)):
            raise DomainError("rho has non-finite entries")
        if abs(np.linalg.det(rho)) < 1e-12:
            raise DomainError("rho is singular")
        if x.ndim != 2 or x.shape[1] != 3:
            raise DomainError(f"x must be (n, 3), got {x.shape}")
        if x.shape[0] < 1:
            raise DomainError("a material needs at least one atom")
        if not np.all(np.isfinite(x)):
            raise DomainError("x has non-finite entries")
        if np.any(x < 0.0) or np.any(x >= 1.0):
            raise DomainError("fractional coordinates must lie in [0, 1)")
        if z.shape != (x.shape[0],):
            raise DomainError("x and z must have the same length")
        if np.any(z < 0):
            raise DomainError("atomic numbers must be non-negative")
        for arr in (rho, x, z):
            arr.setflags(write=False)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)

    @property
    def n_atoms(self) -> int:
        return self.x.shape[0]


# ---------------------------------------------------------------------------
# Group elements
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Permutation:
    """Relabelling of atoms; ``perm[i]`` is the new index of atom i."""

    perm: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.perm, dtype=np.int64)
        if sorted(p.tolist()) != list(range(p.shape[0])):
            raise DomainError("not a permutation")
        p.setflags(write=False)
        object.__setattr__(self, "perm", p)


@dataclass(frozen=True)
class Orthogonal:
    """Rotation or reflection of physical space."""

    g: np.ndarray

    def __post_init__(self):
        g = _as_matrix(self.g)
        if np.max(np.abs(g.T @ g - np.eye(3))) > 1e-10:
            raise DomainError("matrix is not orthogonal within 1e-10")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)


@dataclass(frozen=True)
class Translation:
    """Rigid translation of physical space by ``v`` (A)."""

    v: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64).reshape(3)
        v.setflags(write=False)
        object.__setattr__(self, "v", v)


@dataclass(frozen=True)
class SLZ:
    """Integer change of lattice generators with determinant exactly +1."""

    g: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g)
        if g.shape != (3, 3) or not np.issubdtype(g.dtype, np.integer):
            g2 = np.asarray(g, dtype=np.float64)
            if g2.shape != (3, 3) or np.any(g2 != np.round(g2)):
                raise DomainError("SLZ element must be a 3x3 integer matrix")
            g = g2.astype(np.int64)
        g = g.astype(np.int64)
        # integer determinant, no float round-off
        det = (
            g[0, 0] * (g[1, 1] * g[2, 2] - g[1, 2] * g[2, 1])
            - g[0, 1] * (g[1, 0] * g[2, 2] - g[1, 2] * g[2, 0])
            + g[0, 2] * (g[1, 0] * g[2, 1] - g[1, 1] * g[2, 0])
        )
        if det != 1:
            raise DomainError(f"SLZ element must have determinant +1, got {det}")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)


@dataclass(frozen=True)
class Composite:
    """Ordered composition; members are applied first-to-last."""

    members: tuple

    def __init__(self, members: Sequence):
        object.__setattr__(self, "members", tuple(members))
        if not self.members:
            raise DomainError("composite needs at least one member")


GroupElement = Union[Permutation, Orthogonal, Translation, SLZ, Composite]


# ---------------------------------------------------------------------------
# Torus arithmetic and actions
# ---------------------------------------------------------------------------


def wrap_frac(v) -> np.ndarray:
    """Map each component to its representative in [0, 1).

    Components within 1e-12 below an integer are snapped up before the
    floor so that 0.999999999999xx and 1.0 both wrap to 0.0; this keeps
    act/act-inverse round trips stable.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DomainError("wrap_frac requires finite input")
    w = v - np.floor(v)
    w = np.where(w >= 1.0 - _WRAP_SNAP, 0.0, w)
    return w


def _act_one(g: GroupElement, m: Material) -> Material:
    if isinstance(g, Permutation):
        if g.perm.shape[0] != m.n_atoms:
            raise DomainError("permutation size does not match atom count")
        inv = np.argsort(g.perm)
        return Material(m.rho, m.x[inv], m.z[inv], m.ident)
    if isinstance(g, Orthogonal):
        # each generator row is rotated as a physical vector
        return Material(m.rho @ g.g.T, m.x, m.z, m.ident)
    if isinstance(g, Translation):
        shift = g.v @ np.linalg.inv(m.rho)
        return Material(m.rho, wrap_frac(m.x + shift), m.z, m.ident)
    if isinstance(g, SLZ):
        # rows mix by inv(g).T so that the spanned point cloud is unchanged:
        # new rows generate the same lattice and x transforms as a column
        # vector under g (validated by the cloud-invariance suite)
        gf = g.g.astype(np.float64)
        u = np.linalg.inv(gf).T
        return Material(u @ m.rho, wrap_frac(m.x @ gf.T), m.z, m.ident)
    if isinstance(g, Composite):
        for member in g.members:
            m = _act_one(member, m)
        return m
    raise DomainError(f"unknown group element {type(g).__name__}")


def act(g: GroupElement, m: Material) -> Material:
    """Apply a group element to a material; the point cloud it spans is
    preserved (permutation, orthogonal, lattice re-basing) or rigidly
    moved (translation, orthogonal)."""
    return _act_one(g, m)


def slz_rho_action(g: SLZ, rho: np.ndarray) -> np.ndarray:
    """How a lattice re-basing transforms a stored (row-generator) lattice."""
    return np.linalg.inv(g.g.astype(np.float64)).T @ np.asarray(rho, dtype=np.float64)


# ---------------------------------------------------------------------------
# Point cloud expansion
# ---------------------------------------------------------------------------


def supercell_bound(rho: np.ndarray, radius: float) -> np.ndarray:
    """Per-axis image bound: every fractional point of the ball of the given
    radius has |tau_k| <= radius * |row_k(inv(rho).T)| + 1."""
    rinv_rows = np.linalg.norm(np.linalg.inv(rho), axis=0)  # rows of inv(rho).T
    return np.ceil(radius * rinv_rows).astype(np.int64) + 1


def expand_cloud(m: Material, radius: float):
    """All periodic images within ``radius`` of the cell origin.

    Returns a list of (position (3,), atomic number) ordered by
    (atom index, tau lexicographic).
    """
    if radius <= 0:
        raise DomainError("radius must be positive")
    tmax = supercell_bound(m.rho, radius)
    ax = [np.arange(-t, t + 1, dtype=np.int64) for t in tmax]
    grid = np.meshgrid(*ax, indexing="ij")
    taus = np.stack([a.ravel() for a in grid], axis=1)
    out = []
    for i in range(m.n_atoms):
        pos = (m.x[i] + taus) @ m.rho
        keep = np.linalg.norm(pos, axis=1) <= radius
        for p, t in zip(pos[keep], taus[keep]):
            out.append((p, int(m.z[i])))
    return out


# ---------------------------------------------------------------------------
# Lattice descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeParams:
    """Cell lengths (A) and angles (degrees)."""

    a: float
    b: float
    c: float
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise DomainError("lengths must be positive")
        for ang in (self.alpha, self.beta, self.gamma):
            if not 0.0 < ang < 180.0:
                raise DomainError("angles must lie in (0, 180) degrees")

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.alpha, self.beta, self.gamma])


def metric_tensor(rho) -> np.ndarray:
    """Gram matrix of the generators (row convention: rho @ rho.T).

    Invariant under orthogonal maps of physical space.
    """
    rho = _as_matrix(rho)
    return rho @ rho.T


def _angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    cross = np.linalg.norm(np.cross(u, v))
    return float(np.degrees(np.arctan2(cross, float(u @ v))))


def lattice_params(rho) -> LatticeParams:
    """Generator lengths and the three inter-generator angles."""
    rho = _as_matrix(rho)
    if abs(np.linalg.det(rho)) < 1e-12:
        raise DomainError("degenerate lattice")
    a, b, c = (float(np.linalg.norm(rho[i])) for i in range(3))
    alpha = _angle_deg(rho[1], rho[2])
    beta = _angle_deg(rho[0], rho[2])
    gamma = _angle_deg(rho[0], rho[1])
    return LatticeParams(a, b, c, alpha, beta, gamma)


def params_to_lattice(p: LatticeParams) -> np.ndarray:
    """Canonical lower-triangular cell with the given parameters."""
    al, be, ga = np.radians([p.alpha, p.beta, p.gamma])
    ca, cb, cg, sg = np.cos(al), np.cos(be), np.cos(ga), np.sin(ga)
    cx = p.c * cb
    cy = p.c * (ca - cb * cg) / sg
    cz2 = p.c * p.c - cx * cx - cy * cy
    if cz2 <= 0:
        raise DomainError("angles do not describe a 3d cell")
    return np.array(
        [
            [p.a, 0.0, 0.0],
            [p.b * cg, p.b * sg, 0.0],
            [cx, cy, np.sqrt(cz2)],
        ]
    )


# ---------------------------------------------------------------------------
# Matrix exponential and random deformations
# ---------------------------------------------------------------------------

_EXPM_ORDER = 12


def expm(a) -> np.ndarray:
    """Matrix exponential of a 3x3 matrix by scaling and squaring.

    Squaring depth max(0, ceil(log2(||A||_1)) + 4) with a 12-term Taylor
    series; cost is irrelevant at this size, accuracy is ~1e-15 relative
    for ||A|| <= 5.
    """
    a = _as_matrix(a)
    if not np.all(np.isfinite(a)):
        raise DomainError("expm requires finite entries")
    norm1 = float(np.max(np.abs(a).sum(axis=0)))
    s = 0 if norm1 == 0.0 else max(0, int(np.ceil(np.log2(norm1))) + 4)
    b = a / (2.0**s)
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, _EXPM_ORDER + 1):
        term = term @ b / k
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def random_deformation(rho, sigma: float, rng: np.random.Generator):
    """Draw A with i.i.d. N(0, sigma) entries and deform physical space by
    exp(A): returns (rho @ expm(A).T, A).

    sigma = 0 returns the lattice unchanged with A = 0.  Deterministic for
    a given generator state.
    """
    if sigma < 0:
        raise DomainError("sigma must be non-negative")
    rho = _as_matrix(rho)
    a = sigma * rng.standard_normal((3, 3))
    if sigma == 0:
        return rho.copy(), a
    return rho @ expm(a).T, a
