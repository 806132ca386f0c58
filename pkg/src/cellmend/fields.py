"""Vector fields attached to edges and triplets: 3x3 lattice-deformation
generators built from ket-bra outer products or from gradients of the
invariant geometry (edge length, angle, triangle area).

Two related objects live here and differ by the lattice parametrisation
they differentiate against:

* ``grad_r`` / ``grad_theta`` / ``grad_area`` are coordinate gradients of
  the stored (row-generator) lattice: pairing ``sum(G * d_rho)`` gives the
  first-order change of the quantity.  These carry the finite-difference
  contract used by the gradient test suites.

* ``field_generators`` produces the deformation generators consumed by the
  network update ``rho' = (I + k * sum w * gen) . rho`` (generators act on
  physical space, on the left in the column picture).  For the gradient
  families this is the derivative with respect to A in ``exp(A) . rho`` at
  A = 0, i.e. the coordinate gradient composed with rho^T.  Written out in
  physical vectors the generators depend only on v, u and omega, which is
  what makes them transform as g . gen . g^T under orthogonal maps and stay
  fixed under lattice re-basing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import DomainError
from .graph import EdgeGeometry, PeriodicGraph, TripletGeometry

EDGE_KETBRA = "edge-ketbra"
EDGE_GRAD_R = "edge-grad-r"
TRIPLET_KETBRA_DIAG = "triplet-ketbra-diag"
TRIPLET_KETBRA_CROSS = "triplet-ketbra-cross"
TRIPLET_KETBRA_CROSS_SYM = "triplet-ketbra-cross-sym"
TRIPLET_GRAD_R = "triplet-grad-r"
TRIPLET_GRAD_THETA = "triplet-grad-theta"
TRIPLET_GRAD_AREA = "triplet-grad-area"

FIELD_NAMES = (
    EDGE_KETBRA,
    TRIPLET_KETBRA_DIAG,
    TRIPLET_KETBRA_CROSS,
    TRIPLET_KETBRA_CROSS_SYM,
    EDGE_GRAD_R,
    TRIPLET_GRAD_R,
    TRIPLET_GRAD_THETA,
    TRIPLET_GRAD_AREA,
)

_EDGE_FIELDS = {EDGE_KETBRA, EDGE_GRAD_R}

#: members that expand to more than one weighted generator family
_EXPANSION = {TRIPLET_GRAD_R: (TRIPLET_GRAD_R + ":first", TRIPLET_GRAD_R + ":second")}


@dataclass(frozen=True)
class FieldSpec:
    """Which generator families act on the lattice, plus the symmetrize flag.

    ``members`` uses the config-file names (see FIELD_NAMES); each member is
    tagged grade 1 (per edge) or grade 2 (per triplet) by its name.
    """

    members: Tuple[str, ...]
    symmetrize: bool = False

    def __init__(self, members: Sequence[str], symmetrize: bool = False):
        members = tuple(members)
        if not members:
            raise DomainError("field spec needs at least one member")
        for name in members:
            if name not in FIELD_NAMES:
                raise DomainError(
                    f"unknown field {name!r}; valid: {', '.join(FIELD_NAMES)}"
                )
        if len(set(members)) != len(members):
            raise DomainError("duplicate field members")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "symmetrize", bool(symmetrize))

    @property
    def edge_fields(self) -> Tuple[str, ...]:
        return tuple(m for m in self.members if m in _EDGE_FIELDS)

    @property
    def triplet_fields(self) -> Tuple[str, ...]:
        """Grade-2 members expanded to one name per weighted generator."""
        out = []
        for m in self.members:
            if m in _EDGE_FIELDS:
                continue
            out.extend(_EXPANSION.get(m, (m,)))
        return tuple(out)

    def to_json_dict(self) -> dict:
        return {"fields": list(self.members), "symmetrize": self.symmetrize}

    @staticmethod
    def from_json_dict(d: dict) -> "FieldSpec":
        return FieldSpec(d["fields"], bool(d.get("symmetrize", False)))


def ketbra(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Outer product |u><w| = u w^T of unit vectors (rank 1)."""
    u = np.asarray(u, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    for vec in (u, w):
        if abs(np.linalg.norm(vec, axis=-1) - 1.0).max() > 1e-9:
            raise DomainError("ketbra expects unit vectors")
    return _outer(u, w)


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., :, None] * b[..., None, :]


# ---------------------------------------------------------------------------
# Coordinate gradients (finite-difference contract on the stored lattice)
# ---------------------------------------------------------------------------


def grad_r(geom: EdgeGeometry) -> np.ndarray:
    """d r / d rho: pairing with a stored-lattice perturbation gives dr.

    Rank-1: outer(e, u) in the row convention.
    """
    return _outer(geom.e, geom.u)


def _gather(geom: EdgeGeometry, idx: np.ndarray) -> EdgeGeometry:
    return EdgeGeometry(
        e=geom.e[idx], v=geom.v[idx], r=geom.r[idx], u=geom.u[idx]
    )


def _theta_pieces(geom_a: EdgeGeometry, geom_b: EdgeGeometry):
    v1, v2 = geom_a.v, geom_b.v
    cross = np.cross(v1, v2)
    s = np.linalg.norm(cross, axis=-1)
    c = np.einsum("...k,...k->...", v1, v2)
    return v1, v2, cross, s, c


def grad_theta(
    geom_a: EdgeGeometry, geom_b: EdgeGeometry, trip: TripletGeometry
) -> np.ndarray:
    """d theta / d rho for the angle between the two edge vectors.

    Derived by differentiating theta = atan2(|v1 x v2|, v1 . v2); the
    middle point is held fixed.  Collinear triplets are an error here
    (callers that tolerate them mask instead).
    """
    if np.any(trip.collinear):
        raise DomainError("angle gradient undefined for collinear triplets")
    v1, v2, cross, s, c = _theta_pieces(geom_a, geom_b)
    omega = cross / s[..., None]
    denom = (geom_a.r * geom_b.r) ** 2
    ga = np.cross(v2, omega)  # pairs with d v1
    gb = np.cross(omega, v1)  # pairs with d v2
    num = c[..., None, None] * (
        _outer(geom_a.e, ga) + _outer(geom_b.e, gb)
    ) - s[..., None, None] * (_outer(geom_a.e, v2) + _outer(geom_b.e, v1))
    return num / denom[..., None, None]


def grad_area(
    geom_a: EdgeGeometry, geom_b: EdgeGeometry, trip: TripletGeometry
) -> np.ndarray:
    """d area / d rho for the triangle spanned by the two edge vectors."""
    if np.any(trip.collinear):
        raise DomainError("area gradient undefined for zero-area triplets")
    v1, v2, cross, s, _ = _theta_pieces(geom_a, geom_b)
    omega = cross / s[..., None]
    return 0.5 * (_outer(geom_a.e, np.cross(v2, omega)) + _outer(geom_b.e, np.cross(omega, v1)))


# ---------------------------------------------------------------------------
# Deformation generators (reference implementation of the model's fields)
# ---------------------------------------------------------------------------


def _triplet_generator(
    name: str,
    g1: EdgeGeometry,
    g2: EdgeGeometry,
    mask: np.ndarray,
) -> np.ndarray:
    """One grade-2 generator family, collinear rows already zero-masked."""
    if name == TRIPLET_KETBRA_DIAG:
        return _outer(g1.u, g1.u)
    if name == TRIPLET_KETBRA_CROSS:
        return _outer(g1.u, g2.u)
    if name == TRIPLET_KETBRA_CROSS_SYM:
        return _outer(g1.u, g2.u) + _outer(g2.u, g1.u)
    if name == TRIPLET_GRAD_R + ":first":
        return _outer(g1.u, g1.v)
    if name == TRIPLET_GRAD_R + ":second":
        return _outer(g2.u, g2.v)

    v1, v2, cross, s, c = _theta_pieces(g1, g2)
    safe = np.where(mask, 1.0, s)
    omega = np.where(mask[..., None], 0.0, cross / safe[..., None])
    ga = np.cross(v2, omega)
    gb = np.cross(omega, v1)
    if name == TRIPLET_GRAD_AREA:
        return 0.5 * (_outer(ga, v1) + _outer(gb, v2))
    if name == TRIPLET_GRAD_THETA:
        num = c[..., None, None] * (_outer(ga, v1) + _outer(gb, v2)) - s[
            ..., None, None
        ] * (_outer(v2, v1) + _outer(v1, v2))
        denom = (g1.r * g2.r) ** 2
        out = num / denom[..., None, None]
        return np.where(mask[..., None, None], 0.0, out)
    raise DomainError(f"unknown triplet field {name!r}")


def field_generators(
    spec: FieldSpec,
    graph: PeriodicGraph,
    eg: EdgeGeometry,
    tg: Optional[TripletGeometry] = None,
):
    """Evaluate every member of the spec on its grade.

    Returns (edge_gens, triplet_gens): lists of (name, array) with arrays
    of shape (E, 3, 3) and (T, 3, 3) in canonical graph order.  Collinear
    triplets contribute the zero generator.  With ``symmetrize`` every
    output is replaced by its symmetric part.
    """
    edge_gens = []
    for name in spec.edge_fields:
        if name == EDGE_KETBRA:
            gen = _outer(eg.u, eg.u)
        else:
            gen = _outer(eg.u, eg.v)
        edge_gens.append((name, gen))

    triplet_gens = []
    trip_names = spec.triplet_fields
    if trip_names:
        g1 = _gather(eg, graph.t_first)
        g2 = _gather(eg, graph.t_second)
        if tg is None:
            raise DomainError("triplet geometry required for grade-2 fields")
        for name in trip_names:
            gen = _triplet_generator(name, g1, g2, tg.collinear)
            triplet_gens.append((name, gen))

    if spec.symmetrize:
        edge_gens = [(n, 0.5 * (g + np.swapaxes(g, -1, -2))) for n, g in edge_gens]
        triplet_gens = [
            (n, 0.5 * (g + np.swapaxes(g, -1, -2))) for n, g in triplet_gens
        ]
    return edge_gens, triplet_gens
