"""Vector-field generators and invariant-geometry gradients, validated by
central finite differences and group transformations."""

import numpy as np
import pytest

from cellmend.core import DomainError, Material, Orthogonal, SLZ, act
from cellmend.fields import (
    FIELD_NAMES,
    FieldSpec,
    field_generators,
    grad_area,
    grad_r,
    grad_theta,
    ketbra,
)
from cellmend.graph import KNN, Cutoff, build_graph, edge_geometry, triplet_geometry

from test_core import random_material, random_orthogonal, random_slz


def fd_pairing(fn, rho, grad, rng, h=1e-5, n_dirs=10, tol=1e-6):
    """Check <grad, d> against (fn(rho+h d) - fn(rho-h d)) / 2h."""
    for _ in range(n_dirs):
        d = rng.standard_normal((3, 3))
        fd = (fn(rho + h * d) - fn(rho - h * d)) / (2 * h)
        an = float((grad * d).sum())
        assert abs(fd - an) <= tol * max(abs(fd), abs(an), 1e-10)


def geometry_of(m, policy=None):
    g = build_graph(m, policy or KNN(6))
    eg = edge_geometry(g, m)
    tg = triplet_geometry(g, m, eg=eg)
    return g, eg, tg


def noncollinear_index(g, tg, rng):
    ok = np.nonzero(~tg.collinear)[0]
    return int(ok[rng.integers(0, ok.size)])


def slice_edge(eg, k):
    from cellmend.graph import EdgeGeometry

    return EdgeGeometry(e=eg.e[k : k + 1], v=eg.v[k : k + 1],
                        r=eg.r[k : k + 1], u=eg.u[k : k + 1])


def slice_triplet(tg, k):
    from cellmend.graph import TripletGeometry

    return TripletGeometry(theta=tg.theta[k : k + 1], area=tg.area[k : k + 1],
                           omega=tg.omega[k : k + 1],
                           collinear=tg.collinear[k : k + 1])


# ---------------------------------------------------------------------------
# FieldSpec
# ---------------------------------------------------------------------------


def test_field_spec_validation():
    with pytest.raises(DomainError):
        FieldSpec(())
    with pytest.raises(DomainError):
        FieldSpec(("no-such-field",))
    with pytest.raises(DomainError):
        FieldSpec(("edge-ketbra", "edge-ketbra"))


def test_field_spec_grades_and_expansion():
    spec = FieldSpec(("edge-ketbra", "triplet-grad-r", "edge-grad-r"))
    assert spec.edge_fields == ("edge-ketbra", "edge-grad-r")
    assert spec.triplet_fields == ("triplet-grad-r:first", "triplet-grad-r:second")


def test_field_spec_json_round_trip():
    spec = FieldSpec(("edge-ketbra", "triplet-grad-theta"), symmetrize=True)
    assert FieldSpec.from_json_dict(spec.to_json_dict()) == spec


# ---------------------------------------------------------------------------
# ketbra
# ---------------------------------------------------------------------------


def test_ketbra_examples():
    e1 = np.array([1.0, 0.0, 0.0])
    e2 = np.array([0.0, 1.0, 0.0])
    m = ketbra(e1, e1)
    assert m[0, 0] == 1.0 and np.abs(m).sum() == 1.0
    m = ketbra(e1, e2)
    assert m[0, 1] == 1.0 and np.abs(m).sum() == 1.0
    sym = ketbra(e1, e2) + ketbra(e2, e1)
    assert sym[0, 1] == 1.0 and sym[1, 0] == 1.0 and np.abs(sym).sum() == 2.0


def test_ketbra_requires_unit_vectors():
    with pytest.raises(DomainError):
        ketbra(np.array([2.0, 0, 0]), np.array([1.0, 0, 0]))


def test_ketbra_diagonal_is_psd_trace_one():
    rng = np.random.default_rng(40)
    for _ in range(20):
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        m = ketbra(u, u)
        assert abs(np.trace(m) - 1.0) < 1e-12
        assert np.min(np.linalg.eigvalsh(m)) > -1e-12


# ---------------------------------------------------------------------------
# coordinate gradients (finite-difference contract)
# ---------------------------------------------------------------------------


def test_grad_r_identity_axis_edge():
    m = Material(np.eye(3), [[0.0, 0.0, 0.0]], [1])
    g, eg, _ = geometry_of(m, Cutoff(1.1))
    k = [i for i in range(g.n_edges) if tuple(g.tau[i]) == (1, 0, 0)][0]
    grad = grad_r(eg)[k]
    expected = np.zeros((3, 3))
    expected[0, 0] = 1.0
    assert np.allclose(grad, expected)


def test_grad_r_scaled_lattice():
    m = Material(np.diag([2.0, 1.0, 1.0]), [[0.0, 0.0, 0.0]], [1])
    g, eg, _ = geometry_of(m, Cutoff(2.1))
    k = [i for i in range(g.n_edges) if tuple(g.tau[i]) == (1, 0, 0)][0]
    assert eg.r[k] == 2.0
    grad = grad_r(eg)[k]
    assert abs(grad[0, 0] - 1.0) < 1e-12  # scale-free in the e (x) u form
    e_k = eg.e[k]
    fd_pairing(lambda rho: float(np.linalg.norm(e_k @ rho)), m.rho, grad,
               np.random.default_rng(41))


def test_grad_r_random_triclinic_fd():
    rng = np.random.default_rng(42)
    for _ in range(20):
        m = random_material(rng)
        g, eg, _ = geometry_of(m)
        k = int(rng.integers(0, g.n_edges))
        e_k = eg.e[k]
        fd_pairing(lambda rho: float(np.linalg.norm(e_k @ rho)), m.rho,
                   grad_r(eg)[k], rng)


def theta_fn(e1, e2):
    def f(rho):
        v1, v2 = e1 @ rho, e2 @ rho
        return float(np.arctan2(np.linalg.norm(np.cross(v1, v2)), v1 @ v2))

    return f


def area_fn(e1, e2):
    def f(rho):
        return 0.5 * float(np.linalg.norm(np.cross(e1 @ rho, e2 @ rho)))

    return f


def test_grad_theta_orthogonal_pair_fd():
    m = Material(np.eye(3), [[0.0, 0.0, 0.0]], [1])
    g, eg, tg = geometry_of(m, Cutoff(1.1))
    i1 = [i for i in range(g.n_edges) if tuple(g.tau[i]) == (1, 0, 0)][0]
    i2 = [i for i in range(g.n_edges) if tuple(g.tau[i]) == (0, 1, 0)][0]
    t = [t for t in range(g.n_triplets)
         if g.t_first[t] == i1 and g.t_second[t] == i2][0]
    grad = grad_theta(slice_edge(eg, i1), slice_edge(eg, i2),
                      slice_triplet(tg, t))[0]
    fd_pairing(theta_fn(eg.e[i1], eg.e[i2]), m.rho, grad,
               np.random.default_rng(43))


def test_grad_theta_scale_invariance():
    rng = np.random.default_rng(44)
    for _ in range(20):
        m = random_material(rng)
        g, eg, tg = geometry_of(m)
        t = noncollinear_index(g, tg, rng)
        a, b = int(g.t_first[t]), int(g.t_second[t])
        grad = grad_theta(slice_edge(eg, a), slice_edge(eg, b),
                          slice_triplet(tg, t))[0]
        # theta is scale-invariant: pairing with the radial direction vanishes
        assert abs((grad * m.rho).sum()) < 1e-9


def test_grad_theta_random_fd():
    rng = np.random.default_rng(45)
    for _ in range(20):
        m = random_material(rng)
        g, eg, tg = geometry_of(m)
        t = noncollinear_index(g, tg, rng)
        a, b = int(g.t_first[t]), int(g.t_second[t])
        grad = grad_theta(slice_edge(eg, a), slice_edge(eg, b),
                          slice_triplet(tg, t))[0]
        fd_pairing(theta_fn(eg.e[a], eg.e[b]), m.rho, grad, rng)


def test_grad_theta_rejects_collinear():
    m = Material(np.eye(3), [[0.0, 0.0, 0.0]], [1])
    g, eg, tg = geometry_of(m, Cutoff(1.1))
    chain = [t for t in range(g.n_triplets)
             if tuple(g.tau[g.t_first[t]]) == (1, 0, 0)
             and tuple(g.tau[g.t_second[t]]) == (1, 0, 0)][0]
    a, b = int(g.t_first[chain]), int(g.t_second[chain])
    with pytest.raises(DomainError):
        grad_theta(slice_edge(eg, a), slice_edge(eg, b),
                   slice_triplet(tg, chain))


def test_grad_area_unit_pair_fd_and_euler():
    m = Material(np.eye(3), [[0.0, 0.0, 0.0]], [1])
    g, eg, tg = geometry_of(m, Cutoff(1.1))
    i1 = [i for i in range(g.n_edges) if tuple(g.tau[i]) == (1, 0, 0)][0]
    i2 = [i for i in range(g.n_edges) if tuple(g.tau[i]) == (0, 1, 0)][0]
    t = [t for t in range(g.n_triplets)
         if g.t_first[t] == i1 and g.t_second[t] == i2][0]
    assert abs(tg.area[t] - 0.5) < 1e-12
    grad = grad_area(slice_edge(eg, i1), slice_edge(eg, i2),
                     slice_triplet(tg, t))[0]
    fd_pairing(area_fn(eg.e[i1], eg.e[i2]), m.rho, grad,
               np.random.default_rng(46))
    # area is degree-2 homogeneous in rho
    assert abs((grad * m.rho).sum() - 2 * tg.area[t]) < 1e-8


def test_grad_area_random_fd():
    rng = np.random.default_rng(47)
    for _ in range(20):
        m = random_material(rng)
        g, eg, tg = geometry_of(m)
        t = noncollinear_index(g, tg, rng)
        a, b = int(g.t_first[t]), int(g.t_second[t])
        grad = grad_area(slice_edge(eg, a), slice_edge(eg, b),
                         slice_triplet(tg, t))[0]
        fd_pairing(area_fn(eg.e[a], eg.e[b]), m.rho, grad, rng)
        euler = (grad * m.rho).sum()
        assert abs(euler - 2 * tg.area[t]) < 1e-8


# ---------------------------------------------------------------------------
# generator families
# ---------------------------------------------------------------------------


def test_edge_ketbra_cubic_shell_sums_to_two_eye():
    m = Material(np.eye(3), [[0.0, 0.0, 0.0]], [1])
    g, eg, tg = geometry_of(m, Cutoff(1.1))
    gens, _ = field_generators(FieldSpec(("edge-ketbra",)), g, eg, tg)
    total = gens[0][1].sum(axis=0)
    assert np.allclose(total, 2.0 * np.eye(3))


def test_generator_shapes_and_masking():
    rng = np.random.default_rng(48)
    m = Material(np.eye(3), [[0.0, 0.0, 0.0]], [1])
    g, eg, tg = geometry_of(m, Cutoff(1.1))
    spec = FieldSpec(FIELD_NAMES)
    egen, tgen = field_generators(spec, g, eg, tg)
    # triplet-grad-r expands to first/second-edge generators: 5 + 2 entries
    assert len(egen) == 2 and len(tgen) == 7
    for name, lam in egen:
        assert lam.shape == (g.n_edges, 3, 3)
    for name, lam in tgen:
        assert lam.shape == (g.n_triplets, 3, 3)
        if name in ("triplet-grad-theta", "triplet-grad-area"):
            assert np.allclose(lam[tg.collinear], 0.0)
    del rng


def test_symmetrize_makes_outputs_symmetric():
    rng = np.random.default_rng(49)
    m = random_material(rng)
    g, eg, tg = geometry_of(m)
    egen, tgen = field_generators(FieldSpec(FIELD_NAMES, symmetrize=True),
                                  g, eg, tg)
    for _, lam in egen + tgen:
        assert np.abs(lam - np.swapaxes(lam, -1, -2)).max() < 1e-12


def test_generators_o3_equivariance():
    rng = np.random.default_rng(50)
    spec = FieldSpec(FIELD_NAMES)
    for _ in range(10):
        m = random_material(rng)
        q = random_orthogonal(rng)
        g0, eg0, tg0 = geometry_of(m)
        ga, ega, tga = geometry_of(act(Orthogonal(q), m))
        e0, t0 = field_generators(spec, g0, eg0, tg0)
        ea, ta = field_generators(spec, ga, ega, tga)
        for (name, lam0), (_, lama) in zip(e0 + t0, ea + ta):
            expected = np.einsum("ab,ebc,dc->ead", q, lam0, q)
            assert np.abs(lama - expected).max() < 1e-10, name


def test_generators_slz_invariance():
    rng = np.random.default_rng(51)
    spec = FieldSpec(FIELD_NAMES)
    for _ in range(10):
        m = random_material(rng)
        gz = SLZ(random_slz(rng))
        ma = act(gz, m)
        g0, eg0, tg0 = geometry_of(m)
        ga, ega, tga = geometry_of(ma)
        # canonical edge bijection under the re-basing
        gf = gz.g.astype(np.int64)
        shift = np.round(m.x @ gf.T.astype(float) - ma.x).astype(np.int64)
        lookup = {
            (int(i), int(j), int(a), int(b), int(c)): k
            for k, (i, j, (a, b, c)) in enumerate(zip(ga.src, ga.dst, ga.tau))
        }
        perm = np.array([
            lookup[(int(i), int(j), *(tau @ gf.T + shift[j] - shift[i]).tolist())]
            for i, j, tau in zip(g0.src, g0.dst, g0.tau)
        ])
        e0, _ = field_generators(spec, g0, eg0, tg0)
        ea, _ = field_generators(spec, ga, ega, tga)
        for (name, lam0), (_, lama) in zip(e0, ea):
            assert np.abs(lama[perm] - lam0).max() < 1e-10, name


def test_gradient_generators_match_coordinate_gradients():
    # generator = (coordinate gradient)^T . rho for the length family
    rng = np.random.default_rng(52)
    m = random_material(rng)
    g, eg, tg = geometry_of(m)
    egen, _ = field_generators(FieldSpec(("edge-grad-r",)), g, eg, tg)
    lam = egen[0][1]
    coord = grad_r(eg)
    expected = np.einsum("eba,bc->eac", coord, m.rho)
    assert np.abs(lam - expected).max() < 1e-10
