"""Randomised property suites behind the ``check`` CLI command.

Each suite draws deterministic instances from (seed, trial) pairs and
verifies one family of invariants: group-action algebra, point-cloud
invariance, graph topology/geometry invariance, generator equivariance,
finite-difference agreement of all gradients, full-model equivariance
and loss invariance.  A failing trial is reported with its (seed, trial)
pair so the exact instance can be replayed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import tape
from .core import (
    Material,
    Orthogonal,
    Permutation,
    SLZ,
    Translation,
    act,
    expand_cloud,
    expm,
    metric_tensor,
    slz_rho_action,
    wrap_frac,
)
from .fields import FieldSpec, FIELD_NAMES, field_generators, grad_area, grad_r, grad_theta
from .graph import KNN, build_graph, edge_geometry, triplet_geometry
from .net import (
    ModelConfig,
    assemble_batch,
    batch_forward,
    init_parameters,
    model_batch_forward,
    with_normalizer,
)
from .train import LOSS_NAMES, Normalizer, PARAM_MAE, RHO_RIEMANN, loss, loss_value


@dataclass
class SuiteResult:
    name: str
    trials: int
    max_err: float = 0.0
    failures: List[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def _rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([seed, trial])


def random_material(rng: np.random.Generator, n: Optional[int] = None) -> Material:
    n = int(rng.integers(2, 7)) if n is None else n
    while True:
        rho = rng.uniform(2.0, 6.0) * (np.eye(3) + 0.3 * rng.standard_normal((3, 3)))
        if abs(np.linalg.det(rho)) > 0.5:
            break
    x = wrap_frac(rng.random((n, 3)))
    z = rng.choice([1, 6, 8, 14, 26], size=n)
    return Material(rho, x, z)


def random_orthogonal(rng: np.random.Generator) -> Orthogonal:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if rng.random() < 0.5:  # include reflections
        q = q @ np.diag([1.0, 1.0, -1.0])
    return Orthogonal(q)


def random_slz(rng: np.random.Generator, n_shears: int = 4) -> SLZ:
    g = np.eye(3, dtype=np.int64)
    for _ in range(n_shears):
        i, j = rng.permutation(3)[:2]
        shear = np.eye(3, dtype=np.int64)
        shear[i, j] = rng.integers(-2, 3)
        g = g @ shear
    return SLZ(g)


def _fail(res: SuiteResult, seed: int, trial: int, err: float, what: str):
    res.failures.append({"suite": res.name, "seed": seed, "trial": trial,
                         "error": err, "what": what})


def _record(res: SuiteResult, seed, trial, err, tol, what):
    res.max_err = max(res.max_err, err)
    if not err <= tol:
        _fail(res, seed, trial, err, what)


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def suite_group_actions(seed: int, trials: int) -> SuiteResult:
    """Wrap algebra, action/composition laws and pairwise commutativity."""
    res = SuiteResult("group-actions", trials)
    for t in range(trials):
        rng = _rng(seed, t)
        a = 20.0 * rng.standard_normal(3)
        b = 20.0 * rng.standard_normal(3)
        err = np.abs(wrap_frac(wrap_frac(a) + b) - wrap_frac(a + b)).max()
        err = min(err, 1.0 - err)  # 0 and 1-eps are the same torus point
        _record(res, seed, t, err, 1e-10, "wrap(wrap(a)+b) = wrap(a+b)")

        gi = random_slz(rng).g
        err = np.abs(wrap_frac(gi @ wrap_frac(a)) - wrap_frac(gi @ a)).max()
        err = min(err, 1.0 - err)
        _record(res, seed, t, err, 1e-10, "wrap(g wrap(x)) = wrap(g x)")

        m = random_material(rng)
        q1, q2 = random_orthogonal(rng), random_orthogonal(rng)
        lhs = act(q1, act(q2, m))
        rhs = act(Orthogonal(q1.g @ q2.g), m)
        _record(res, seed, t, _mat_err(lhs, rhs), 1e-10, "O(3) composition")

        g1, g2 = random_slz(rng), random_slz(rng)
        lhs = act(g1, act(g2, m))
        rhs = act(SLZ(g1.g @ g2.g), m)
        _record(res, seed, t, _mat_err(lhs, rhs), 1e-10, "SLZ composition")

        # commutativity across the three factor groups Euc(3), S_n, SL3(Z);
        # rotations and translations live in the same (semidirect) factor
        # and do not commute with each other
        v = Translation(3.0 * rng.standard_normal(3))
        p = Permutation(rng.permutation(m.n_atoms))
        euc = [q1, v]
        others = [g1, p]
        pairs = [(e, o) for e in euc for o in others] + [(g1, p)]
        for left, right in pairs:
            lhs = act(left, act(right, m))
            rhs = act(right, act(left, m))
            _record(res, seed, t, _mat_err(lhs, rhs), 1e-10,
                    f"commute {type(left).__name__}/{type(right).__name__}")

        # identity actions and metric-tensor transformation rules
        ident = act(Orthogonal(np.eye(3)), m)
        _record(res, seed, t, _mat_err(ident, m), 0.0, "identity action")
        f0 = metric_tensor(m.rho)
        _record(res, seed, t,
                np.abs(metric_tensor(act(q1, m).rho) - f0).max(), 1e-9,
                "metric tensor O(3) invariance")
        gf = np.linalg.inv(g1.g.astype(float))
        exp_f = gf.T @ f0 @ gf
        _record(res, seed, t,
                np.abs(metric_tensor(act(g1, m).rho) - exp_f).max(), 1e-8,
                "metric tensor SLZ equivariance")
    return res


def _mat_err(a: Material, b: Material) -> float:
    dx = np.abs(a.x - b.x)
    dx = np.minimum(dx, 1.0 - dx).max() if dx.size else 0.0
    return max(float(np.abs(a.rho - b.rho).max()), float(dx),
               float(np.abs(a.z - b.z).max()))


def _cloud_key(cloud, digits=9):
    return sorted((tuple(np.round(p, digits)), z) for p, z in cloud)


def suite_cloud_invariance(seed: int, trials: int) -> SuiteResult:
    """expand_cloud is SLZ/translation-invariant as a set and O(3)-equivariant."""
    res = SuiteResult("cloud-invariance", trials)
    for t in range(trials):
        rng = _rng(seed, t)
        m = random_material(rng, n=int(rng.integers(1, 4)))
        radius = rng.uniform(4.0, 7.0)
        base = expand_cloud(m, radius)
        g = random_slz(rng)
        moved = expand_cloud(act(g, m), radius)
        err = 0.0 if _cloud_key(base) == _cloud_key(moved) else 1.0
        _record(res, seed, t, err, 1e-9, "cloud SLZ invariance")

        q = random_orthogonal(rng)
        rotated = expand_cloud(act(q, m), radius)
        expected = sorted(
            (tuple(np.round(p @ q.g.T, 9)), z) for p, z in base
        )
        err = 0.0 if expected == _cloud_key(rotated) else 1.0
        _record(res, seed, t, err, 1e-9, "cloud O(3) equivariance")
    return res


def _graph_edge_set(g):
    return {(int(i), int(j), int(a), int(b), int(c))
            for i, j, (a, b, c) in zip(g.src, g.dst, g.tau)}


def suite_graph_invariance(seed: int, trials: int) -> SuiteResult:
    """Edge sets map bijectively and r/theta/area are invariant under G."""
    res = SuiteResult("graph-invariance", trials)
    for t in range(trials):
        rng = _rng(seed, t)
        m = random_material(rng)
        g0 = build_graph(m, KNN(6))
        eg0 = edge_geometry(g0, m)
        tg0 = triplet_geometry(g0, m, eg=eg0)
        inv0 = _sorted_invariants(g0, eg0, tg0)

        for elem, name in [
            (random_orthogonal(rng), "O(3)"),
            (random_slz(rng), "SLZ"),
            (Translation(3.0 * rng.standard_normal(3)), "translation"),
            (Permutation(rng.permutation(m.n_atoms)), "permutation"),
        ]:
            ma = act(elem, m)
            ga = build_graph(ma, KNN(6))
            err = 0.0 if ga.n_edges == g0.n_edges else 1.0
            _record(res, seed, t, err, 0.0, f"edge count under {name}")
            ega = edge_geometry(ga, ma)
            tga = triplet_geometry(ga, ma, eg=ega)
            inva = _sorted_invariants(ga, ega, tga)
            _record(res, seed, t, _invariant_err(inv0, inva), 1e-10,
                    f"r/theta/area invariance under {name}")

        # exact tau bijection under the lattice re-basing
        g = random_slz(rng)
        ma = act(g, m)
        ga = build_graph(ma, KNN(6))
        gf = g.g.astype(np.int64)
        shift = np.round(m.x @ gf.T.astype(float) - ma.x).astype(np.int64)
        mapped = {
            (int(i), int(j), *(tau @ gf.T + shift[j] - shift[i]).tolist())
            for i, j, tau in zip(g0.src, g0.dst, g0.tau)
        }
        err = 0.0 if mapped == _graph_edge_set(ga) else 1.0
        _record(res, seed, t, err, 0.0, "SLZ tau bijection")
    return res


def _sorted_invariants(g, eg, tg):
    order = np.lexsort((g.tau[:, 2], g.tau[:, 1], g.tau[:, 0], g.dst, g.src))
    r = np.sort(eg.r)
    theta = np.sort(tg.theta)
    area = np.sort(tg.area)
    del order
    return r, theta, area


def _invariant_err(a, b) -> float:
    return max(
        float(np.abs(x - y).max()) if x.size else 0.0 for x, y in zip(a, b)
    )


def suite_lambda_equivariance(seed: int, trials: int) -> SuiteResult:
    """Generators conjugate under O(3) and are invariant under SLZ,
    translations and permutations (modulo the canonical edge bijection)."""
    res = SuiteResult("lambda-equivariance", trials)
    spec = FieldSpec(FIELD_NAMES)
    for t in range(trials):
        rng = _rng(seed, t)
        m = random_material(rng)
        g0 = build_graph(m, KNN(6))
        eg0 = edge_geometry(g0, m)
        tg0 = triplet_geometry(g0, m, eg=eg0)
        e0, t0 = field_generators(spec, g0, eg0, tg0)

        q = random_orthogonal(rng)
        ma = act(q, m)
        ga = build_graph(ma, KNN(6))
        ega = edge_geometry(ga, ma)
        tga = triplet_geometry(ga, ma, eg=ega)
        ea, ta = field_generators(spec, ga, ega, tga)
        # O(3) keeps (i, j, tau) fixed, so arrays align after canonical sort
        for (name, lam0), (_, lama) in zip(e0 + t0, ea + ta):
            expected = np.einsum("ab,ebc,dc->ead", q.g, lam0, q.g)
            err = float(np.abs(lama - expected).max()) if lam0.size else 0.0
            _record(res, seed, t, err, 1e-10, f"O(3) equivariance of {name}")

        gz = random_slz(rng)
        ms = act(gz, m)
        gs = build_graph(ms, KNN(6))
        egs = edge_geometry(gs, ms)
        tgs = triplet_geometry(gs, ms, eg=egs)
        es, ts = field_generators(spec, gs, egs, tgs)
        perm = _edge_bijection(g0, gs, m, ms, gz)
        if perm is None:
            _fail(res, seed, t, 1.0, "SLZ edge bijection not found")
            continue
        for (name, lam0), (_, lams) in zip(e0, es):
            err = float(np.abs(lams[perm] - lam0).max()) if lam0.size else 0.0
            _record(res, seed, t, err, 1e-10, f"SLZ invariance of {name}")
    return res


def _edge_bijection(g0, g1, m0, m1, gz):
    """Index map p with edge k of g0 corresponding to edge p[k] of g1."""
    gf = gz.g.astype(np.int64)
    shift = np.round(m0.x @ gf.T.astype(float) - m1.x).astype(np.int64)
    lookup = {
        (int(i), int(j), int(a), int(b), int(c)): k
        for k, (i, j, (a, b, c)) in enumerate(zip(g1.src, g1.dst, g1.tau))
    }
    perm = []
    for i, j, tau in zip(g0.src, g0.dst, g0.tau):
        key = (int(i), int(j), *(tau @ gf.T + shift[j] - shift[i]).tolist())
        if key not in lookup:
            return None
        perm.append(lookup[key])
    return np.array(perm)


def _fd_pairing(fn, rho, grad, rng, h=1e-5, n_dirs=4) -> float:
    """Worst relative error of <grad, d_rho> against central differences."""
    worst = 0.0
    for _ in range(n_dirs):
        d = rng.standard_normal((3, 3))
        fd = (fn(rho + h * d) - fn(rho - h * d)) / (2 * h)
        an = float((grad * d).sum())
        denom = max(abs(fd), abs(an), 1e-10)
        worst = max(worst, abs(fd - an) / denom)
    return worst


def suite_fd_gradients(seed: int, trials: int) -> SuiteResult:
    """grad_r / grad_theta / grad_area and model parameter gradients agree
    with central finite differences."""
    res = SuiteResult("fd-gradients", trials)
    for t in range(trials):
        rng = _rng(seed, t)
        m = random_material(rng)
        g = build_graph(m, KNN(6))
        eg = edge_geometry(g, m)
        tg = triplet_geometry(g, m, eg=eg)

        k = int(rng.integers(0, g.n_edges))
        gr = grad_r(eg)[k]
        e_k = eg.e[k]
        err = _fd_pairing(
            lambda rho: float(np.linalg.norm(e_k @ rho)), m.rho, gr, rng
        )
        _record(res, seed, t, err, 1e-6, "grad_r FD")

        ok = np.nonzero(~tg.collinear)[0]
        if ok.size:
            j = int(ok[int(rng.integers(0, ok.size))])
            a_idx, b_idx = int(g.t_first[j]), int(g.t_second[j])
            ga = _one_edge(eg, a_idx)
            gb = _one_edge(eg, b_idx)
            tj = _one_triplet(tg, j)
            e1, e2 = eg.e[a_idx], eg.e[b_idx]

            def theta_of(rho):
                v1, v2 = e1 @ rho, e2 @ rho
                return float(np.arctan2(np.linalg.norm(np.cross(v1, v2)),
                                        v1 @ v2))

            err = _fd_pairing(lambda rho: theta_of(rho), m.rho,
                              grad_theta(ga, gb, tj)[0], rng)
            _record(res, seed, t, err, 1e-6, "grad_theta FD")

            def area_of(rho):
                return 0.5 * float(
                    np.linalg.norm(np.cross(e1 @ rho, e2 @ rho))
                )

            err = _fd_pairing(lambda rho: area_of(rho), m.rho,
                              grad_area(ga, gb, tj)[0], rng)
            _record(res, seed, t, err, 1e-6, "grad_area FD")
    return res


def _one_edge(eg, k):
    from .graph import EdgeGeometry

    return EdgeGeometry(e=eg.e[k : k + 1], v=eg.v[k : k + 1],
                        r=eg.r[k : k + 1], u=eg.u[k : k + 1])


def _one_triplet(tg, k):
    from .graph import TripletGeometry

    return TripletGeometry(theta=tg.theta[k : k + 1], area=tg.area[k : k + 1],
                           omega=tg.omega[k : k + 1],
                           collinear=tg.collinear[k : k + 1])


def model_fd_check(seed: int, n_materials: int = 2, h: float = 1e-5,
                   n_checks: int = 10, fields=None) -> float:
    """Worst relative FD error of the tape gradient over random parameter
    directions of a small fixed model."""
    rng = np.random.default_rng(seed)
    mats = [random_material(rng, n=3) for _ in range(n_materials)]
    cfg = ModelConfig(
        feature_dim=8, rbf_bins=4, rbf_delta=1.5, n_plain_layers=1,
        n_deform_layers=1, knn_k=6,
        fields=FieldSpec(fields or FIELD_NAMES),
    )
    params = init_parameters(cfg, seed=seed)
    for name, p in params.items():
        if ".Wp" in name and ("edge[" in name or "trip[" in name):
            p.data = 0.2 * rng.standard_normal(p.data.shape)
    norm = Normalizer.fit(mats)
    cfg = with_normalizer(cfg, norm.mean, norm.std)
    batch = assemble_batch(mats, knn_k=cfg.knn_k)
    target = np.stack([m.rho * 1.05 for m in mats])

    def loss_of():
        rho, _ = batch_forward(batch, cfg, params)
        return loss(PARAM_MAE, rho, target, norm)

    for p in params.values():
        p.grad = None
    loss_of().backward()
    names = [n for n, p in params.items() if p.grad is not None]
    worst = 0.0
    for i in range(n_checks):
        name = names[i % len(names)]
        p = params[name]
        d = rng.standard_normal(p.data.shape)
        an = float((p.grad * d).sum())
        orig = p.data.copy()
        p.data = orig + h * d
        lp = float(loss_of().data)
        p.data = orig - h * d
        lm = float(loss_of().data)
        p.data = orig
        fd = (lp - lm) / (2 * h)
        denom = max(abs(fd), abs(an), 1e-10)
        worst = max(worst, abs(fd - an) / denom)
    return worst


def suite_model_equivariance(seed: int, trials: int) -> SuiteResult:
    """Forward transforms covariantly; the feed-forward baseline is invariant."""
    res = SuiteResult("model-equivariance", trials)
    cfg = ModelConfig(
        feature_dim=12, rbf_bins=6, rbf_delta=1.2, n_plain_layers=2,
        n_deform_layers=2, knn_k=6, fields=FieldSpec(FIELD_NAMES),
    )
    params = init_parameters(cfg, seed=seed)
    rng0 = np.random.default_rng(seed)
    for name, p in params.items():
        if ".Wp" in name and ("edge[" in name or "trip[" in name):
            p.data = 0.25 * rng0.standard_normal(p.data.shape)
    cfg_ff = ModelConfig(
        feature_dim=12, rbf_bins=6, rbf_delta=1.2, n_plain_layers=2,
        knn_k=6, model="ff",
    )
    cfg_ff = with_normalizer(cfg_ff, [3, 3, 3, 1.5, 1.5, 1.5],
                             [1, 1, 1, 0.3, 0.3, 0.3])
    params_ff = init_parameters(cfg_ff, seed=seed + 1)

    for t in range(trials):
        rng = _rng(seed, t)
        m = random_material(rng)
        rho0 = _forward_rho(m, cfg, params)
        ff0 = _forward_rho(m, cfg_ff, params_ff)

        q = random_orthogonal(rng)
        err = np.abs(_forward_rho(act(q, m), cfg, params) - rho0 @ q.g.T).max()
        _record(res, seed, t, float(err), 1e-8, "forward O(3) equivariance")

        gz = random_slz(rng)
        err = np.abs(
            _forward_rho(act(gz, m), cfg, params) - slz_rho_action(gz, rho0)
        ).max()
        _record(res, seed, t, float(err), 1e-8, "forward SLZ relation")

        v = Translation(3.0 * rng.standard_normal(3))
        err = np.abs(_forward_rho(act(v, m), cfg, params) - rho0).max()
        _record(res, seed, t, float(err), 1e-8, "forward translation invariance")

        p = Permutation(rng.permutation(m.n_atoms))
        err = np.abs(_forward_rho(act(p, m), cfg, params) - rho0).max()
        _record(res, seed, t, float(err), 1e-8, "forward permutation invariance")

        for elem, name in [(q, "O(3)"), (gz, "SLZ"), (v, "translation"),
                           (p, "permutation")]:
            err = np.abs(_forward_rho(act(elem, m), cfg_ff, params_ff) - ff0).max()
            _record(res, seed, t, float(err), 1e-8, f"baseline invariance {name}")
    return res


def _forward_rho(m, cfg, params):
    batch = assemble_batch([m], knn_k=cfg.knn_k)
    return model_batch_forward(batch, cfg, params).data[0]


def suite_loss_invariance(seed: int, trials: int) -> SuiteResult:
    """All losses O(3)-invariant in either argument; zero at equal inputs
    (except the verbatim trace form); SLZ changes param-mae."""
    res = SuiteResult("loss-invariance", trials)
    norm = Normalizer(mean=np.array([4, 4, 4, 1.5, 1.5, 1.5], dtype=float),
                      std=np.array([1, 1, 1, 0.3, 0.3, 0.3], dtype=float))
    slz_hit = False
    for t in range(trials):
        rng = _rng(seed, t)
        m = random_material(rng)
        pred = m.rho @ expm(0.1 * rng.standard_normal((3, 3))).T
        target = m.rho
        q = random_orthogonal(rng).g
        for name in LOSS_NAMES:
            base = loss_value(name, pred, target, norm)
            err = abs(loss_value(name, pred @ q.T, target, norm) - base)
            err = max(err, abs(loss_value(name, pred, target @ q.T, norm) - base))
            scale = max(abs(base), 1.0)
            _record(res, seed, t, err / scale, 1e-10, f"{name} O(3) invariance")
            if name != RHO_RIEMANN:
                zero = loss_value(name, target, target, norm)
                _record(res, seed, t, abs(zero), 1e-12, f"{name} zero at equal")
        gz = random_slz(rng)
        if np.abs(gz.g - np.eye(3)).max() > 0:
            moved = slz_rho_action(gz, pred)
            if abs(loss_value(PARAM_MAE, moved, target, norm)
                   - loss_value(PARAM_MAE, pred, target, norm)) > 1e-6:
                slz_hit = True
    if not slz_hit:
        _fail(res, seed, -1, 1.0, "no SLZ counterexample for param-mae found")
    return res


SUITES: Dict[str, Callable[[int, int], SuiteResult]] = {
    "group-actions": suite_group_actions,
    "cloud-invariance": suite_cloud_invariance,
    "graph-invariance": suite_graph_invariance,
    "lambda-equivariance": suite_lambda_equivariance,
    "fd-gradients": suite_fd_gradients,
    "model-equivariance": suite_model_equivariance,
    "loss-invariance": suite_loss_invariance,
}

_DEFAULT_TRIALS = {
    "group-actions": 60,
    "cloud-invariance": 15,
    "graph-invariance": 20,
    "lambda-equivariance": 20,
    "fd-gradients": 40,
    "model-equivariance": 8,
    "loss-invariance": 20,
}


def run_suites(names=None, seed: int = 0, trials: Optional[int] = None):
    """Run the requested suites (all by default); returns the result list
    plus an extra model-gradient FD summary folded into fd-gradients."""
    names = list(SUITES) if not names else list(names)
    results = []
    for name in names:
        if name not in SUITES:
            raise KeyError(name)
        n = trials if trials is not None else _DEFAULT_TRIALS[name]
        result = SUITES[name](seed, n)
        if name == "fd-gradients":
            worst = model_fd_check(seed)
            result.max_err = max(result.max_err, worst)
            if worst > 1e-4:
                _fail(result, seed, -1, worst, "model parameter FD")
        results.append(result)
    return results
