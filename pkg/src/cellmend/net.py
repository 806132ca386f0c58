"""The lattice-deformation network and its invariant feed-forward baseline.

Architecture: an embedding table, ``n_plain_layers`` message-passing
layers that only update node features, then ``n_deform_layers`` layers
that additionally predict scalar weights per edge/triplet and apply the
first-order lattice update

    rho^{l+1} = (I + k * (sum_e w_e gen_e / |E| + sum_t w_t gen_t / |T|)) . rho^l

with generators from :mod:`cellmend.fields` (here re-expressed as tape
operations so the whole pass is differentiable).  Topology is frozen from
the input lattice; geometry is recomputed from the current lattice at
every layer.

Everything runs on batches: materials are packed into one disjoint-union
graph with per-sample lattices, so a batch costs a single tape.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import tape
from .core import DomainError, Material
from .fields import (
    EDGE_KETBRA,
    TRIPLET_GRAD_AREA,
    TRIPLET_GRAD_R,
    TRIPLET_GRAD_THETA,
    TRIPLET_KETBRA_CROSS,
    TRIPLET_KETBRA_CROSS_SYM,
    TRIPLET_KETBRA_DIAG,
    FieldSpec,
)
from .graph import KNN, PeriodicGraph, build_graph
from .tape import Tensor

CHECKPOINT_VERSION = 1

#: cross-norm regulariser; exact to double precision away from collinearity
_NORM_FLOOR = 1e-30
_COLLINEAR_TOL = 1e-10

MODEL_DEFORM = "deform"
MODEL_FF = "ff"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters (defaults follow the reference setup:
    feature size 128, 6 plain + 4 deformation layers, KNN-8 graphs)."""

    feature_dim: int = 128
    rbf_bins: int = 16
    rbf_delta: float = 0.5
    n_plain_layers: int = 6
    n_deform_layers: int = 4
    knn_k: int = 8
    fields: FieldSpec = field(default_factory=lambda: FieldSpec((EDGE_KETBRA,)))
    weight_limit: Optional[float] = None  # None: unbounded; else scaled sigmoid
    deformation_step: float = 1.0
    max_atomic_number: int = 100
    model: str = MODEL_DEFORM
    ff_head_layers: int = 5
    param_mean: Optional[Tuple[float, ...]] = None  # lattice-parameter stats
    param_std: Optional[Tuple[float, ...]] = None  # (lengths A, angles rad)

    def __post_init__(self):
        for name in ("feature_dim", "rbf_bins", "n_plain_layers", "knn_k",
                     "ff_head_layers"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be at least 1")
        if self.n_deform_layers < 0:
            raise DomainError("n_deform_layers must be non-negative")
        if self.rbf_delta <= 0:
            raise DomainError("rbf_delta must be positive")
        if self.weight_limit is not None and self.weight_limit <= 0:
            raise DomainError("weight_limit must be positive")
        if self.model not in (MODEL_DEFORM, MODEL_FF):
            raise DomainError(f"unknown model kind {self.model!r}")

    @property
    def n_layers(self) -> int:
        return self.n_plain_layers + (
            self.n_deform_layers if self.model == MODEL_DEFORM else 0
        )

    def to_json_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "rbf_bins": self.rbf_bins,
            "rbf_delta": self.rbf_delta,
            "n_plain_layers": self.n_plain_layers,
            "n_deform_layers": self.n_deform_layers,
            "knn_k": self.knn_k,
            "fields": self.fields.to_json_dict(),
            "weight_limit": self.weight_limit,
            "deformation_step": self.deformation_step,
            "max_atomic_number": self.max_atomic_number,
            "model": self.model,
            "ff_head_layers": self.ff_head_layers,
            "param_mean": list(self.param_mean) if self.param_mean else None,
            "param_std": list(self.param_std) if self.param_std else None,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ModelConfig":
        known = {
            "feature_dim", "rbf_bins", "rbf_delta", "n_plain_layers",
            "n_deform_layers", "knn_k", "fields", "weight_limit",
            "deformation_step", "max_atomic_number", "model",
            "ff_head_layers", "param_mean", "param_std",
        }
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        d["fields"] = FieldSpec.from_json_dict(d["fields"])
        for key in ("param_mean", "param_std"):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        return ModelConfig(**d)


# ---------------------------------------------------------------------------
# Parameters and checkpoints
# ---------------------------------------------------------------------------


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_parameters(cfg: ModelConfig, seed: int) -> Dict[str, Tensor]:
    """Deterministic initialisation.

    All matrices are uniform(+-1/sqrt(fan_in)); embedding rows are normal
    with std 1/sqrt(F); the deformation-head output vectors start at zero
    so training begins at the identity deformation; biases start at zero.
    """
    rng = np.random.default_rng(seed)
    f, d = cfg.feature_dim, cfg.rbf_bins
    params: Dict[str, Tensor] = {}

    def add(name, arr):
        params[name] = Tensor(arr, requires_grad=True)

    add("embed", rng.normal(0.0, 1.0 / np.sqrt(f),
                            size=(cfg.max_atomic_number + 1, f)))
    edge_in = 2 * f + d
    trip_in = 3 * f + 2 * d + 2
    for l in range(cfg.n_layers):
        pre = f"layer{l}."
        add(pre + "msg.W", _uniform(rng, edge_in, (edge_in, f)))
        add(pre + "msg.Wp", _uniform(rng, f, (f, f)))
        add(pre + "gru.Wi", _uniform(rng, f, (f, 3 * f)))
        add(pre + "gru.Wh", _uniform(rng, f, (f, 3 * f)))
        add(pre + "gru.bi", np.zeros(3 * f))
        add(pre + "gru.bh", np.zeros(3 * f))
        if cfg.model == MODEL_DEFORM and l >= cfg.n_plain_layers:
            for name in cfg.fields.edge_fields:
                add(pre + f"edge[{name}].W", _uniform(rng, edge_in, (edge_in, f)))
                add(pre + f"edge[{name}].Wp", np.zeros((f, 1)))
            for name in cfg.fields.triplet_fields:
                add(pre + f"trip[{name}].W", _uniform(rng, trip_in, (trip_in, f)))
                add(pre + f"trip[{name}].Wp", np.zeros((f, 1)))
    if cfg.model == MODEL_FF:
        for i in range(cfg.ff_head_layers):
            out = 6 if i == cfg.ff_head_layers - 1 else f
            add(f"head.{i}.W", _uniform(rng, f, (f, out)))
            add(f"head.{i}.b", np.zeros(out))
    return params


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    parameters: Dict[str, Tensor]
    rng_seed: int = 0
    format_version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: ModelCheckpoint, path: str):
    doc = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_json_dict(),
        "rng_seed": ckpt.rng_seed,
        "parameters": {
            name: {
                "shape": list(t.data.shape),
                "data": base64.b64encode(
                    np.ascontiguousarray(t.data, dtype="<f8").tobytes()
                ).decode("ascii"),
            }
            for name, t in ckpt.parameters.items()
        },
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh)


def load_checkpoint(path: str) -> ModelCheckpoint:
    with open(path, "r", encoding="ascii") as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise DomainError(f"unsupported checkpoint version {version!r}")
    cfg = ModelConfig.from_json_dict(doc["config"])
    params = {}
    for name, rec in doc["parameters"].items():
        arr = np.frombuffer(
            base64.b64decode(rec["data"]), dtype="<f8"
        ).reshape(rec["shape"])
        params[name] = Tensor(arr.copy(), requires_grad=True)
    expected = set(init_parameters(cfg, 0))
    if set(params) != expected:
        raise DomainError("checkpoint parameters do not match the config")
    return ModelCheckpoint(config=cfg, parameters=params,
                           rng_seed=doc.get("rng_seed", 0))


# ---------------------------------------------------------------------------
# Batched graphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of per-sample graphs with per-sample lattices."""

    n_samples: int
    n_nodes: int
    z: np.ndarray  # (N,)
    src: np.ndarray  # (E,) global node index
    dst: np.ndarray  # (E,)
    e_frac: np.ndarray  # (E, 3) constant fractional edge vectors
    t_first: np.ndarray  # (T,) global edge index
    t_second: np.ndarray  # (T,)
    edge_sample: np.ndarray  # (E,)
    node_starts: np.ndarray  # (B+1,)
    edge_starts: np.ndarray  # (B+1,)
    trip_starts: np.ndarray  # (B+1,)
    agg_starts: np.ndarray  # (N+1,) src-major out-edge boundaries
    inv_edge_count: np.ndarray  # (E,) 1/|edges of own sample|
    inv_trip_count: np.ndarray  # (T,)
    rho0: np.ndarray  # (B, 3, 3) input lattices


def assemble_batch(
    materials: Sequence[Material],
    graphs: Optional[Sequence[PeriodicGraph]] = None,
    knn_k: int = 8,
) -> GraphBatch:
    """Pack materials (and optionally pre-built graphs) into one batch."""
    if graphs is None:
        graphs = [build_graph(m, KNN(knn_k)) for m in materials]
    b = len(materials)
    n_nodes = np.array([m.n_atoms for m in materials])
    n_edges = np.array([g.n_edges for g in graphs])
    n_trips = np.array([g.n_triplets for g in graphs])
    node_starts = np.concatenate(([0], np.cumsum(n_nodes))).astype(np.int64)
    edge_starts = np.concatenate(([0], np.cumsum(n_edges))).astype(np.int64)
    trip_starts = np.concatenate(([0], np.cumsum(n_trips))).astype(np.int64)

    z = np.concatenate([m.z for m in materials])
    src = np.concatenate([g.src + node_starts[i] for i, g in enumerate(graphs)])
    dst = np.concatenate([g.dst + node_starts[i] for i, g in enumerate(graphs)])
    e_frac = np.concatenate(
        [m.x[g.dst] - m.x[g.src] + g.tau for m, g in zip(materials, graphs)]
    )
    t_first = np.concatenate(
        [g.t_first + edge_starts[i] for i, g in enumerate(graphs)]
    ).astype(np.int64) if n_trips.sum() else np.zeros(0, dtype=np.int64)
    t_second = np.concatenate(
        [g.t_second + edge_starts[i] for i, g in enumerate(graphs)]
    ).astype(np.int64) if n_trips.sum() else np.zeros(0, dtype=np.int64)

    edge_sample = np.repeat(np.arange(b), n_edges)
    out_counts = np.bincount(src, minlength=int(n_nodes.sum()))
    agg_starts = np.concatenate(([0], np.cumsum(out_counts))).astype(np.int64)

    inv_edge = np.repeat(1.0 / np.maximum(n_edges, 1), n_edges)
    inv_trip = np.repeat(1.0 / np.maximum(n_trips, 1), n_trips)
    rho0 = np.stack([m.rho for m in materials])
    return GraphBatch(
        n_samples=b,
        n_nodes=int(n_nodes.sum()),
        z=z,
        src=src,
        dst=dst,
        e_frac=np.ascontiguousarray(e_frac),
        t_first=t_first,
        t_second=t_second,
        edge_sample=edge_sample,
        node_starts=node_starts,
        edge_starts=edge_starts,
        trip_starts=trip_starts,
        agg_starts=agg_starts,
        inv_edge_count=inv_edge,
        inv_trip_count=inv_trip,
        rho0=rho0,
    )


# ---------------------------------------------------------------------------
# Building blocks (tape level)
# ---------------------------------------------------------------------------


def rbf_encode(d: Tensor, bins: int, delta: float) -> Tensor:
    """Gaussian distance features exp(-(d - k*delta)^2 / delta), k < bins."""
    centers = np.arange(bins) * delta
    t = tape.sub(tape.reshape(d, (-1, 1)), tape.constant(centers))
    return tape.exp(tape.mul(tape.mul(t, t), tape.constant(-1.0 / delta)))


def message_edge(h_src: Tensor, h_dst: Tensor, rbf: Tensor,
                 w: Tensor, wp: Tensor) -> Tensor:
    """Two-layer SiLU message on the concatenated edge features."""
    feat = tape.concat([h_src, h_dst, rbf], axis=1)
    return tape.matmul(tape.silu(tape.matmul(feat, w)), wp)


def node_update(h: Tensor, agg: Tensor, wi: Tensor, wh: Tensor,
                bi: Tensor, bh: Tensor) -> Tensor:
    """GRU cell: hidden state h, input = summed incoming messages."""
    f = h.data.shape[1]
    gi = tape.add(tape.matmul(agg, wi), bi)
    gh = tape.add(tape.matmul(h, wh), bh)
    r = tape.sigmoid(tape.add(tape.slice_cols(gi, 0, f), tape.slice_cols(gh, 0, f)))
    z = tape.sigmoid(
        tape.add(tape.slice_cols(gi, f, 2 * f), tape.slice_cols(gh, f, 2 * f))
    )
    n = tape.tanh(
        tape.add(
            tape.slice_cols(gi, 2 * f, 3 * f),
            tape.mul(r, tape.slice_cols(gh, 2 * f, 3 * f)),
        )
    )
    one = tape.constant(1.0)
    return tape.add(tape.mul(tape.sub(one, z), n), tape.mul(z, h))


def deformation_weights(feat: Tensor, w: Tensor, wp: Tensor,
                        limit: Optional[float]) -> Tensor:
    """Scalar weight per row; bounded heads map through limit*(2*sigmoid-1)."""
    raw = tape.matmul(tape.silu(tape.matmul(feat, w)), wp)
    raw = tape.reshape(raw, (-1,))
    if limit is None:
        return raw
    two_sig = tape.mul(tape.sigmoid(raw), tape.constant(2.0))
    return tape.mul(tape.sub(two_sig, tape.constant(1.0)), tape.constant(limit))


def apply_deformation(
    rho: Tensor,
    w_edges: Optional[Tensor],
    lam_edges: Optional[Tensor],
    w_triplets: Optional[Tensor],
    lam_triplets: Optional[Tensor],
    k: float,
    batch: GraphBatch,
) -> Tensor:
    """First-order lattice update with per-sample edge/triplet averaging."""
    s = None
    if w_edges is not None:
        if int(np.min(np.diff(batch.edge_starts))) == 0:
            raise DomainError("a sample has no edges")
        wn = tape.mul(w_edges, tape.constant(batch.inv_edge_count))
        s = tape.weighted_matsum(wn, lam_edges, batch.edge_sample,
                                 batch.edge_starts)
    if w_triplets is not None and w_triplets.data.shape[0]:
        trip_sample = np.repeat(np.arange(batch.n_samples),
                                np.diff(batch.trip_starts))
        wn = tape.mul(w_triplets, tape.constant(batch.inv_trip_count))
        st = tape.weighted_matsum(wn, lam_triplets, trip_sample,
                                  batch.trip_starts)
        s = st if s is None else tape.add(s, st)
    if s is None:
        return rho
    upd = tape.add(
        tape.mul(tape.transpose_last(s), tape.constant(k)),
        tape.constant(np.eye(3)),
    )
    return tape.bmm(rho, upd)


def _geometry(rho: Tensor, batch: GraphBatch):
    v = tape.edge_matvec(batch.e_frac, rho, batch.edge_sample, batch.edge_starts)
    r = tape.rows_norm(v)
    return v, r


def _edge_features(h: Tensor, rbf: Tensor, batch: GraphBatch) -> Tensor:
    return tape.concat(
        [tape.gather_rows(h, batch.src), tape.gather_rows(h, batch.dst), rbf],
        axis=1,
    )


def _triplet_generators(
    names: Sequence[str],
    v: Tensor,
    r: Tensor,
    u: Tensor,
    batch: GraphBatch,
) -> Tuple[Dict[str, Tensor], Tensor, Tensor]:
    """Tape versions of the grade-2 generators plus (cos, sin) head features."""
    v1 = tape.gather_rows(v, batch.t_first)
    v2 = tape.gather_rows(v, batch.t_second)
    u1 = tape.gather_rows(u, batch.t_first)
    u2 = tape.gather_rows(u, batch.t_second)
    r1 = tape.gather_rows(r, batch.t_first)
    r2 = tape.gather_rows(r, batch.t_second)
    cosa = tape.rows_dot(u1, u2)
    cross_u = tape.cross3(u1, u2)
    sina = tape.rows_norm(cross_u, floor=_NORM_FLOOR)

    gens: Dict[str, Tensor] = {}
    need_omega = any(
        n in (TRIPLET_GRAD_THETA, TRIPLET_GRAD_AREA) for n in names
    )
    if need_omega:
        cross = tape.cross3(v1, v2)
        s = tape.rows_norm(cross, floor=_NORM_FLOOR)
        mask = (s.data > _COLLINEAR_TOL * r1.data * r2.data).astype(np.float64)
        omega = tape.mul(cross, tape.reshape(tape.div(tape.constant(mask), s),
                                             (-1, 1)))
        ga = tape.cross3(v2, omega)
        gb = tape.cross3(omega, v1)
        grad_pair = tape.add(tape.outer_rows(ga, v1), tape.outer_rows(gb, v2))
    for name in names:
        if name == TRIPLET_KETBRA_DIAG:
            gens[name] = tape.outer_rows(u1, u1)
        elif name == TRIPLET_KETBRA_CROSS:
            gens[name] = tape.outer_rows(u1, u2)
        elif name == TRIPLET_KETBRA_CROSS_SYM:
            gens[name] = tape.add(tape.outer_rows(u1, u2), tape.outer_rows(u2, u1))
        elif name == TRIPLET_GRAD_R + ":first":
            gens[name] = tape.outer_rows(u1, v1)
        elif name == TRIPLET_GRAD_R + ":second":
            gens[name] = tape.outer_rows(u2, v2)
        elif name == TRIPLET_GRAD_AREA:
            gens[name] = tape.mul(grad_pair, tape.constant(0.5))
        elif name == TRIPLET_GRAD_THETA:
            c = tape.rows_dot(v1, v2)
            s_masked = tape.mul(s, tape.constant(mask))
            num = tape.sub(
                tape.mul(tape.reshape(c, (-1, 1, 1)), grad_pair),
                tape.mul(
                    tape.reshape(s_masked, (-1, 1, 1)),
                    tape.add(tape.outer_rows(v2, v1), tape.outer_rows(v1, v2)),
                ),
            )
            rr = tape.mul(tape.mul(r1, r2), tape.mul(r1, r2))
            gens[name] = tape.div(num, tape.reshape(rr, (-1, 1, 1)))
        else:
            raise DomainError(f"unknown triplet field {name!r}")
    return gens, cosa, sina


def _symmetrize(lam: Tensor) -> Tensor:
    return tape.mul(tape.add(lam, tape.transpose_last(lam)), tape.constant(0.5))


def _deform_layer(
    l: int,
    h: Tensor,
    rho: Tensor,
    batch: GraphBatch,
    cfg: ModelConfig,
    params: Dict[str, Tensor],
    v: Tensor,
    r: Tensor,
    rbf: Tensor,
    feat: Tensor,
) -> Tensor:
    pre = f"layer{l}."
    u = tape.mul(v, tape.reshape(tape.div(tape.constant(1.0), r), (-1, 1)))
    s_total = None
    max_gen_norm = 0.0

    for name in cfg.fields.edge_fields:
        w = deformation_weights(
            feat, params[pre + f"edge[{name}].W"], params[pre + f"edge[{name}].Wp"],
            cfg.weight_limit,
        )
        lam = tape.outer_rows(u, u) if name == EDGE_KETBRA else tape.outer_rows(u, v)
        if cfg.fields.symmetrize:
            lam = _symmetrize(lam)
        wn = tape.mul(w, tape.constant(batch.inv_edge_count))
        s = tape.weighted_matsum(wn, lam, batch.edge_sample, batch.edge_starts)
        s_total = s if s_total is None else tape.add(s_total, s)
        if cfg.weight_limit is not None and lam.data.size:
            max_gen_norm = max(
                max_gen_norm, float(np.linalg.norm(lam.data, axis=(1, 2)).max())
            )

    trip_names = cfg.fields.triplet_fields
    if trip_names and batch.t_first.shape[0]:
        gens, cosa, sina = _triplet_generators(trip_names, v, r, u, batch)
        h_i = tape.gather_rows(h, batch.src[batch.t_first])
        h_j = tape.gather_rows(h, batch.dst[batch.t_first])
        h_k = tape.gather_rows(h, batch.dst[batch.t_second])
        rbf1 = tape.gather_rows(rbf, batch.t_first)
        rbf2 = tape.gather_rows(rbf, batch.t_second)
        tfeat = tape.concat(
            [h_i, h_j, h_k, rbf1, rbf2,
             tape.reshape(cosa, (-1, 1)), tape.reshape(sina, (-1, 1))],
            axis=1,
        )
        trip_sample = np.repeat(np.arange(batch.n_samples),
                                np.diff(batch.trip_starts))
        for name in trip_names:
            w = deformation_weights(
                tfeat, params[pre + f"trip[{name}].W"],
                params[pre + f"trip[{name}].Wp"], cfg.weight_limit,
            )
            lam = gens[name]
            if cfg.fields.symmetrize:
                lam = _symmetrize(lam)
            wn = tape.mul(w, tape.constant(batch.inv_trip_count))
            s = tape.weighted_matsum(wn, lam, trip_sample, batch.trip_starts)
            s_total = s if s_total is None else tape.add(s_total, s)
            if cfg.weight_limit is not None and lam.data.size:
                max_gen_norm = max(
                    max_gen_norm,
                    float(np.linalg.norm(lam.data, axis=(1, 2)).max()),
                )

    if s_total is None:
        return rho
    k = cfg.deformation_step
    upd = tape.add(
        tape.mul(tape.transpose_last(s_total), tape.constant(k)),
        tape.constant(np.eye(3)),
    )
    rho_next = tape.bmm(rho, upd)
    if cfg.weight_limit is not None:
        # growth bound: each bounded head contributes at most limit * max|gen|
        n_heads = len(cfg.fields.edge_fields) + len(trip_names)
        factor = 1.0 + k * cfg.weight_limit * n_heads * max_gen_norm
        before = np.linalg.norm(rho.data, axis=(1, 2))
        after = np.linalg.norm(rho_next.data, axis=(1, 2))
        assert np.all(after <= factor * before * (1.0 + 1e-9) + 1e-12), (
            "deformation grew the lattice beyond the bounded-weight limit"
        )
    return rho_next


def batch_forward(
    batch: GraphBatch, cfg: ModelConfig, params: Dict[str, Tensor]
) -> Tuple[Tensor, Tensor]:
    """Run the deformation model on a packed batch.

    Returns (rho (B, 3, 3), node features (N, F)) as tape tensors.
    """
    if np.any(batch.z > cfg.max_atomic_number):
        raise DomainError("atomic number exceeds the embedding table")
    h = tape.gather_rows(params["embed"], batch.z)
    rho = tape.constant(batch.rho0)
    for l in range(cfg.n_layers):
        pre = f"layer{l}."
        v, r = _geometry(rho, batch)
        rbf = rbf_encode(r, cfg.rbf_bins, cfg.rbf_delta)
        feat = _edge_features(h, rbf, batch)
        msg = tape.matmul(
            tape.silu(tape.matmul(feat, params[pre + "msg.W"])),
            params[pre + "msg.Wp"],
        )
        agg = tape.segment_sum(msg, batch.agg_starts)
        h = node_update(
            h, agg, params[pre + "gru.Wi"], params[pre + "gru.Wh"],
            params[pre + "gru.bi"], params[pre + "gru.bh"],
        )
        if cfg.model == MODEL_DEFORM and l >= cfg.n_plain_layers:
            rho = _deform_layer(l, h, rho, batch, cfg, params, v, r, rbf, feat)
    return rho, h


def forward(
    m: Material, cfg: ModelConfig, params: Dict[str, Tensor]
) -> Tuple[np.ndarray, np.ndarray]:
    """Single-material forward pass; returns (rho_pred, node features)."""
    batch = assemble_batch([m], knn_k=cfg.knn_k)
    rho, h = batch_forward(batch, cfg, params)
    return rho.data[0].copy(), h.data.copy()


# ---------------------------------------------------------------------------
# Invariant feed-forward baseline
# ---------------------------------------------------------------------------


def lattice_params_tensor(rho: Tensor) -> Tensor:
    """Differentiable (B, 6) lattice parameters [a, b, c, alpha, beta, gamma],
    lengths in A and angles in radians."""
    rows = [tape.select_row(rho, i) for i in range(3)]
    lengths = [tape.rows_norm(rows[i]) for i in range(3)]
    pairs = [(1, 2), (0, 2), (0, 1)]
    angles = []
    for i, j in pairs:
        cross = tape.cross3(rows[i], rows[j])
        angles.append(
            tape.atan2(tape.rows_norm(cross, floor=_NORM_FLOOR),
                       tape.rows_dot(rows[i], rows[j]))
        )
    return tape.stack_cols(lengths + angles)


def build_lattice_tensor(params6: Tensor) -> Tensor:
    """Differentiable canonical lower-triangular cells from (B, 6) parameters.

    Lengths are clamped to at least 0.01 A and the height term to a small
    positive value, so an untrained head cannot produce a degenerate cell.
    """
    cols = [tape.reshape(tape.slice_cols(params6, i, i + 1), (-1,))
            for i in range(6)]
    a = tape.clamp(cols[0], 1e-2, np.inf)
    b = tape.clamp(cols[1], 1e-2, np.inf)
    c = tape.clamp(cols[2], 1e-2, np.inf)
    al = tape.clamp(cols[3], 1e-3, np.pi - 1e-3)
    be = tape.clamp(cols[4], 1e-3, np.pi - 1e-3)
    ga = tape.clamp(cols[5], 1e-3, np.pi - 1e-3)
    ca, cb, cg, sg = tape.cos(al), tape.cos(be), tape.cos(ga), tape.sin(ga)
    zero = tape.constant(np.zeros(params6.data.shape[0]))
    cx = tape.mul(c, cb)
    cy = tape.div(tape.mul(c, tape.sub(ca, tape.mul(cb, cg))), sg)
    cz2 = tape.sub(tape.sub(tape.mul(c, c), tape.mul(cx, cx)),
                   tape.mul(cy, cy))
    cz = tape.sqrt(tape.clamp(cz2, 1e-12, np.inf))
    flat = tape.stack_cols(
        [a, zero, zero, tape.mul(b, cg), tape.mul(b, sg), zero, cx, cy, cz]
    )
    return tape.reshape(flat, (-1, 3, 3))


def ff_batch_forward(
    batch: GraphBatch, cfg: ModelConfig, params: Dict[str, Tensor]
) -> Tensor:
    """Invariant encoder + feed-forward head predicting the six lattice
    parameters (normalised); returns the reconstructed (B, 3, 3) cells."""
    if cfg.param_mean is None or cfg.param_std is None:
        raise DomainError("feed-forward baseline requires parameter statistics")
    if np.any(batch.z > cfg.max_atomic_number):
        raise DomainError("atomic number exceeds the embedding table")
    h = tape.gather_rows(params["embed"], batch.z)
    rho = tape.constant(batch.rho0)
    v, r = _geometry(rho, batch)
    rbf = rbf_encode(r, cfg.rbf_bins, cfg.rbf_delta)
    for l in range(cfg.n_plain_layers):
        pre = f"layer{l}."
        feat = _edge_features(h, rbf, batch)
        msg = tape.matmul(
            tape.silu(tape.matmul(feat, params[pre + "msg.W"])),
            params[pre + "msg.Wp"],
        )
        agg = tape.segment_sum(msg, batch.agg_starts)
        h = node_update(
            h, agg, params[pre + "gru.Wi"], params[pre + "gru.Wh"],
            params[pre + "gru.bi"], params[pre + "gru.bh"],
        )
    counts = np.diff(batch.node_starts).astype(np.float64)
    pooled = tape.mul(
        tape.segment_sum(h, batch.node_starts),
        tape.constant((1.0 / counts)[:, None]),
    )
    y = pooled
    for i in range(cfg.ff_head_layers):
        y = tape.add(tape.matmul(y, params[f"head.{i}.W"]), params[f"head.{i}.b"])
        if i < cfg.ff_head_layers - 1:
            y = tape.silu(y)
    denorm = tape.add(
        tape.mul(y, tape.constant(np.asarray(cfg.param_std))),
        tape.constant(np.asarray(cfg.param_mean)),
    )
    return build_lattice_tensor(denorm)


def ff_baseline_forward(
    m: Material, cfg: ModelConfig, params: Dict[str, Tensor]
) -> np.ndarray:
    """Single-material baseline forward; fully invariant under the group."""
    batch = assemble_batch([m], knn_k=cfg.knn_k)
    return ff_batch_forward(batch, cfg, params).data[0].copy()


def model_batch_forward(
    batch: GraphBatch, cfg: ModelConfig, params: Dict[str, Tensor]
) -> Tensor:
    """Dispatch on the configured model kind; returns predicted lattices."""
    if cfg.model == MODEL_FF:
        return ff_batch_forward(batch, cfg, params)
    rho, _ = batch_forward(batch, cfg, params)
    return rho


def with_normalizer(cfg: ModelConfig, mean, std) -> ModelConfig:
    return replace(cfg, param_mean=tuple(float(v) for v in mean),
                   param_std=tuple(float(v) for v in std))
