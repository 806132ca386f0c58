"""Losses, noise model, synthetic datasets, training loop, evaluation."""

import numpy as np
import pytest

from cellmend import tape
from cellmend.core import (
    DomainError,
    Material,
    Orthogonal,
    SLZ,
    lattice_params,
    metric_tensor,
    slz_rho_action,
    wrap_frac,
)
from cellmend.fields import FieldSpec
from cellmend.net import ModelConfig, init_parameters
from cellmend.train import (
    DeformationReport,
    LOSS_NAMES,
    Normalizer,
    TrainConfig,
    _improvement,
    evaluate,
    loss,
    loss_value,
    make_noisy_pair,
    synth_dataset,
    train,
)

from test_core import random_material, random_orthogonal, random_slz


def default_normalizer():
    return Normalizer(
        mean=np.array([4.0, 4.0, 4.0, 1.5, 1.5, 1.5]),
        std=np.array([1.0, 1.0, 1.0, 0.3, 0.3, 0.3]),
    )


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_losses_zero_at_identical_arguments():
    rng = np.random.default_rng(90)
    rho = random_material(rng).rho
    norm = default_normalizer()
    for name in LOSS_NAMES:
        if name == "rho-riemann":
            continue  # the verbatim trace form is not a distance
        assert abs(loss_value(name, rho, rho, norm)) < 1e-12


def test_rho_mae_printed_example():
    # pred = 2I, target = I: gram tensors 4I vs I, entrywise l1 = 9
    assert abs(loss_value("rho-mae", 2 * np.eye(3), np.eye(3)) - 9.0) < 1e-12


def test_rho_riemann_verbatim_value():
    # trace(F(2I) F(I)) = trace(4I) = 12
    assert abs(loss_value("rho-riemann", 2 * np.eye(3), np.eye(3)) - 12.0) < 1e-12


def test_losses_orthogonal_invariance_both_arguments():
    rng = np.random.default_rng(91)
    norm = default_normalizer()
    for _ in range(20):
        pred = random_material(rng).rho
        target = random_material(rng).rho
        q = random_orthogonal(rng)
        for name in LOSS_NAMES:
            base = loss_value(name, pred, target, norm)
            scale = max(abs(base), 1.0)
            assert abs(loss_value(name, pred @ q.T, target, norm) - base) < 1e-10 * scale
            assert abs(loss_value(name, pred, target @ q.T, norm) - base) < 1e-10 * scale


def test_param_mae_not_slz_invariant():
    # explicit counterexample: re-basing changes lattice parameters
    pred = np.diag([2.0, 3.0, 4.0])
    target = np.eye(3)
    g = SLZ([[1, 1, 0], [0, 1, 0], [0, 0, 1]])
    norm = default_normalizer()
    base = loss_value("param-mae", pred, target, norm)
    moved = loss_value("param-mae", slz_rho_action(g, pred), target, norm)
    assert abs(moved - base) > 1e-3


def test_loss_batch_reduction_matches_manual():
    rng = np.random.default_rng(92)
    preds = np.stack([random_material(rng).rho for _ in range(3)])
    targets = np.stack([random_material(rng).rho for _ in range(3)])
    total = float(
        loss("rho-mse", tape.constant(preds), targets).data
    )
    manual = np.mean([
        ((metric_tensor(p) - metric_tensor(t)) ** 2).sum()
        for p, t in zip(preds, targets)
    ])
    assert abs(total - manual) < 1e-10


def test_unknown_loss_rejected():
    with pytest.raises(DomainError):
        loss_value("nope", np.eye(3), np.eye(3))


# ---------------------------------------------------------------------------
# noise model
# ---------------------------------------------------------------------------


def test_make_noisy_pair_sigma_zero():
    rng = np.random.default_rng(93)
    m = random_material(rng)
    noisy, clean = make_noisy_pair(m, 0.0, rng)
    assert np.array_equal(noisy.rho, clean.rho)
    assert np.array_equal(noisy.x, clean.x)


def test_make_noisy_pair_reproducible():
    rng = np.random.default_rng(94)
    m = random_material(rng)
    a, _ = make_noisy_pair(m, 0.1, np.random.default_rng(7))
    b, _ = make_noisy_pair(m, 0.1, np.random.default_rng(7))
    assert np.array_equal(a.rho, b.rho)


def test_noise_magnitude_monotone_in_sigma():
    rng = np.random.default_rng(95)
    m = random_material(rng)
    means = []
    for sigma in (0.05, 0.1, 0.3):
        rel = []
        noise_rng = np.random.default_rng(96)
        for _ in range(300):
            noisy, clean = make_noisy_pair(m, sigma, noise_rng)
            ln = np.linalg.norm(noisy.rho, axis=1)
            lc = np.linalg.norm(clean.rho, axis=1)
            rel.append(np.abs(ln - lc) / lc)
        means.append(np.mean(rel))
    assert means[0] < means[1] < means[2]
    assert 0.5 * 0.1 < means[1] < 2.0 * 0.1  # roughly sigma-scale


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------


def test_synth_cubic_family_shape():
    for m in synth_dataset(30, "cubic", seed=3):
        p = lattice_params(m.rho).as_array()
        assert np.allclose(p[3:], 90.0)
        assert np.allclose(p[:3], p[0])


def test_synth_orthorhombic_angles():
    for m in synth_dataset(20, "orthorhombic", seed=4):
        p = lattice_params(m.rho).as_array()
        assert np.allclose(p[3:], 90.0)


def test_synth_deterministic():
    a = synth_dataset(20, "mixed", seed=5)
    b = synth_dataset(20, "mixed", seed=5)
    for ma, mb in zip(a, b):
        assert np.array_equal(ma.rho, mb.rho)
        assert np.array_equal(ma.x, mb.x)
        assert np.array_equal(ma.z, mb.z)


def test_synth_minimum_image_distance():
    # brute-force check over neighbouring images
    shifts = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1)
                       for c in (-1, 0, 1)])
    for m in synth_dataset(40, "mixed", seed=6):
        for i in range(m.n_atoms - 1):
            diff = m.x[i + 1:] - m.x[i]
            d = (diff[:, None, :] + shifts[None, :, :]) @ m.rho
            assert np.sqrt((d * d).sum(axis=2)).min() >= 0.7 - 1e-12


def test_synth_species_and_counts():
    mats = synth_dataset(30, "mixed", seed=7)
    for m in mats:
        assert 2 <= m.n_atoms <= 8
        assert set(m.z.tolist()) <= {1, 6, 8, 14, 26}


def test_synth_rejects_bad_family():
    with pytest.raises(DomainError):
        synth_dataset(5, "hexagonal", seed=0)


# ---------------------------------------------------------------------------
# normalizer
# ---------------------------------------------------------------------------


def test_normalizer_round_trip():
    mats = synth_dataset(50, "mixed", seed=8)
    norm = Normalizer.fit(mats)
    rng = np.random.default_rng(97)
    p = rng.standard_normal(6)
    assert np.abs(norm.denormalize(norm.normalize(p)) - p).max() < 1e-12
    assert np.all(norm.std > 0)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def tiny_model():
    return ModelConfig(feature_dim=10, rbf_bins=6, rbf_delta=1.2,
                       n_plain_layers=1, n_deform_layers=1, knn_k=6,
                       fields=FieldSpec(("edge-ketbra",)))


def test_train_lr_zero_keeps_parameters():
    data = synth_dataset(4, "mixed", seed=9)
    cfg = TrainConfig(sigma=0.1, lr=0.0, batch_size=2, total_steps=5, seed=1,
                      val_every=10**9)
    result = train(tiny_model(), data, [], cfg)
    reference = init_parameters(result.checkpoint.config, seed=1)
    for name, p in result.checkpoint.parameters.items():
        assert np.array_equal(p.data, reference[name].data), name


def test_train_records_clipped_gradient_norms():
    data = synth_dataset(4, "mixed", seed=10)
    cfg = TrainConfig(sigma=0.1, lr=1e-3, batch_size=2, total_steps=8, seed=2,
                      grad_clip=1.0, val_every=10**9)
    result = train(tiny_model(), data, [], cfg)
    assert len(result.grad_norms) == 8
    assert max(result.grad_norms) <= 1.0 + 1e-9


def test_train_overfits_single_sample():
    # smoke contract: a one-sample dataset must show a falling loss
    data = synth_dataset(1, "orthorhombic", seed=11)
    cfg = TrainConfig(sigma=0.1, lr=3e-3, batch_size=8, total_steps=200,
                      seed=3, val_every=10**9)
    result = train(tiny_model(), data, [], cfg)
    losses = [r["loss"] for r in result.curve]
    assert losses[-1] < losses[0]


def test_train_deterministic_checkpoints():
    data = synth_dataset(6, "mixed", seed=12)
    cfg = TrainConfig(sigma=0.1, lr=1e-3, batch_size=3, total_steps=6, seed=4,
                      val_every=10**9)
    a = train(tiny_model(), data, [], cfg)
    b = train(tiny_model(), data, [], cfg)
    for name in a.checkpoint.parameters:
        assert np.array_equal(a.checkpoint.parameters[name].data,
                              b.checkpoint.parameters[name].data)


def test_train_config_validation():
    with pytest.raises(DomainError):
        TrainConfig(sigma=-0.1)
    with pytest.raises(DomainError):
        TrainConfig(loss="nope")
    with pytest.raises(DomainError):
        TrainConfig(task="nope")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def test_improvement_antisymmetry():
    rng = np.random.default_rng(98)
    clean = random_material(rng).rho
    noisy = clean @ np.diag([1.05, 0.98, 1.02])
    denoised = clean @ np.diag([1.01, 1.0, 0.99])
    li, ai = _improvement(noisy, denoised, clean)
    lj, aj = _improvement(denoised, noisy, clean)
    assert abs(li + lj) < 1e-12 and abs(ai + aj) < 1e-12


def test_oracle_model_improvement_equals_noise_error():
    # a perfect prediction recovers exactly the noise's own l1 error
    rng = np.random.default_rng(99)
    m = random_material(rng)
    noisy, clean = make_noisy_pair(m, 0.15, rng)
    li, ai = _improvement(noisy.rho, clean.rho, clean.rho)
    pn = lattice_params(noisy.rho).as_array()
    pc = lattice_params(clean.rho).as_array()
    assert abs(li - np.abs(pn[:3] - pc[:3]).sum() / 3) < 1e-12
    assert abs(ai - np.abs(pn[3:] - pc[3:]).sum() / 3) < 1e-12


def test_identity_model_evaluates_to_zero_improvement():
    data = synth_dataset(6, "mixed", seed=13)
    cfg = tiny_model()
    params = init_parameters(cfg, seed=0)  # zero deformation heads
    report = evaluate(cfg, params, data, 0.1, 17, "denoise")
    assert report.length == 0.0 and report.angle == 0.0
    assert report.failed == 0 and len(report.rows) == 6
    assert report.recovery_ratio() == 0.0


def test_reconstruct_mode_reports_errors():
    data = synth_dataset(5, "mixed", seed=14)
    cfg = tiny_model()
    params = init_parameters(cfg, seed=0)
    report = evaluate(cfg, params, data, 0.1, 18, "reconstruct")
    # identity model leaves the 1 A cube: error equals |params(cube)-params|
    for row, m in zip(report.rows, data):
        pc = lattice_params(m.rho).as_array()
        expected = np.abs(np.array([1.0, 1.0, 1.0]) - pc[:3]).sum() / 3
        assert abs(row["len_denoised"] - expected) < 1e-12


def test_evaluate_counts_failures():
    data = synth_dataset(4, "mixed", seed=15)
    cfg = tiny_model()
    params = init_parameters(cfg, seed=0)
    params["embed"].data = params["embed"].data * np.nan  # poison the model
    report = evaluate(cfg, params, data, 0.1, 19, "denoise")
    assert report.failed == 4 and len(report.rows) == 0


def test_report_csv_round_trip(tmp_path):
    import csv

    data = synth_dataset(3, "mixed", seed=16)
    cfg = tiny_model()
    params = init_parameters(cfg, seed=0)
    report = evaluate(cfg, params, data, 0.1, 20, "denoise")
    path = str(tmp_path / "report.csv")
    report.write_csv(path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert float(rows[0]["len_improvement"]) == 0.0
    report.write_aggregate(str(tmp_path / "agg.json"))
    import json

    agg = json.load(open(tmp_path / "agg.json"))
    assert agg == {"length": 0.0, "angle": 0.0, "n": 3, "failed": 0}


def test_diagnostics_rows():
    data = synth_dataset(3, "mixed", seed=17)
    cfg = tiny_model()
    params = init_parameters(cfg, seed=0)
    diagnostics = []
    evaluate(cfg, params, data, 0.1, 21, "denoise", diagnostics=diagnostics)
    assert len(diagnostics) == 3
    for row, m in zip(diagnostics, data):
        expected = m.n_atoms / abs(np.linalg.det(m.rho))
        assert abs(row["density"] - expected) < 1e-12
        assert row["ratio"] == 1.0  # identity model: error unchanged
