"""End-to-end CLI behaviour: dataset generation, training, evaluation,
property checks, inspection, config precedence and exit codes."""

import json
import os

import numpy as np
import pytest

from cellmend.cli import main
from cellmend.io import read_materials
from cellmend.net import load_checkpoint, init_parameters


def run(*argv):
    return main(list(argv))


def gen_small(tmp_path, n=40, seed=7, family="mixed"):
    out = str(tmp_path / "data")
    assert run("gen", "--family", family, "--n", str(n), "--seed", str(seed),
               "--out", out) == 0
    return out


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def test_gen_split_sizes(tmp_path):
    out = gen_small(tmp_path, n=40)
    assert len(read_materials(os.path.join(out, "train.jsonl"))) == 32
    assert len(read_materials(os.path.join(out, "val.jsonl"))) == 4
    assert len(read_materials(os.path.join(out, "test.jsonl"))) == 4


def test_gen_deterministic_bytes(tmp_path):
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    for out in (a, b):
        assert run("gen", "--family", "cubic", "--n", "20", "--seed", "3",
                   "--out", out) == 0
    for name in ("train.jsonl", "val.jsonl", "test.jsonl"):
        with open(os.path.join(a, name), "rb") as fa, \
             open(os.path.join(b, name), "rb") as fb:
            assert fa.read() == fb.read()


def test_gen_records_reparse(tmp_path):
    out = gen_small(tmp_path, n=20)
    mats = read_materials(os.path.join(out, "train.jsonl"))
    for m in mats:
        assert m.n_atoms >= 2
        assert np.all(m.x >= 0) and np.all(m.x < 1)


def test_gen_rejects_bad_family(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("gen", "--family", "nope", "--n", "20",
            "--out", str(tmp_path / "x"))
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


TRAIN_FLAGS = [
    "--feature-dim", "10", "--rbf-bins", "6", "--rbf-delta", "1.2",
    "--plain-layers", "1", "--deform-layers", "1", "--knn", "6",
    "--batch", "4", "--steps", "12", "--val-every", "6",
]


def test_train_writes_checkpoint_and_curve(tmp_path):
    data = gen_small(tmp_path)
    out = str(tmp_path / "run")
    assert run("train", "--data", data, "--out", out, "--sigma", "0.1",
               "--loss", "param-mae", "--lr", "0.001", "--seed", "1",
               *TRAIN_FLAGS) == 0
    ckpt = load_checkpoint(os.path.join(out, "checkpoint.json"))
    assert ckpt.config.model == "deform"
    with open(os.path.join(out, "curve.csv")) as fh:
        lines = fh.read().strip().splitlines()
    assert lines[0] == "step,loss,val_length,val_angle"
    assert len(lines) == 13


def test_train_lr_zero_equals_init(tmp_path):
    data = gen_small(tmp_path)
    out = str(tmp_path / "run0")
    assert run("train", "--data", data, "--out", out, "--lr", "0",
               "--seed", "5", *TRAIN_FLAGS) == 0
    ckpt = load_checkpoint(os.path.join(out, "checkpoint.json"))
    ref = init_parameters(ckpt.config, seed=5)
    for name, p in ckpt.parameters.items():
        assert np.array_equal(p.data, ref[name].data)


def test_train_invalid_loss_exits_2(tmp_path, capsys):
    data = gen_small(tmp_path)
    code = run("train", "--data", data, "--out", str(tmp_path / "r"),
               "--loss", "not-a-loss", *TRAIN_FLAGS)
    assert code == 2
    err = capsys.readouterr().err
    for name in ("param-mae", "param-mse", "rho-mae", "rho-mse", "rho-riemann"):
        assert name in err


def test_train_determinism_byte_identical(tmp_path):
    data = gen_small(tmp_path)
    outs = []
    for name in ("r1", "r2"):
        out = str(tmp_path / name)
        assert run("train", "--data", data, "--out", out, "--seed", "9",
                   "--lr", "0.001", *TRAIN_FLAGS) == 0
        outs.append(out)
    with open(os.path.join(outs[0], "checkpoint.json"), "rb") as fa, \
         open(os.path.join(outs[1], "checkpoint.json"), "rb") as fb:
        assert fa.read() == fb.read()


def test_train_ff_baseline(tmp_path):
    data = gen_small(tmp_path)
    out = str(tmp_path / "ff")
    assert run("train", "--data", data, "--out", out, "--model", "ff",
               "--lr", "0.001", *TRAIN_FLAGS) == 0
    ckpt = load_checkpoint(os.path.join(out, "checkpoint.json"))
    assert ckpt.config.model == "ff"
    assert ckpt.config.param_mean is not None


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def trained_run(tmp_path, extra=()):
    data = gen_small(tmp_path)
    out = str(tmp_path / "run")
    assert run("train", "--data", data, "--out", out, "--lr", "0",
               "--seed", "2", *TRAIN_FLAGS, *extra) == 0
    return data, os.path.join(out, "checkpoint.json")


def test_eval_identity_checkpoint_zero_improvement(tmp_path):
    data, ckpt = trained_run(tmp_path)
    out = str(tmp_path / "eval")
    assert run("eval", "--checkpoint", ckpt, "--data", data, "--out", out,
               "--mode", "denoise", "--sigma", "0.1", "--seed", "3") == 0
    agg = json.load(open(os.path.join(out, "denoise.json")))
    assert agg["length"] == 0.0 and agg["angle"] == 0.0
    assert agg["failed"] == 0


def test_eval_both_modes_and_diagnostics(tmp_path):
    data, ckpt = trained_run(tmp_path)
    out = str(tmp_path / "eval2")
    assert run("eval", "--checkpoint", ckpt, "--data", data, "--out", out,
               "--mode", "both", "--diagnostics") == 0
    for mode in ("denoise", "reconstruct"):
        assert os.path.exists(os.path.join(out, f"{mode}.csv"))
        assert os.path.exists(os.path.join(out, f"{mode}.json"))
        assert os.path.exists(os.path.join(out, f"{mode}_diagnostics.csv"))
    with open(os.path.join(out, "denoise.csv")) as fh:
        header = fh.readline().strip()
    assert header == ("sample_id,len_noisy,len_denoised,angle_noisy,"
                      "angle_denoised,len_improvement,angle_improvement")


def test_eval_missing_checkpoint_exits_2(tmp_path):
    data = gen_small(tmp_path)
    code = run("eval", "--checkpoint", str(tmp_path / "nope.json"),
               "--data", data, "--out", str(tmp_path / "e"))
    assert code == 2


def test_eval_baseline_flag_requires_ff_checkpoint(tmp_path):
    data, ckpt = trained_run(tmp_path)
    code = run("eval", "--checkpoint", ckpt, "--data", data,
               "--out", str(tmp_path / "e2"), "--baseline", "ff")
    assert code == 2


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def test_check_single_suite_passes(capsys):
    assert run("check", "--suite", "group-actions", "--trials", "5",
               "--seed", "0") == 0
    out = capsys.readouterr().out
    assert "group-actions" in out and "pass" in out


def test_check_unknown_suite_exits_2():
    assert run("check", "--suite", "nope") == 2


def test_check_replay_is_deterministic(capsys):
    assert run("check", "--suite", "loss-invariance", "--trials", "4",
               "--seed", "11") == 0
    first = capsys.readouterr().out
    assert run("check", "--suite", "loss-invariance", "--trials", "4",
               "--seed", "11") == 0
    assert capsys.readouterr().out == first


# ---------------------------------------------------------------------------
# inspect and config precedence
# ---------------------------------------------------------------------------


def test_inspect_prints_summary(tmp_path, capsys):
    data = gen_small(tmp_path)
    dump = str(tmp_path / "graph.json")
    assert run("inspect", "--data", os.path.join(data, "test.jsonl"),
               "--index", "1", "--dump-graph", dump) == 0
    out = capsys.readouterr().out
    assert "atoms" in out and "graph:" in out
    doc = json.load(open(dump))
    assert set(doc) == {"n", "edges", "triplets"}


def test_config_file_precedence(tmp_path):
    data = gen_small(tmp_path)
    cfg_path = str(tmp_path / "cfg.json")
    with open(cfg_path, "w") as fh:
        json.dump({"steps": 3, "batch": 2, "lr": 0.0, "feature_dim": 10,
                   "rbf_bins": 6, "rbf_delta": 1.2, "plain_layers": 1,
                   "deform_layers": 1, "knn": 6, "val_every": 100}, fh)
    out = str(tmp_path / "cfgrun")
    # flag --steps overrides the config file's 3
    assert run("train", "--data", data, "--out", out, "--config", cfg_path,
               "--steps", "2") == 0
    with open(os.path.join(out, "curve.csv")) as fh:
        assert len(fh.read().strip().splitlines()) == 3  # header + 2 steps


def test_config_file_unknown_key_rejected(tmp_path):
    data = gen_small(tmp_path)
    cfg_path = str(tmp_path / "bad.json")
    with open(cfg_path, "w") as fh:
        json.dump({"stepz": 3}, fh)
    code = run("train", "--data", data, "--out", str(tmp_path / "x"),
               "--config", cfg_path, *TRAIN_FLAGS)
    assert code == 2
