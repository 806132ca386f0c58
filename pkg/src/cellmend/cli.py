"""Command-line interface.

Subcommands: ``gen`` (synthetic datasets), ``train``, ``eval``,
``check`` (property suites) and ``inspect`` (material/graph summary).
Option precedence is flags > config file (--config, JSON) > defaults;
unknown config keys are rejected.  Exit codes: 0 success, 1 check or
metric failure, 2 usage/configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np

from .backend import NUMBA_ENABLED, backend_name
from .core import DomainError, lattice_params
from .fields import FIELD_NAMES, FieldSpec
from .graph import KNN, Cutoff, build_graph
from .io import read_materials, write_graph_dump, write_materials
from .net import (
    MODEL_DEFORM,
    MODEL_FF,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .train import (
    LOSS_NAMES,
    TASK_DENOISE,
    TASK_RECONSTRUCT,
    FAMILIES,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    synth_dataset,
    train,
    write_curve_csv,
    write_diagnostics_csv,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


# Defaults applied after merging flags and config file.  Model defaults
# mirror the reference setup; train defaults mirror the published grid.
_DEFAULTS = {
    "gen": {"family": "mixed", "n": 1000, "seed": 0, "out": "data"},
    "train": {
        "sigma": 0.1, "loss": "param-mae", "steps": 32768, "batch": 256,
        "lr": 1e-4, "seed": 0, "task": TASK_DENOISE, "val_every": 512,
        "model": MODEL_DEFORM, "fields": "edge-ketbra", "symmetrize": False,
        "weight_limit": None, "feature_dim": 128, "rbf_bins": 16,
        "rbf_delta": 0.5, "plain_layers": 6, "deform_layers": 4, "knn": 8,
        "step_scale": 1.0, "out": "run", "wrap": False, "threads": 0,
    },
    "eval": {
        "mode": "denoise", "sigma": 0.1, "seed": 0, "out": "eval",
        "baseline": None, "diagnostics": False, "wrap": False, "threads": 0,
    },
    "check": {"suite": "all", "trials": None, "seed": 0},
    "inspect": {"index": 0, "knn": 8, "cutoff": None, "dump_graph": None,
                "wrap": False},
}


def _merge_config(args: argparse.Namespace, command: str) -> dict:
    """flags > config file > defaults; unknown config keys are an error."""
    merged = dict(_DEFAULTS[command])
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            with open(cfg_path, "r", encoding="ascii") as fh:
                file_cfg = json.load(fh)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(merged) - {"data", "checkpoint"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in list(merged) + ["data", "checkpoint"]:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _set_threads(n: int):
    if n and NUMBA_ENABLED:
        import numba

        numba.set_num_threads(max(1, n))


def _parse_fields(text) -> FieldSpec:
    if isinstance(text, FieldSpec):
        return text
    names = [s.strip() for s in str(text).split(",") if s.strip()]
    try:
        return FieldSpec(names)
    except DomainError as exc:
        raise UsageError(str(exc)) from exc


def _dataset_paths(data: Optional[str], split: str) -> str:
    if data is None:
        raise UsageError("--data is required")
    if os.path.isdir(data):
        path = os.path.join(data, f"{split}.jsonl")
        if not os.path.exists(path):
            raise UsageError(f"no {split}.jsonl under {data}")
        return path
    return data


def cmd_gen(args) -> int:
    cfg = _merge_config(args, "gen")
    if cfg["family"] not in FAMILIES:
        raise UsageError(
            f"invalid family {cfg['family']!r}; valid: {', '.join(FAMILIES)}"
        )
    if cfg["n"] < 10:
        raise UsageError("need at least 10 samples for an 80/10/10 split")
    mats = synth_dataset(cfg["n"], cfg["family"], cfg["seed"])
    n_train = (cfg["n"] * 8) // 10
    n_val = (cfg["n"] - n_train) // 2
    os.makedirs(cfg["out"], exist_ok=True)
    splits = {
        "train": mats[:n_train],
        "val": mats[n_train : n_train + n_val],
        "test": mats[n_train + n_val :],
    }
    for name, part in splits.items():
        path = os.path.join(cfg["out"], f"{name}.jsonl")
        write_materials(path, part)
        print(f"wrote {len(part):6d} materials -> {path}")
    return EXIT_OK


def _model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig(
        feature_dim=int(cfg["feature_dim"]),
        rbf_bins=int(cfg["rbf_bins"]),
        rbf_delta=float(cfg["rbf_delta"]),
        n_plain_layers=int(cfg["plain_layers"]),
        n_deform_layers=int(cfg["deform_layers"]),
        knn_k=int(cfg["knn"]),
        fields=_parse_fields(cfg["fields"]),
        weight_limit=None if cfg["weight_limit"] in (None, "none")
        else float(cfg["weight_limit"]),
        deformation_step=float(cfg["step_scale"]),
        model=cfg["model"],
    )


def cmd_train(args) -> int:
    cfg = _merge_config(args, "train")
    _set_threads(int(cfg.get("threads") or 0))
    if cfg["loss"] not in LOSS_NAMES:
        raise UsageError(
            f"invalid loss {cfg['loss']!r}; valid: {', '.join(LOSS_NAMES)}"
        )
    if cfg["task"] not in (TASK_DENOISE, TASK_RECONSTRUCT):
        raise UsageError(f"invalid task {cfg['task']!r}")
    if cfg["model"] not in (MODEL_DEFORM, MODEL_FF):
        raise UsageError(f"invalid model {cfg['model']!r}")
    train_set = read_materials(_dataset_paths(cfg.get("data"), "train"),
                               wrap=cfg["wrap"])
    val_path = cfg.get("data")
    val_set = []
    if val_path and os.path.isdir(val_path):
        vp = os.path.join(val_path, "val.jsonl")
        if os.path.exists(vp):
            val_set = read_materials(vp, wrap=cfg["wrap"])

    model_cfg = _model_config_from(cfg)
    train_cfg = TrainConfig(
        sigma=float(cfg["sigma"]),
        lr=float(cfg["lr"]),
        batch_size=int(cfg["batch"]),
        total_steps=int(cfg["steps"]),
        loss=cfg["loss"],
        seed=int(cfg["seed"]),
        task=cfg["task"],
        val_every=int(cfg["val_every"]),
    )
    result = train(model_cfg, train_set, val_set, train_cfg)
    os.makedirs(cfg["out"], exist_ok=True)
    ckpt_path = os.path.join(cfg["out"], "checkpoint.json")
    save_checkpoint(result.checkpoint, ckpt_path)
    write_curve_csv(os.path.join(cfg["out"], "curve.csv"), result.curve)
    first = result.curve[0]["loss"]
    last = result.curve[-1]["loss"]
    print(f"trained {train_cfg.total_steps} steps; loss {first:.6g} -> {last:.6g}")
    print(f"checkpoint -> {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _merge_config(args, "eval")
    _set_threads(int(cfg.get("threads") or 0))
    ckpt_path = cfg.get("checkpoint")
    if not ckpt_path:
        raise UsageError("--checkpoint is required")
    if not os.path.exists(ckpt_path):
        raise UsageError(f"missing checkpoint {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    if cfg["baseline"] is not None:
        if cfg["baseline"] != "ff":
            raise UsageError("the only supported baseline is 'ff'")
        if ckpt.config.model != MODEL_FF:
            raise UsageError("checkpoint does not hold the feed-forward baseline")
    data = read_materials(_dataset_paths(cfg.get("data"), "test"),
                          wrap=cfg["wrap"])
    modes = [cfg["mode"]]
    if cfg["mode"] == "both":
        modes = [TASK_DENOISE, TASK_RECONSTRUCT]
    os.makedirs(cfg["out"], exist_ok=True)
    for mode in modes:
        if mode not in (TASK_DENOISE, TASK_RECONSTRUCT):
            raise UsageError(f"invalid mode {mode!r}")
        diagnostics = [] if cfg["diagnostics"] else None
        report = evaluate(
            ckpt.config, ckpt.parameters, data, float(cfg["sigma"]),
            int(cfg["seed"]), mode, diagnostics=diagnostics,
        )
        report.write_csv(os.path.join(cfg["out"], f"{mode}.csv"))
        report.write_aggregate(os.path.join(cfg["out"], f"{mode}.json"))
        if diagnostics is not None:
            write_diagnostics_csv(
                os.path.join(cfg["out"], f"{mode}_diagnostics.csv"), diagnostics
            )
        agg = report.aggregate_dict()
        print(f"{mode}: length={agg['length']:.4f} angle={agg['angle']:.4f} "
              f"n={agg['n']} failed={agg['failed']}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import SUITES, run_suites

    cfg = _merge_config(args, "check")
    names = list(SUITES) if cfg["suite"] in ("all", None) else [cfg["suite"]]
    for name in names:
        if name not in SUITES:
            raise UsageError(
                f"unknown suite {name!r}; valid: all, {', '.join(SUITES)}"
            )
    trials = cfg["trials"]
    results = run_suites(names, seed=int(cfg["seed"]),
                         trials=None if trials is None else int(trials))
    width = max(len(r.name) for r in results)
    failed = False
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  trials={r.trials}  "
              f"max_err={r.max_err:.3e}")
        if not r.passed:
            failed = True
            for f in r.failures[:5]:
                print("  replay: " + json.dumps(f))
    return EXIT_FAIL if failed else EXIT_OK


def cmd_inspect(args) -> int:
    cfg = _merge_config(args, "inspect")
    data = cfg.get("data")
    if not data or not os.path.exists(data):
        raise UsageError("--data must point to a dataset file")
    mats = read_materials(data, wrap=cfg["wrap"])
    idx = int(cfg["index"])
    if not 0 <= idx < len(mats):
        raise UsageError(f"index {idx} out of range ({len(mats)} materials)")
    m = mats[idx]
    p = lattice_params(m.rho)
    print(f"material {m.ident or idx}: {m.n_atoms} atoms, species "
          f"{sorted(set(m.z.tolist()))}")
    print(f"  a,b,c = {p.a:.4f}, {p.b:.4f}, {p.c:.4f} A")
    print(f"  alpha,beta,gamma = {p.alpha:.3f}, {p.beta:.3f}, {p.gamma:.3f} deg")
    print(f"  volume = {abs(np.linalg.det(m.rho)):.4f} A^3")
    policy = (Cutoff(float(cfg["cutoff"])) if cfg["cutoff"] is not None
              else KNN(int(cfg["knn"])))
    graph = build_graph(m, policy)
    print(f"  graph: {graph.n_edges} edges, {graph.n_triplets} triplets "
          f"({type(policy).__name__})")
    if cfg["dump_graph"]:
        write_graph_dump(cfg["dump_graph"], graph)
        print(f"  graph dump -> {cfg['dump_graph']}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellmend",
        description="equivariant lattice denoising and reconstruction "
        f"(kernel backend: {backend_name()})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flags win)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen", help="generate synthetic datasets")
    common(p)
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--n", type=int)
    p.add_argument("--out")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", help="dataset directory (train.jsonl [+ val.jsonl])")
    p.add_argument("--out")
    p.add_argument("--sigma", type=float)
    p.add_argument("--loss")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--task", choices=[TASK_DENOISE, TASK_RECONSTRUCT])
    p.add_argument("--val-every", dest="val_every", type=int)
    p.add_argument("--model", choices=[MODEL_DEFORM, MODEL_FF])
    p.add_argument("--fields", help="comma-separated field families: "
                   + ", ".join(FIELD_NAMES))
    p.add_argument("--symmetrize", action="store_const", const=True)
    p.add_argument("--weight-limit", dest="weight_limit", type=float)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--rbf-bins", dest="rbf_bins", type=int)
    p.add_argument("--rbf-delta", dest="rbf_delta", type=float)
    p.add_argument("--plain-layers", dest="plain_layers", type=int)
    p.add_argument("--deform-layers", dest="deform_layers", type=int)
    p.add_argument("--knn", type=int)
    p.add_argument("--step-scale", dest="step_scale", type=float,
                   help="deformation step size k")
    p.add_argument("--wrap", action="store_const", const=True,
                   help="repair out-of-range fractional coordinates")
    p.add_argument("--threads", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset directory (test.jsonl) or file")
    p.add_argument("--out")
    p.add_argument("--mode", choices=[TASK_DENOISE, TASK_RECONSTRUCT, "both"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--baseline", choices=["ff"])
    p.add_argument("--diagnostics", action="store_const", const=True,
                   help="write per-sample density/error-ratio CSV")
    p.add_argument("--wrap", action="store_const", const=True)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("check", help="run the property suites")
    common(p)
    p.add_argument("--suite")
    p.add_argument("--trials", type=int)

    p = sub.add_parser("inspect", help="summarise a material and its graph")
    common(p)
    p.add_argument("--data")
    p.add_argument("--index", type=int)
    p.add_argument("--knn", type=int)
    p.add_argument("--cutoff", type=float)
    p.add_argument("--dump-graph", dest="dump_graph")
    p.add_argument("--wrap", action="store_const", const=True)

    return parser


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "check": cmd_check,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
