"""Command-line surface: generate, train, adapt, bench.

Every subcommand reads a versioned JSON config, validates inputs before any
compute, writes outputs atomically into --out, and is deterministic given
(config, seed). Exit codes: 0 success, 2 validation, 3 training divergence,
4 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
import warnings

import numpy as np

from .core import (
    ConfigError,
    HyperParams,
    SolverError,
    TrainingDivergedError,
    ValueGroups,
    load_embedding_csv,
    save_embedding_csv,
)
from .evalbench import (
    METHODS,
    BenchmarkSpec,
    ExperimentConfig,
    compute_group_bounds,
    make_synthetic_benchmark,
    needs_checkpoint,
    needs_source,
    r2_score,
    run_experiment,
    run_method,
    sample_support,
    save_report_csv,
    save_report_json,
)
from .order_learning import (
    Checkpoint,
    TrainSchedule,
    load_checkpoint,
    save_checkpoint,
    save_loss_trace,
    train_toy_embedder,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_TRAINING = 3
EXIT_SOLVER = 4

SCHEMA_VERSION = 1


def _atomic_write(path: str, write_fn) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _load_config(path: str, section: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config {path}: unsupported schema_version {version!r}")
    if section not in doc:
        raise ConfigError(f"config {path}: missing section {section!r}")
    if not isinstance(doc[section], dict):
        raise ConfigError(f"config {path}: section {section!r} must be an object")
    return doc[section]


def _require(cfg: dict, key: str, section: str):
    if key not in cfg:
        raise ConfigError(f"config section {section!r} is missing key {key!r}")
    return cfg[key]


def _existing_path(path: str) -> str:
    if not os.path.exists(path):
        raise ConfigError(f"input file not found: {path}")
    return path


def _hyperparams(cfg: dict) -> HyperParams:
    try:
        return HyperParams.from_dict(cfg.get("hyperparams", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad hyperparams: {exc}") from None


def _schedule(cfg: dict, seed_override: int | None) -> TrainSchedule:
    sched = cfg.get("train", {})
    known = {"lr", "steps", "batch_size", "seed", "embed_dim", "lr_decay"}
    unknown = set(sched) - known
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    if seed_override is not None:
        sched = dict(sched, seed=seed_override)
    try:
        return TrainSchedule(**sched)
    except TypeError as exc:
        raise ConfigError(f"bad train schedule: {exc}") from None


def cmd_generate(cfg: dict, out_dir: str, seed_override: int | None, verbose: bool) -> int:
    known = {
        "n_source", "n_target", "dim", "rotation_deg", "label_scale",
        "label_offset", "noise", "seed",
    }
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown generate keys: {sorted(unknown)}")
    if seed_override is not None:
        cfg = dict(cfg, seed=seed_override)
    try:
        spec = BenchmarkSpec(**cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad benchmark spec: {exc}") from None
    bench = make_synthetic_benchmark(spec)
    _atomic_write(os.path.join(out_dir, "source.csv"),
                  lambda p: save_embedding_csv(p, bench.source))
    _atomic_write(os.path.join(out_dir, "target.csv"),
                  lambda p: save_embedding_csv(p, bench.target))
    if verbose:
        print(f"wrote {spec.n_source} source and {spec.n_target} target samples to {out_dir}")
    return EXIT_OK


def cmd_train(cfg: dict, out_dir: str, seed_override: int | None, verbose: bool) -> int:
    features_path = _existing_path(str(_require(cfg, "features", "train")))
    k_r = int(cfg.get("k_r", 5))
    hp = _hyperparams(cfg)
    sched = _schedule(cfg, seed_override)
    data = load_embedding_csv(features_path)
    if "bounds" in cfg:
        lo, hi = cfg["bounds"]
        groups = ValueGroups(float(lo), float(hi), k_r)
    else:
        groups = compute_group_bounds(data.labels, k_r)
    result = train_toy_embedder(data.vectors, data.labels, groups, hp, sched)
    ckpt = Checkpoint(result.embedder, result.references, groups, hp, sched.seed, sched.steps)
    _atomic_write(os.path.join(out_dir, "checkpoint.json"),
                  lambda p: save_checkpoint(p, ckpt))
    _atomic_write(os.path.join(out_dir, "loss_trace.csv"),
                  lambda p: save_loss_trace(p, result.trace))
    if verbose:
        print(f"trained {sched.steps} steps; final loss {result.trace[-1, 1]:.6g}")
    return EXIT_OK


def cmd_adapt(cfg: dict, out_dir: str, seed_override: int | None, verbose: bool) -> int:
    method = str(_require(cfg, "method", "adapt"))
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    target_path = _existing_path(str(_require(cfg, "target", "adapt")))
    shots = int(cfg.get("shots", 5))
    k_r = int(cfg.get("k_r", 5))
    seed = int(cfg.get("seed", 0)) if seed_override is None else seed_override
    hp = _hyperparams(cfg)

    source = None
    if needs_source(method):
        source = load_embedding_csv(_existing_path(str(_require(cfg, "source", "adapt"))))
    checkpoint = None
    if needs_checkpoint(method):
        checkpoint = load_checkpoint(_existing_path(str(_require(cfg, "checkpoint", "adapt"))))

    target = load_embedding_csv(target_path)
    groups = compute_group_bounds(target.labels, k_r)
    notes: list[str] = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        support = sample_support(target, groups, shots, seed)
        query_idx = np.setdiff1d(np.arange(target.n), support.indices)
        preds = run_method(
            method, target, support, query_idx, hp, groups,
            source=source, checkpoint=checkpoint,
            ridge_lambda=float(cfg.get("ridge_lambda", 1e-6)),
            ft_steps=int(cfg.get("ft_steps", 200)), ft_lr=float(cfg.get("ft_lr", 0.05)),
            gol_ft_steps=int(cfg.get("gol_ft_steps", 120)),
            gol_ft_lr=float(cfg.get("gol_ft_lr", 0.02)),
            ft_seed=seed,
        )
    notes.extend(str(w.message) for w in caught)
    r2 = r2_score(target.labels[query_idx], preds)

    def write_preds(p):
        with open(p, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "true", "pred"])
            for qi, pred in zip(query_idx, preds):
                writer.writerow([target.ids[qi], "%.17g" % target.labels[qi], "%.17g" % pred])

    report = {
        "schema_version": SCHEMA_VERSION,
        "method": method,
        "r2": r2,
        "shots": shots,
        "k_r": k_r,
        "seed": seed,
        "n_queries": int(query_idx.size),
        "n_support": support.size,
        "warnings": notes,
    }

    def write_report(p):
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(report, fh, sort_keys=True, indent=1)
            fh.write("\n")

    _atomic_write(os.path.join(out_dir, "predictions.csv"), write_preds)
    _atomic_write(os.path.join(out_dir, "report.json"), write_report)
    if verbose:
        print(f"{method}: R2 = {r2:.4f} over {query_idx.size} queries")
    return EXIT_OK


def cmd_bench(cfg: dict, out_dir: str, seed_override: int | None, verbose: bool) -> int:
    source = load_embedding_csv(_existing_path(str(_require(cfg, "source", "bench"))))
    target = load_embedding_csv(_existing_path(str(_require(cfg, "target", "bench"))))
    methods = _require(cfg, "methods", "bench")
    repeats = int(cfg.get("repeats", 10))
    seeds = cfg.get("seeds", list(range(repeats)))
    try:
        config = ExperimentConfig(
            methods=tuple(methods),
            shots=int(cfg.get("shots", 5)),
            k_r=int(cfg.get("k_r", 5)),
            repeats=repeats,
            seeds=tuple(seeds),
            hyperparams=_hyperparams(cfg),
            train=_schedule(cfg, seed_override),
            ridge_lambda=float(cfg.get("ridge_lambda", 1e-6)),
            ft_steps=int(cfg.get("ft_steps", 200)),
            ft_lr=float(cfg.get("ft_lr", 0.05)),
            gol_ft_steps=int(cfg.get("gol_ft_steps", 120)),
            gol_ft_lr=float(cfg.get("gol_ft_lr", 0.02)),
            shot_sweep=tuple(cfg.get("shot_sweep", [])),
            kv_sweep=tuple(cfg.get("kv_sweep", [])),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad bench config: {exc}") from None
    report = run_experiment(config, source, target)
    _atomic_write(os.path.join(out_dir, "report.json"),
                  lambda p: save_report_json(p, report))
    _atomic_write(os.path.join(out_dir, "report.csv"),
                  lambda p: save_report_csv(p, report))
    if verbose:
        for r in report.results:
            mean = "n/a" if r.mean is None else f"{r.mean:.4f}"
            std = "n/a" if r.std is None else f"{r.std:.4f}"
            print(f"{r.method}: R2 = {mean} +/- {std}")
    return EXIT_OK


_COMMANDS = {
    "generate": ("generate", cmd_generate),
    "train": ("train", cmd_train),
    "adapt": ("adapt", cmd_adapt),
    "bench": ("bench", cmd_bench),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdreg",
        description="Few-shot cross-domain regression: ordered embeddings plus graph diffusion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (section, _) in _COMMANDS.items():
        p = sub.add_parser(name, help=f"run the {section} stage")
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    section, fn = _COMMANDS[args.command]
    try:
        cfg = _load_config(args.config, section)
        return fn(cfg, args.out, args.seed, args.verbose)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
