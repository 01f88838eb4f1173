"""Command-line experiment runner.

Subcommands: estimate (staged likelihood training on a dataset), solve-fp
(adaptive steady-state solve), sample, eval, grid. One JSON config per run;
all artifacts land in the --out directory. Exit codes: 0 success, 2 config
error, 3 numeric divergence, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import density, report
from .autodiff.engine import NonFiniteError
from .flow import FlowConfig, KRNet, SingularLayerError
from .fp import TrainConfig, adda, make_eval, model_residual_values
from .problems import problem_catalog


class ConfigError(Exception):
    pass


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _lookup(cfg: dict, key: str):
    name = cfg.get(key)
    if not name:
        raise ConfigError(f"config needs a '{key}' entry")
    catalog = problem_catalog()
    if name not in catalog:
        raise ConfigError(f"unknown {key} '{name}'; have {sorted(catalog)}")
    return catalog[name]()


def _flow_config(defaults: dict, overrides: dict) -> FlowConfig:
    merged = {**defaults, **(overrides or {})}
    try:
        return FlowConfig(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad flow config: {e}") from e


def _train_config(defaults: dict, overrides: dict, seed: int) -> TrainConfig:
    merged = {**defaults, **(overrides or {}), "seed": seed}
    try:
        return TrainConfig(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad train config: {e}") from e


def _load_model(cfg: dict) -> KRNet:
    path = cfg.get("checkpoint")
    if not path:
        raise ConfigError("config needs a 'checkpoint' entry")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    return KRNet.load(path)


# ---------------------------------------------------------------- subcommands


def run_solve_fp(cfg: dict, seed: int, out: str, threads) -> int:
    problem = _lookup(cfg, "problem")
    if isinstance(problem, dict):
        raise ConfigError("solve-fp needs a differential problem, not a dataset")
    flow = _flow_config(problem.flow, cfg.get("flow", {}))
    train = _train_config(problem.train, cfg.get("train", {}), seed)
    model = KRNet(flow, seed=seed)
    ckdir = report.ensure_dir(os.path.join(out, "checkpoints"))
    result = adda(problem, train, model=model,
                  eval_every=int(cfg.get("eval_every", 10)),
                  checkpoint_dir=ckdir, verbose=bool(cfg.get("verbose", True)))

    report.write_csv(os.path.join(out, "history.csv"), result["history"],
                     ["k", "epoch", "loss", "kl", "delta", "seconds"])
    report.write_csv(os.path.join(out, "rounds.csv"), result["rounds"],
                     ["k", "origin", "status", "redrawn"])
    model.save(os.path.join(out, "model.npz"))
    report.plot_history(os.path.join(out, "history.png"), result["history"])

    evaluator = make_eval(problem, train.n_validate, seed=seed + 1)
    metrics = {"status": result["status"]}
    if evaluator is not None:
        metrics.update(evaluator(model))
    finite = [r["loss"] for r in result["history"] if np.isfinite(r["loss"])]
    metrics["final_loss"] = finite[-1] if finite else float("nan")
    rng = np.random.default_rng(seed + 2)
    metrics["residual_rms"] = float(np.sqrt(np.mean(
        model_residual_values(model, problem, problem.sample_box(1000, rng),
                              train.c_scale) ** 2)))
    report.write_json(os.path.join(out, "metrics.json"), metrics)
    if problem.dim == 2:
        exact = problem.ref.log_pdf if hasattr(problem.ref, "log_pdf") else None
        report.plot_density_2d(os.path.join(out, "density.png"), model,
                               problem.box, exact)
    report.write_manifest(out, cfg, seed, threads,
                          extra={"mode": "solve-fp", "metrics": metrics})
    if result["status"] != "ok" or not np.isfinite(metrics.get("kl", 0.0)):
        return EXIT_NUMERIC
    return EXIT_OK


def run_estimate(cfg: dict, seed: int, out: str, threads) -> int:
    entry = _lookup(cfg, "dataset")
    if not isinstance(entry, dict) or "dataset" not in entry:
        raise ConfigError("estimate needs a dataset entry (e.g. holes8d)")
    dataset = entry["dataset"]
    flow = _flow_config(entry["flow"], cfg.get("flow", {}))
    tr = {**entry["train"], **cfg.get("train", {})}

    rng = np.random.default_rng(seed)
    train_x = dataset.sample(int(tr["n_train"]), rng)
    val_x = dataset.sample(int(tr["n_validate"]), rng)
    ref_val = dataset.log_pdf(val_x)

    result = density.staged_estimate(
        train_x, val_x, ref_val, flow,
        stage_epochs=tuple(tr["stage_epochs"]), batch=int(tr["batch"]),
        lr=float(tr["lr"]), seed=seed,
        eval_every=int(cfg.get("eval_every", 1)),
        verbose=bool(cfg.get("verbose", True)))

    report.write_csv(os.path.join(out, "history.csv"), result["history"],
                     ["stage", "epoch", "loss", "ce_val", "kl", "delta", "seconds"])
    result["model"].save(os.path.join(out, "model.npz"))
    report.plot_history(os.path.join(out, "history.png"), result["history"])
    metrics = {"status": result["status"],
               "deltas": result["deltas"],
               "entropy": -float(np.mean(ref_val))}
    report.write_json(os.path.join(out, "metrics.json"), metrics)
    report.write_manifest(out, cfg, seed, threads,
                          extra={"mode": "estimate", "metrics": metrics})
    return EXIT_OK if result["status"] == "ok" else EXIT_NUMERIC


def run_sample(cfg: dict, seed: int, out: str, threads) -> int:
    model = _load_model(cfg)
    n = int(cfg.get("n", 10_000))
    rng = np.random.default_rng(seed)
    stats: dict = {}
    x = model.sample(n, rng, stats=stats)
    lp = model.log_pdf(x)
    report.write_array_csv(os.path.join(out, "samples.csv"), x, {"log_pdf": lp})
    if model.config.dim == 2:
        report.plot_samples_2d(os.path.join(out, "samples.png"), x)
    report.write_manifest(out, cfg, seed, threads,
                          extra={"mode": "sample", "n": n,
                                 "redrawn": stats.get("redrawn", 0)})
    return EXIT_OK if np.all(np.isfinite(lp)) else EXIT_NUMERIC


def run_eval(cfg: dict, seed: int, out: str, threads) -> int:
    model = _load_model(cfg)
    name = cfg.get("problem") or cfg.get("dataset")
    key = "problem" if cfg.get("problem") else "dataset"
    entry = _lookup(cfg, key)
    rng = np.random.default_rng(seed)
    n_val = int(cfg.get("n_validate", 50_000))

    if isinstance(entry, dict):
        ref = entry["dataset"]
        xv = ref.sample(n_val, rng)
    else:
        ref = entry.ref
        xv = ref.sample(n_val, rng)
    ref_lp = ref.log_pdf(xv)
    kl, stderr = density.kl_divergence_mc(ref_lp, model, xv)
    entropy = -float(np.mean(ref_lp))
    metrics = {"name": name, "n_validate": n_val, "kl": kl,
               "kl_stderr": stderr, "entropy": entropy,
               "delta": density.relative_error(kl, entropy),
               "ce_val": density.cross_entropy_loss(xv, model)}
    report.write_json(os.path.join(out, "metrics.json"), metrics)
    report.write_manifest(out, cfg, seed, threads,
                          extra={"mode": "eval", "metrics": metrics})
    return EXIT_OK if np.isfinite(kl) else EXIT_NUMERIC


def run_grid(cfg: dict, seed: int, out: str, threads) -> int:
    model = _load_model(cfg) if cfg.get("checkpoint") else None
    entry = _lookup(cfg, "problem") if cfg.get("problem") else None
    if model is None and entry is None:
        raise ConfigError("grid needs a 'checkpoint', a 'problem', or both")
    if isinstance(entry, dict):
        raise ConfigError("grid needs a differential problem, not a dataset")

    if cfg.get("box") is not None:
        box = np.atleast_2d(np.asarray(cfg["box"], dtype=np.float64))
    elif entry is not None:
        box = entry.box
    else:
        b = model.config.bound
        box = np.tile([-b, b], (model.config.dim, 1))
    resolution = int(cfg.get("resolution", 100))
    if resolution < 2:
        raise ConfigError("resolution must be at least 2")

    pts, axes = report.tensor_grid(box, resolution)
    columns: dict[str, np.ndarray] = {}
    metrics: dict = {"resolution": resolution, "points": pts.shape[0]}
    if model is not None:
        columns["log_pdf_model"] = model.log_pdf(pts)
        metrics["model_mass"] = report.trapezoid_mass(
            np.exp(columns["log_pdf_model"]), axes)
    if entry is not None and hasattr(entry.ref, "log_pdf"):
        columns["log_pdf_exact"] = entry.ref.log_pdf(pts)
        metrics["exact_mass"] = report.trapezoid_mass(
            np.exp(columns["log_pdf_exact"]), axes)
    if len(columns) == 2:
        gap = np.max(np.abs(np.exp(columns["log_pdf_model"])
                            - np.exp(columns["log_pdf_exact"])))
        metrics["max_density_gap"] = float(gap)

    report.write_array_csv(os.path.join(out, "grid.csv"), pts, columns)
    report.write_json(os.path.join(out, "metrics.json"), metrics)
    report.write_manifest(out, cfg, seed, threads,
                          extra={"mode": "grid", "metrics": metrics})
    return EXIT_OK


# ----------------------------------------------------------------- entrypoint


def apply_threads(n: int | None):
    """Cap BLAS/OpenMP pools; returns an object kept alive for the run."""
    if n is None:
        return None
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(n)
        return None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="krflow",
        description="Invertible-flow density estimation and steady-state "
                    "Fokker-Planck solving.")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode, help_text in [
        ("estimate", "staged maximum-likelihood training on a dataset"),
        ("solve-fp", "adaptive residual-loss solve of a stationary problem"),
        ("sample", "draw samples from a checkpointed model"),
        ("eval", "KL / relative-error metrics for a checkpoint"),
        ("grid", "tabulate model and exact densities on a tensor grid"),
    ]:
        p = sub.add_parser(mode, help=help_text)
        p.add_argument("--config", required=True, help="path to JSON config")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", default=None,
                       help="output directory (default: runs/<mode>)")
    return parser


_RUNNERS = {
    "estimate": run_estimate,
    "solve-fp": run_solve_fp,
    "sample": run_sample,
    "eval": run_eval,
    "grid": run_grid,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out or os.path.join("runs", args.mode)
    limiter = apply_threads(args.threads)  # noqa: F841  (held for run scope)
    try:
        cfg = load_config(args.config)
        report.ensure_dir(out)
        return _RUNNERS[args.mode](cfg, args.seed, out, args.threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, SingularLayerError, FloatingPointError) as e:
        # NonFiniteError and sampler exhaustion both arrive as RuntimeError
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
