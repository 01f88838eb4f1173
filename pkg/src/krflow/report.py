"""Run artifacts: delimited tables, a reproducibility manifest, and figures.

Every CLI run lands in one output directory: history.csv with one row per
epoch, metrics.json with the headline numbers, manifest.json capturing the
exact configuration and seed, model checkpoints, and (where the dimension
allows) rendered figures next to the tables.
"""

from __future__ import annotations

import csv
import json
import os
from datetime import datetime, timezone

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def write_csv(path: str, rows: list[dict], columns: list[str] | None = None) -> None:
    """Rows of dicts to a comma-delimited file; column order is the first
    row's key order unless given explicitly."""
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def write_array_csv(path: str, x: np.ndarray, extra: dict[str, np.ndarray]) -> None:
    """Point coordinates x0..x{d-1} plus named per-point columns."""
    x = np.atleast_2d(x)
    cols = [f"x{i}" for i in range(x.shape[1])] + list(extra.keys())
    data = np.column_stack([x] + [np.asarray(v, dtype=np.float64) for v in extra.values()])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in data:
            writer.writerow([f"{v:.10g}" for v in row])


def write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not JSON-serializable: {type(v)}")


def write_manifest(out_dir: str, config: dict, seed: int, threads: int | None,
                   extra: dict | None = None) -> None:
    from . import __version__

    payload = {
        "version": __version__,
        "numpy": np.__version__,
        "created": datetime.now(timezone.utc).isoformat(),
        "seed": seed,
        "threads": threads,
        "config": config,
    }
    if extra:
        payload.update(extra)
    write_json(os.path.join(out_dir, "manifest.json"), payload)


def tensor_grid(box: np.ndarray, resolution: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Uniform tensor-product grid over a (d, 2) box; returns the flattened
    (resolution^d, d) points and the per-axis coordinate vectors."""
    box = np.atleast_2d(np.asarray(box, dtype=np.float64))
    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.reshape(-1) for m in mesh])
    return pts, axes


def trapezoid_mass(values: np.ndarray, axes: list[np.ndarray]) -> float:
    """Trapezoid-rule integral of a tensor grid of nonnegative values."""
    acc = values.reshape([len(a) for a in axes])
    for a in reversed(axes):
        acc = np.trapezoid(acc, a, axis=-1)
    return float(acc)


# ------------------------------------------------------------------- figures


def plot_history(path: str, rows: list[dict]) -> None:
    """Loss curve plus the relative-error track when present."""
    if not rows:
        return
    loss = np.array([r.get("loss", np.nan) for r in rows], dtype=np.float64)
    delta = np.array([r.get("delta", np.nan) for r in rows], dtype=np.float64)
    steps = np.arange(1, len(rows) + 1)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ok = np.isfinite(loss)
    if ok.any():
        ax.semilogy(steps[ok], np.maximum(loss[ok], 1e-300), lw=1.2, label="loss")
    ax.set_xlabel("epoch (cumulative)")
    ax.set_ylabel("loss")
    dk = np.isfinite(delta)
    if dk.any():
        ax2 = ax.twinx()
        ax2.semilogy(steps[dk], delta[dk], color="C3", lw=1.2, label="delta")
        ax2.set_ylabel("relative error", color="C3")
    # round boundaries, when the rows carry an adaptivity index
    ks = [r.get("k") for r in rows]
    if any(ks) and len(set(k for k in ks if k is not None)) > 1:
        prev = ks[0]
        for i, k in enumerate(ks):
            if k != prev:
                ax.axvline(i + 0.5, color="gray", lw=0.6, ls=":")
                prev = k
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_density_2d(path: str, model, box: np.ndarray, exact_log_pdf=None,
                    resolution: int = 120) -> None:
    """Filled contours of the model density, with a reference panel when an
    exact log-density is supplied. 2D models only."""
    pts, axes = tensor_grid(box, resolution)
    shape = (resolution, resolution)
    model_p = np.exp(model.log_pdf(pts)).reshape(shape)
    panels = [("model", model_p)]
    if exact_log_pdf is not None:
        panels.append(("exact", np.exp(exact_log_pdf(pts)).reshape(shape)))
    fig, axs = plt.subplots(1, len(panels), figsize=(5.2 * len(panels), 4.4),
                            squeeze=False)
    xg, yg = np.meshgrid(axes[0], axes[1], indexing="ij")
    for ax, (title, vals) in zip(axs[0], panels):
        cs = ax.contourf(xg, yg, vals, levels=30, cmap="viridis")
        fig.colorbar(cs, ax=ax, shrink=0.85)
        ax.set_title(title)
        ax.set_xlabel("x0")
        ax.set_ylabel("x1")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_samples_2d(path: str, samples: np.ndarray, box=None) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 4.6))
    ax.plot(samples[:, 0], samples[:, 1], ".", ms=1.0, alpha=0.4)
    if box is not None:
        box = np.atleast_2d(box)
        ax.set_xlim(*box[0])
        ax.set_ylim(*box[1])
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
