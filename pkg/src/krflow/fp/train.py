"""Minibatch residual-loss training over a fixed collocation set.

One call to ``train_epochs`` is the inner loop of the adaptive solver: the
collocation points are reshuffled every epoch, split into equal minibatches,
and each minibatch drives one Adam update of the flow parameters. Validation
metrics (KL against the analytic reference, when one exists) are computed on
a cadence to keep desk runs cheap.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .adam import Adam
from .residual import residual_loss_grad


@dataclass(frozen=True)
class TrainConfig:
    """Settings for one solver run.

    n_colloc must be an exact multiple of batch so every epoch performs the
    same number of updates on disjoint shards.
    """

    n_colloc: int
    batch: int
    epochs: int
    n_adaptive: int = 1
    lr: float = 1e-3
    c_scale: float = 100.0
    seed: int = 0
    n_validate: int = 50_000

    def __post_init__(self):
        if self.n_colloc % self.batch != 0:
            raise ValueError("n_colloc must be divisible by batch")
        if self.c_scale <= 0:
            raise ValueError("c_scale must be positive")
        if self.epochs < 0 or self.n_adaptive < 1:
            raise ValueError("epochs must be >= 0 and n_adaptive >= 1")

    @property
    def n_batches(self) -> int:
        return self.n_colloc // self.batch


@dataclass
class CollocationSet:
    """Training points plus the adaptivity iteration that produced them
    (0 = uniform over the initial box)."""

    points: np.ndarray
    origin: int = 0

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if not np.all(np.isfinite(self.points)):
            raise ValueError("collocation points must be finite")


def make_eval(problem, n_validate: int, seed: int = 0):
    """Validation closure: MC KL(ref || model) and delta = KL / H on a fixed
    reference-distributed sample. Returns None when the problem has no
    sampleable reference."""
    ref = getattr(problem, "ref", None)
    if ref is None or not hasattr(ref, "sample"):
        return None
    rng = np.random.default_rng(seed)
    xv = ref.sample(n_validate, rng)
    ref_lp = ref.log_pdf(xv)
    entropy = -float(np.mean(ref_lp))

    def eval_fn(model) -> dict:
        kl = float(np.mean(ref_lp - model.log_pdf(xv)))
        return {"kl": kl, "delta": kl / entropy}

    return eval_fn


def train_epochs(model, problem, points: np.ndarray, *, epochs: int,
                 batch: int, lr: float, c_scale: float = 100.0, rng=None,
                 optimizer: Adam | None = None, eval_fn=None,
                 eval_every: int = 10, history: list | None = None,
                 k_index: int = 1, verbose: bool = False) -> dict:
    """Run ``epochs`` passes of minibatch Adam on the residual loss.

    The shard assignment is re-randomized every epoch. On a non-finite loss
    or gradient the parameters are rolled back to the start of the offending
    epoch and training stops with status "non-finite".
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if n % batch != 0:
        raise ValueError("point count must be divisible by batch")
    if rng is None:
        rng = np.random.default_rng(0)
    opt = optimizer if optimizer is not None else Adam(model.store.size, lr)
    rows = history if history is not None else []
    n_batches = n // batch
    status = "ok"
    epoch = 0

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        snapshot = model.store.flat.copy()
        perm = rng.permutation(n)
        epoch_loss = 0.0
        bad = False
        for b in range(n_batches):
            xb = points[perm[b * batch:(b + 1) * batch]]
            lv, grad = residual_loss_grad(model, problem, xb, c_scale)
            if not (np.isfinite(lv) and np.all(np.isfinite(grad))):
                model.store.flat[:] = snapshot
                status = "non-finite"
                bad = True
                break
            opt.step(model.store.flat, grad)
            epoch_loss += lv
        if bad:
            rows.append({"k": k_index, "epoch": epoch, "loss": float("nan"),
                         "kl": float("nan"), "delta": float("nan"),
                         "seconds": time.perf_counter() - t0})
            break
        metrics = {"kl": float("nan"), "delta": float("nan")}
        if eval_fn is not None and (epoch % eval_every == 0 or epoch == epochs):
            metrics.update(eval_fn(model))
        row = {"k": k_index, "epoch": epoch, "loss": epoch_loss / n_batches,
               "kl": metrics["kl"], "delta": metrics["delta"],
               "seconds": time.perf_counter() - t0}
        rows.append(row)
        if verbose and (epoch % eval_every == 0 or epoch == epochs):
            print(f"[k={k_index}] epoch {epoch}/{epochs} "
                  f"loss={row['loss']:.4e} kl={row['kl']:.4e}")

    return {"status": status, "history": rows, "optimizer": opt,
            "epochs_run": epoch}
