"""Adaptive collocation loop: alternate residual training with resampling
the collocation set from the current model.

Round k trains on the set built in round k-1 (round 1 uses uniform points
over the problem box). Between rounds the whole collocation set is replaced
by model samples and the parameters warm-start the next round unchanged;
setting n_adaptive=1 therefore reduces exactly to plain uniform-collocation
training. Each round gets a fresh optimizer so stale moment estimates from
the previous point distribution do not leak across rounds.
"""

from __future__ import annotations

import numpy as np

from ..flow import FlowConfig, KRNet
from .adam import Adam
from .train import CollocationSet, TrainConfig, make_eval, train_epochs


def adda(problem, config: TrainConfig, *, model: KRNet | None = None,
         eval_fn=None, eval_every: int = 10, checkpoint_dir=None,
         verbose: bool = False) -> dict:
    """Run the full adaptive solve; returns model, per-epoch history, and
    per-round bookkeeping (collocation origin, sampler redraw counts)."""
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = KRNet(FlowConfig(**problem.flow), seed=config.seed)
    if eval_fn is None:
        eval_fn = make_eval(problem, config.n_validate, seed=config.seed + 1)

    colloc = CollocationSet(problem.sample_box(config.n_colloc, rng), origin=0)
    history: list[dict] = []
    rounds: list[dict] = []
    status = "ok"

    for k in range(1, config.n_adaptive + 1):
        out = train_epochs(
            model, problem, colloc.points,
            epochs=config.epochs, batch=config.batch, lr=config.lr,
            c_scale=config.c_scale, rng=rng,
            optimizer=Adam(model.store.size, config.lr),
            eval_fn=eval_fn, eval_every=eval_every, history=history,
            k_index=k, verbose=verbose)
        round_info = {"k": k, "origin": colloc.origin,
                      "status": out["status"], "redrawn": 0}
        if checkpoint_dir is not None:
            model.save(f"{checkpoint_dir}/round_{k:03d}.npz")
        if out["status"] != "ok":
            status = out["status"]
            rounds.append(round_info)
            break
        if k < config.n_adaptive:
            stats: dict = {}
            colloc = CollocationSet(
                model.sample(config.n_colloc, rng, stats=stats), origin=k)
            round_info["redrawn"] = stats.get("redrawn", 0)
        rounds.append(round_info)

    return {"model": model, "history": history, "rounds": rounds,
            "status": status, "collocation": colloc}
