"""Steady-state Fokker-Planck solver: residual loss, Adam, adaptive loop."""

from .adam import Adam, AdamState, adam_step
from .adda import adda
from .residual import (
    diffusion_pairs,
    loss,
    make_tape,
    model_residual_values,
    residual,
    residual_loss_grad,
    residual_values,
)
from .train import CollocationSet, TrainConfig, make_eval, train_epochs

__all__ = [
    "Adam",
    "AdamState",
    "CollocationSet",
    "TrainConfig",
    "adam_step",
    "adda",
    "diffusion_pairs",
    "loss",
    "make_eval",
    "make_tape",
    "model_residual_values",
    "residual",
    "residual_loss_grad",
    "residual_values",
    "train_epochs",
]
