"""Minimal neural-network engine: layers, backprop, SGD, metrics, checkpoints."""

from fedguard.nn.layers import (
    Activation,
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    GridReshape,
    MaxPool,
)
from fedguard.nn.network import Network
from fedguard.nn.metrics import Metrics, evaluate, compute_metrics
from fedguard.nn.training import (
    Splits,
    TrainingConfig,
    backward_and_step,
    bce_loss,
    bce_loss_grad,
    loss_and_grads,
    apply_gradients,
    lr_sweep,
    train,
)
from fedguard.nn.checkpoint import (
    load_checkpoint,
    save_checkpoint,
    write_history_csv,
)

__all__ = [
    "Activation",
    "Conv2d",
    "Dense",
    "Flatten",
    "GlobalAvgPool",
    "GridReshape",
    "MaxPool",
    "Metrics",
    "Network",
    "Splits",
    "TrainingConfig",
    "apply_gradients",
    "backward_and_step",
    "bce_loss",
    "bce_loss_grad",
    "compute_metrics",
    "evaluate",
    "load_checkpoint",
    "loss_and_grads",
    "lr_sweep",
    "save_checkpoint",
    "train",
    "write_history_csv",
]
