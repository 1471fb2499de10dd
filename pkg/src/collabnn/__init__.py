"""Collaborative training objectives inside a single CNN, with a minimal
reverse-mode tensor engine, a training harness, and verification tooling."""

from .losses import (
    LossConfig,
    j_hard,
    j_soft,
    kernel_covariance,
    l_kernel,
    l_mid_layer,
    l_out,
    l_pull_push_layer,
    mid_target,
    peer_target,
    similarity_matrix,
    std_descriptor,
    target_similarity,
    input_similarity,
    total_loss,
)
from .nn import (
    BranchSet,
    LayerSpec,
    Network,
    build_network,
    default_arch,
    forward_branches,
    forward_local_head,
    project,
)
from .tensor import Tape, Tensor, backward, detach, finite_diff_check, softmax_temperature
from .train import (
    NoiseConfig,
    RunMetrics,
    TrainConfig,
    evaluate,
    inject_label_noise,
    lr_at_epoch,
    run_experiment,
    sgd_momentum_step,
    train_epoch,
)

__version__ = "0.1.0"

__all__ = [
    "BranchSet",
    "LayerSpec",
    "LossConfig",
    "Network",
    "NoiseConfig",
    "RunMetrics",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_network",
    "default_arch",
    "detach",
    "evaluate",
    "finite_diff_check",
    "forward_branches",
    "forward_local_head",
    "inject_label_noise",
    "input_similarity",
    "j_hard",
    "j_soft",
    "kernel_covariance",
    "l_kernel",
    "l_mid_layer",
    "l_out",
    "l_pull_push_layer",
    "lr_at_epoch",
    "mid_target",
    "peer_target",
    "project",
    "run_experiment",
    "sgd_momentum_step",
    "similarity_matrix",
    "softmax_temperature",
    "std_descriptor",
    "target_similarity",
    "total_loss",
    "train_epoch",
]
