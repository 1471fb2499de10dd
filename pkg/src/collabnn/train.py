"""Training loop: SGD with momentum, milestone LR decay, label noise, metrics.

One experiment owns one network and one logical thread; all randomness comes
from seeded substreams, so (config, seed) fully determines the run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .losses import LossConfig, total_loss
from .nn import Network
from .rng import (
    STREAM_NOISE_INDEX,
    STREAM_NOISE_VALUE,
    STREAM_SHUFFLE,
    STREAM_MASKS,
    substream,
)


class TrainConfigError(Exception):
    """A training hyperparameter violates its invariant."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr0: float = 0.1
    milestones: tuple[int, ...] = (60, 120, 160)
    decay: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 1
    precision: int = 32

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))

    def validate(self) -> None:
        if self.epochs < 0:
            raise TrainConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 < 0:
            raise TrainConfigError(f"lr0 must be nonnegative, got {self.lr0}")
        # milestones beyond the final epoch are allowed: they are simply
        # never reached (the reference schedule outlives short runs)
        if list(self.milestones) != sorted(set(self.milestones)):
            raise TrainConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if not 0.0 < self.decay <= 1.0:
            raise TrainConfigError(f"decay must be in (0, 1], got {self.decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise TrainConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.precision not in (32, 64):
            raise TrainConfigError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass(frozen=True)
class NoiseConfig:
    level: float = 0.0
    reshuffle_per_epoch: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.level <= 1.0:
            raise TrainConfigError(f"noise level must be in [0, 1], got {self.level}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_terms: dict[str, float]
    train_error: float
    test_error: float
    corrupted: int


@dataclass
class RunMetrics:
    records: list[EpochRecord] = field(default_factory=list)
    initial_test_error: float = float("nan")
    best_test_error: float = float("nan")
    wall_time_s: float = 0.0

    def finalize(self) -> None:
        if self.records:
            self.best_test_error = min(r.test_error for r in self.records)
        else:
            self.best_test_error = self.initial_test_error


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """lr0 times decay^(number of milestones at or before this epoch)."""
    hits = sum(1 for ms in cfg.milestones if ms <= epoch)
    return cfg.lr0 * cfg.decay ** hits


def sgd_momentum_step(params: dict[str, T.Tensor], state: dict[str, np.ndarray],
                      lr: float, momentum: float, weight_decay: float) -> None:
    """v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v."""
    for name, p in params.items():
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state[name] = v
        g = p.grad if p.grad is not None else 0.0
        v *= momentum
        v += g + weight_decay * p.data
        p.data -= lr * v


def inject_label_noise(labels: np.ndarray, m: int, noise: NoiseConfig, epoch: int,
                       seed: int) -> tuple[np.ndarray, int]:
    """Replace floor(level*n) labels with draws uniform over all m classes.

    The corrupted index set is redrawn each epoch (or frozen to the epoch-0
    draw when reshuffle_per_epoch is off); replacement values are always
    redrawn per epoch and may repeat the true class. Deterministic given
    (seed, epoch). Returns the corrupted copy and the corruption count.
    """
    noise.validate()
    n = labels.shape[0]
    count = int(noise.level * n)
    if count == 0:
        return labels.copy(), 0
    index_epoch = epoch if noise.reshuffle_per_epoch else 0
    idx_rng = substream(seed, STREAM_NOISE_INDEX, index_epoch)
    indices = idx_rng.choice(n, size=count, replace=False)
    val_rng = substream(seed, STREAM_NOISE_VALUE, epoch)
    corrupted = labels.copy()
    corrupted[indices] = val_rng.integers(0, m, size=count)
    return corrupted, count


def _one_hot(labels: np.ndarray, m: int) -> np.ndarray:
    return np.eye(m)[labels]


def _batched_eval_logits(net: Network, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    outs = []
    for start in range(0, images.shape[0], chunk):
        xb = T.constant(np.asarray(images[start : start + chunk], dtype=net.dtype))
        _, _, trunk_out = net.forward_trunk(xb, train=False)
        outs.append(net.forward_head(trunk_out, None).data)
    return np.concatenate(outs, axis=0)


def evaluate(net: Network, images: np.ndarray, labels: np.ndarray) -> float:
    """Test error in percent: eval-mode forward, argmax with lowest-index ties."""
    logits = _batched_eval_logits(net, images)
    predictions = logits.argmax(axis=1)
    accuracy = float(np.mean(predictions == labels))
    return 100.0 * (1.0 - accuracy)


def train_epoch(net: Network, images: np.ndarray, labels: np.ndarray,
                cfg: TrainConfig, loss_cfg: LossConfig, epoch: int,
                opt_state: dict[str, np.ndarray]) -> tuple[float, dict[str, float], float]:
    """One pass over shuffled mini-batches; returns (mean loss, term means, train error %).

    Aborts with a diagnostic naming the offending term if any loss value goes
    non-finite. Trailing batches of size 1 are skipped (batch statistics and
    batch similarities need at least 2 examples).
    """
    n = images.shape[0]
    lr = lr_at_epoch(cfg, epoch)
    order = substream(cfg.seed, STREAM_SHUFFLE, epoch).permutation(n)
    params = net.parameters()

    loss_sum = 0.0
    term_sums: dict[str, float] = {}
    correct = 0
    seen = 0
    step = 0
    for start in range(0, n, cfg.batch_size):
        batch_idx = order[start : start + cfg.batch_size]
        if batch_idx.shape[0] < 2:
            continue
        xb = images[batch_idx]
        yb = labels[batch_idx]
        mask_rng = substream(cfg.seed, STREAM_MASKS, epoch, step)
        with T.Tape():
            result = total_loss(xb, _one_hot(yb, net.m), net, loss_cfg, mask_rng)
            value = result.total.item()
            for term, tv in result.breakdown.items():
                if not np.isfinite(tv):
                    raise T.NumericError(
                        f"loss term '{term}' is non-finite ({tv}) at epoch {epoch} step {step}"
                    )
            if not np.isfinite(value):
                raise T.NumericError(
                    f"total loss is non-finite ({value}) at epoch {epoch} step {step}"
                )
            for p in params.values():
                p.grad = None
            T.backward(result.total)
        sgd_momentum_step(params, opt_state, lr, cfg.momentum, cfg.weight_decay)

        bsz = batch_idx.shape[0]
        loss_sum += value * bsz
        for term, tv in result.breakdown.items():
            term_sums[term] = term_sums.get(term, 0.0) + tv * bsz
        correct += int(np.sum(result.logits.argmax(axis=1) == yb))
        seen += bsz
        step += 1

    mean_loss = loss_sum / seen
    term_means = {k: v / seen for k, v in term_sums.items()}
    train_error = 100.0 * (1.0 - correct / seen)
    return mean_loss, term_means, train_error


def run_experiment(net: Network, train_images: np.ndarray, train_labels: np.ndarray,
                   test_images: np.ndarray, test_labels: np.ndarray,
                   cfg: TrainConfig, loss_cfg: LossConfig,
                   noise_cfg: Optional[NoiseConfig] = None,
                   log=None) -> RunMetrics:
    """Full training run; evaluates after every epoch and tracks the best error."""
    cfg.validate()
    noise_cfg = noise_cfg or NoiseConfig()
    noise_cfg.validate()
    loss_cfg.validate(net)

    started = time.perf_counter()
    metrics = RunMetrics()
    metrics.initial_test_error = evaluate(net, test_images, test_labels)
    opt_state: dict[str, np.ndarray] = {}
    for epoch in range(cfg.epochs):
        epoch_labels, corrupted = inject_label_noise(
            train_labels, net.m, noise_cfg, epoch, cfg.seed
        )
        mean_loss, term_means, train_error = train_epoch(
            net, train_images, epoch_labels, cfg, loss_cfg, epoch, opt_state
        )
        test_error = evaluate(net, test_images, test_labels)
        record = EpochRecord(
            epoch=epoch,
            lr=lr_at_epoch(cfg, epoch),
            loss_total=mean_loss,
            loss_terms=term_means,
            train_error=train_error,
            test_error=test_error,
            corrupted=corrupted,
        )
        metrics.records.append(record)
        if log is not None:
            log(
                f"epoch {epoch:3d} lr {record.lr:.5g} loss {mean_loss:.4f} "
                f"train_err {train_error:.2f}% test_err {test_error:.2f}% "
                f"corrupted {corrupted}"
            )
    metrics.wall_time_s = time.perf_counter() - started
    metrics.finalize()
    return metrics
