"""The four collaborative objectives plus their shared primitives.

All losses return scalar tensors. Targets (peer consensus, higher-layer
consensus, label/input similarity matrices) are gradient-detached constants,
so each student term only trains the parameters in its own scope:

* branch consensus (`l_out`): every branch learns toward the others; flows
  into trunk and head parameters.
* local classifiers (`l_mid_layer`): built on locality-scoped activations,
  so only layer i and its local head are updated.
* similarity alignment (`l_pull_push_layer`): pulls a layer's batch
  similarity toward the labels' and pushes it from the inputs'; only layer i
  and its projection are updated.
* kernel decorrelation (`l_kernel`): a direct function of selected conv
  kernels, so locality is automatic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import BranchSet, Network, forward_branches, local_activation, project
from .tensor import Tensor


class LossError(Exception):
    """Base class for loss-input problems."""


class InputError(LossError):
    """A loss input violates its precondition (not one-hot, not a distribution, ...)."""


class DegeneratePeerError(LossError):
    """Peer consensus needs at least two predictions."""


class LossConfigError(LossError):
    """The loss configuration is inconsistent with the network."""


NORM_EPS = 1e-12  # added to descriptor norms in cosine similarities
STD_GUARD = 1e-8  # floor on per-filter std in the kernel correlation

ACTIVE_KINDS = ("out", "mid", "pull_push", "kernel")


@dataclass(frozen=True)
class LossConfig:
    """Which objectives are active, plus all weights and temperatures."""

    active: frozenset = frozenset()
    K: int = 2
    T: float = 2.0
    alpha_out: float = 0.5
    alpha_mid: float = 0.05
    beta_mid: float = 0.05
    w_pp: float = 0.1
    lambda_kernel: float = 1.0
    kernel_groups: Optional[frozenset] = None  # None: the two highest group ids
    mid_include_self: bool = False
    pull_push_schedule: Optional[tuple] = None  # ((pull_i, push_i), ...) per layer

    def __post_init__(self):
        object.__setattr__(self, "active", frozenset(self.active))
        if self.kernel_groups is not None:
            object.__setattr__(self, "kernel_groups", frozenset(self.kernel_groups))

    def validate(self, net: Network) -> None:
        unknown = self.active - set(ACTIVE_KINDS)
        if unknown:
            raise LossConfigError(f"unknown loss kinds: {sorted(unknown)}")
        for name in ("T", "alpha_out", "alpha_mid", "beta_mid", "w_pp", "lambda_kernel"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise LossConfigError(f"{name} must be finite and nonnegative, got {v}")
        if self.T <= 0:
            raise LossConfigError(f"temperature must be positive, got {self.T}")
        if not 0.0 <= self.alpha_out <= 1.0:
            raise LossConfigError(f"alpha_out must lie in [0, 1], got {self.alpha_out}")
        if self.K < 1:
            raise LossConfigError(f"K must be >= 1, got {self.K}")
        if "out" in self.active and self.K ** net.n_dropout < 2:
            raise DegeneratePeerError(
                f"branch consensus needs K^n >= 2 predictions, got K={self.K}, n={net.n_dropout}"
            )
        if self.pull_push_schedule is not None and len(self.pull_push_schedule) != net.N:
            raise LossConfigError(
                f"pull/push schedule has {len(self.pull_push_schedule)} entries for {net.N} layers"
            )
        if "kernel" in self.active:
            groups = self.resolve_kernel_groups(net)
            if not any(b.group in groups for b in net.blocks):
                raise LossConfigError(
                    f"kernel decorrelation is active but groups {sorted(groups)} "
                    "select no conv layers"
                )

    def resolve_kernel_groups(self, net: Network) -> frozenset:
        if self.kernel_groups is not None:
            return self.kernel_groups
        groups = sorted({b.group for b in net.blocks})
        return frozenset(groups[-2:])

    def pull_push_weights(self, i: int, n_layers: int) -> tuple[float, float]:
        """Per-layer (pull, push) weights: pull ramps up with depth, push down."""
        if self.pull_push_schedule is not None:
            return self.pull_push_schedule[i - 1]
        frac = i / n_layers
        return self.w_pp * frac, self.w_pp * (1.0 - frac)


# -- cross-entropy building blocks --------------------------------------------


def _softmax_rows(z: np.ndarray, temperature: float) -> np.ndarray:
    shifted = (z - z.max(axis=-1, keepdims=True)) / temperature
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_one_hot(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 2:
        raise InputError(f"targets must be a batch of one-hot rows, got shape {y.shape}")
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)):
        raise InputError("targets must be exactly one-hot rows")
    return y


def _check_distribution(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    if q.ndim != 2:
        raise InputError(f"soft targets must be a batch of rows, got shape {q.shape}")
    if np.any(q < 0) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-6):
        raise InputError("soft-target rows must be nonnegative and sum to 1")
    return q


def j_hard(y: np.ndarray, z: Tensor, temperature: float = 1.0) -> Tensor:
    """Batch mean of the cross-entropy against one-hot targets at temperature T."""
    y = _check_one_hot(y)
    if y.shape != z.shape:
        raise InputError(f"targets {y.shape} do not match logits {z.shape}")
    logp = T.log_softmax_temperature(z, temperature)
    picked = T.mul(logp, T.constant(y.astype(z.dtype)))
    return T.scale(picked.sum(), -1.0 / y.shape[0])


def j_soft(q: np.ndarray, z: Tensor, temperature: float) -> Tensor:
    """Batch mean cross-entropy against detached soft targets at temperature T."""
    q = _check_distribution(q)
    if q.shape != z.shape:
        raise InputError(f"soft targets {q.shape} do not match logits {z.shape}")
    logp = T.log_softmax_temperature(z, temperature)
    picked = T.mul(logp, T.constant(q.astype(z.dtype)))
    return T.scale(picked.sum(), -1.0 / q.shape[0])


def peer_target(logits: Sequence, exclude: int, temperature: float) -> np.ndarray:
    """Detached softmax of the mean of all predictions except `exclude`."""
    if len(logits) < 2:
        raise DegeneratePeerError("peer target needs at least two predictions")
    if not 0 <= exclude < len(logits):
        raise InputError(f"exclude index {exclude} out of range 0..{len(logits) - 1}")
    arrays = [np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
              for j, z in enumerate(logits) if j != exclude]
    avg = sum(arrays) / len(arrays)
    return _softmax_rows(avg, temperature)


def l_out(y: np.ndarray, branches: BranchSet, cfg: LossConfig) -> Tensor:
    """Branch-averaged hard loss (T=1) plus consensus soft loss (T).

    Every branch's soft target is the detached softmax of the other branches'
    mean logits; gradients flow through all branches into head and trunk.
    """
    count = len(branches.logits)
    if count < 2:
        raise DegeneratePeerError(f"branch consensus needs >= 2 predictions, got {count}")
    values = branches.logit_values()
    total = None
    for i, z in enumerate(branches.logits):
        term = T.scale(j_hard(y, z, 1.0), cfg.alpha_out)
        if cfg.alpha_out < 1.0:
            q = peer_target(values, i, cfg.T)
            term = T.add(term, T.scale(j_soft(q, z, cfg.T), 1.0 - cfg.alpha_out))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / count)


def mid_target(z_list: Sequence, i: int, temperature: float,
               include_self: bool = False) -> Optional[np.ndarray]:
    """Detached softmax of the mean of the higher layers' local logits.

    Layer indices are 1-based; the topmost layer has no higher peers and gets
    no soft target (None). With include_self the layer's own logits join the
    average (non-default reading of the consensus).
    """
    n_layers = len(z_list)
    if not 1 <= i <= n_layers:
        raise InputError(f"layer index {i} out of range 1..{n_layers}")
    start = i - 1 if include_self else i
    chosen = [np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
              for z in z_list[start:]]
    if not chosen:
        return None
    avg = sum(chosen) / len(chosen)
    return _softmax_rows(avg, temperature)


def l_mid_layer(y: np.ndarray, z_list: Sequence[Tensor], i: int, cfg: LossConfig) -> Tensor:
    """Local classifier loss of layer i: hard term plus higher-layer consensus.

    z_list must hold the locality-scoped local logits of layers 1..N, so the
    gradient reaches only layer i's conv/norm parameters and local head i.
    """
    z = z_list[i - 1]
    total = T.scale(j_hard(y, z, cfg.T), cfg.alpha_mid)
    q = mid_target(z_list, i, cfg.T, cfg.mid_include_self)
    if q is not None and cfg.beta_mid > 0.0:
        total = T.add(total, T.scale(j_soft(q, z, cfg.T), cfg.beta_mid))
    return total


# -- batch similarity ----------------------------------------------------------


def std_descriptor(d: Tensor) -> Tensor:
    """Per-channel spatial std of each example, mean-centered across the batch."""
    if d.ndim != 4:
        raise InputError(f"descriptors need NCHW feature maps, got shape {d.shape}")
    mu = d.mean(axis=(2, 3), keepdims=True)
    centered = T.sub(d, mu)
    var = T.mul(centered, centered).mean(axis=(2, 3))
    sd = T.sqrt(var)  # N x C
    return T.sub(sd, sd.mean(axis=0, keepdims=True))


def similarity_matrix(descriptors: Tensor) -> Tensor:
    """Cosine similarities of centered descriptor rows, diagonal pinned to 1.

    Norms carry a tiny epsilon so all-zero rows (constant feature maps) give
    zero off-diagonal similarity instead of dividing by zero.
    """
    if descriptors.ndim != 2 or descriptors.shape[0] < 2:
        raise InputError(f"need at least 2 descriptor rows, got shape {descriptors.shape}")
    n = descriptors.shape[0]
    gram = T.matmul(descriptors, T.transpose(descriptors))
    sq = T.mul(descriptors, descriptors).sum(axis=1)
    norms = T.add_scalar(T.sqrt(sq), NORM_EPS)
    denom = T.matmul(norms.reshape((n, 1)), norms.reshape((1, n)))
    sim = T.div(gram, denom)
    eye = np.eye(n, dtype=descriptors.dtype)
    return T.add(T.mul(sim, T.constant(1.0 - eye)), T.constant(eye))


def target_similarity(y: np.ndarray, dtype=np.float64) -> Tensor:
    """Similarity matrix of the mean-centered one-hot label rows (a constant)."""
    y = _check_one_hot(y).astype(dtype)
    if y.shape[0] < 2:
        raise InputError("similarity needs a batch of at least 2")
    centered = y - y.mean(axis=0, keepdims=True)
    return similarity_matrix(T.constant(centered))


def input_similarity(x, dtype=np.float64) -> Tensor:
    """Similarity matrix of the raw input batch's std descriptors (a constant)."""
    xt = x if isinstance(x, Tensor) else T.constant(np.asarray(x, dtype=dtype))
    if xt.shape[0] < 2:
        raise InputError("similarity needs a batch of at least 2")
    return similarity_matrix(std_descriptor(T.detach(xt)))


def _frobenius(a: Tensor, b: Tensor) -> Tensor:
    diff = T.sub(a, b)
    return T.sqrt(T.mul(diff, diff).sum())


def l_pull_push_layer(x, y: np.ndarray, h_i: Tensor, i: int, net: Network, cfg: LossConfig,
                      sim_y: Optional[Tensor] = None, sim_x: Optional[Tensor] = None) -> Tensor:
    """Pull layer i's batch similarity toward the labels', push it from the inputs'.

    h_i must be the locality-scoped activation of layer i, so only that
    layer's parameters and its projection receive gradient. sim_y / sim_x may
    be passed in to share the constant target matrices across layers.
    """
    if h_i.shape[0] < 2:
        raise InputError("pull/push needs a batch of at least 2")
    s_feat = similarity_matrix(std_descriptor(project(net, i, h_i)))
    if sim_y is None:
        sim_y = target_similarity(y, dtype=h_i.dtype)
    if sim_x is None:
        sim_x = input_similarity(x, dtype=h_i.dtype)
    a_pull, a_push = cfg.pull_push_weights(i, net.N)
    pull = T.scale(_frobenius(s_feat, T.detach(sim_y)), a_pull)
    push = T.scale(_frobenius(s_feat, T.detach(sim_x)), a_push)
    return T.sub(pull, push)


# -- kernel decorrelation --------------------------------------------------------


def kernel_covariance(weight: Tensor) -> Tensor:
    """Correlation matrix of the flattened, row-normalized filters of one kernel."""
    if weight.ndim != 4:
        raise InputError(f"kernel must be F,C,KH,KW, got shape {weight.shape}")
    f = weight.shape[0]
    g = weight.size // f
    if g < 2:
        raise InputError(f"kernel rows need >= 2 entries to normalize, got {g}")
    rows = weight.reshape((f, g))
    mu = rows.mean(axis=1, keepdims=True)
    centered = T.sub(rows, mu)
    sd = T.sqrt(T.mul(centered, centered).mean(axis=1, keepdims=True))
    normalized = T.div(centered, T.clip_min(sd, STD_GUARD))
    return T.scale(T.matmul(normalized, T.transpose(normalized)), 1.0 / g)


def l_kernel(net: Network, cfg: LossConfig) -> Tensor:
    """Sum of off-diagonal Frobenius norms of the selected kernels' correlations.

    Only conv blocks whose group id is selected contribute; the loss touches
    kernels directly, so no other parameters receive gradient.
    """
    groups = cfg.resolve_kernel_groups(net)
    selected = [b for b in net.blocks if b.group in groups]
    if not selected:
        raise LossConfigError(f"no conv layers in kernel groups {sorted(groups)}")
    total = None
    for block in selected:
        cov = kernel_covariance(block.weight)
        f = cov.shape[0]
        off = T.mul(cov, T.constant(1.0 - np.eye(f, dtype=cov.dtype)))
        norm = T.sqrt(T.mul(off, off).sum())
        total = norm if total is None else T.add(total, norm)
    return total


# -- combined objective -----------------------------------------------------------


@dataclass
class TotalLossResult:
    total: Tensor
    breakdown: dict[str, float]
    logits: np.ndarray  # branch-mean logits, for training-error bookkeeping


def total_loss(x: np.ndarray, y: np.ndarray, net: Network, cfg: LossConfig, rng,
               update_running: bool = True) -> TotalLossResult:
    """Combined training objective for one batch.

    The classification term is the branch consensus when "out" is active and
    a plain single-dropout-forward cross-entropy otherwise; active extra
    terms are added on top. The breakdown maps each term to its value, with
    exactly 0.0 for inactive terms.
    """
    xt = T.constant(np.asarray(x, dtype=net.dtype))
    y = _check_one_hot(y)
    block_inputs, _, trunk_out = net.forward_trunk(xt, train=True, update_running=update_running)

    breakdown = {"hard": 0.0, "out": 0.0, "mid": 0.0, "pull_push": 0.0, "kernel": 0.0}
    if "out" in cfg.active:
        branches = forward_branches(net, trunk_out, cfg.K, rng)
        main = l_out(y, branches, cfg)
        breakdown["out"] = main.item()
    else:
        branches = forward_branches(net, trunk_out, 1, rng)
        main = j_hard(y, branches.logits[0], 1.0)
        breakdown["hard"] = main.item()
    total = main
    logits = np.mean(branches.logit_values(), axis=0)

    if "mid" in cfg.active or "pull_push" in cfg.active:
        local_h = [local_activation(net, i, block_inputs, train=True) for i in range(1, net.N + 1)]

    if "mid" in cfg.active:
        z_local = [net.local_heads[i].forward(local_h[i]) for i in range(net.N)]
        mid_total = None
        for i in range(1, net.N + 1):
            term = l_mid_layer(y, z_local, i, cfg)
            mid_total = term if mid_total is None else T.add(mid_total, term)
        breakdown["mid"] = mid_total.item()
        total = T.add(total, mid_total)

    if "pull_push" in cfg.active:
        sim_y = target_similarity(y, dtype=net.dtype)
        sim_x = input_similarity(xt, dtype=net.dtype)
        pp_total = None
        for i in range(1, net.N + 1):
            term = l_pull_push_layer(x, y, local_h[i - 1], i, net, cfg, sim_y=sim_y, sim_x=sim_x)
            pp_total = term if pp_total is None else T.add(pp_total, term)
        breakdown["pull_push"] = pp_total.item()
        total = T.add(total, pp_total)

    if "kernel" in cfg.active:
        k_total = T.scale(l_kernel(net, cfg), cfg.lambda_kernel)
        breakdown["kernel"] = k_total.item()
        total = T.add(total, k_total)

    return TotalLossResult(total=total, breakdown=breakdown, logits=logits)
