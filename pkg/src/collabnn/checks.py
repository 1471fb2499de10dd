"""Gradient verification for the training objectives.

Runs finite-difference checks over every parameter in each objective's scope
and strict locality checks (out-of-scope parameters must receive exactly no
gradient). Soft targets are frozen at the base point inside the check
closures: the implemented losses treat them as detached constants, so that
is the gradient being verified.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import losses as L
from . import nn as N
from . import tensor as T
from .losses import LossConfig
from .nn import Network
from .rng import substream
from .tensor import Tape, Tensor, backward


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    locality_violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= 1e-4 and not self.locality_violations


def toy_network(seed: int = 0, m: int = 4, channels=(8, 8, 8), hidden: int = 16,
                input_shape=(1, 16, 16)) -> Network:
    """Small 64-bit network for verification runs."""
    arch = [
        N.conv_spec(channels[0], group=0),
        N.pool_spec(2),
        N.conv_spec(channels[1], group=1),
        N.pool_spec(2),
        N.conv_spec(channels[2], group=2),
        N.flatten_spec(),
        N.dropout_spec(0.5),
        N.linear_spec(hidden),
        N.dropout_spec(0.5),
        N.linear_spec(m),
    ]
    return N.build_network(arch, m, input_shape, seed, np.float64)


def toy_batch(net: Network, batch: int = 4, seed: int = 1):
    rng = substream(seed, 1000)
    x = rng.random((batch,) + net.input_shape)
    labels = rng.integers(0, net.m, size=batch)
    y = np.eye(net.m)[labels]
    return x, y


def _zero_all_grads(net: Network) -> None:
    for p in net.parameters().values():
        p.grad = None


def _grad_errors(f: Callable[[], Tensor], params: dict[str, Tensor], net: Network,
                 h: float) -> dict[str, float]:
    """Finite-difference errors of f for each parameter, sharing one backward."""
    v1 = f().item()
    v2 = f().item()
    if v1 != v2:
        raise T.InvalidCheckError("check closure is not deterministic")
    _zero_all_grads(net)
    with Tape():
        backward(f())
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    _zero_all_grads(net)

    errors = {}
    for name, p in params.items():
        flat = p.data.flat
        aflat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(p.data.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
            worst = max(worst, err)
        errors[name] = worst
    return errors


def _locality_violations(f: Callable[[], Tensor], net: Network, scope: set[str]) -> list[str]:
    """Names of parameters outside `scope` that received any gradient."""
    _zero_all_grads(net)
    with Tape():
        backward(f())
    bad = []
    for name, p in net.parameters().items():
        if name in scope:
            continue
        if p.grad is not None and np.any(p.grad != 0.0):
            bad.append(name)
    _zero_all_grads(net)
    return bad


def _scoped_params(net: Network, scope: set[str]) -> dict[str, Tensor]:
    params = net.parameters()
    return {name: params[name] for name in sorted(scope)}


def _trunk_and_head_names(net: Network) -> set[str]:
    names = set()
    for i in range(1, net.N + 1):
        names |= net.block_param_names(i)
    for name in net.parameters():
        if name.startswith("head."):
            names.add(name)
    return names


# -- closures with frozen soft targets ----------------------------------------


def _out_closure(net: Network, x: np.ndarray, y: np.ndarray, cfg: LossConfig):
    """Branch-consensus loss with fixed masks and targets frozen at the base point."""
    xt = T.constant(np.asarray(x, dtype=net.dtype))
    masks = net.sample_masks(x.shape[0], cfg.K, substream(net.seed, 2000))

    def forward_logits():
        _, _, trunk_out = net.forward_trunk(xt, train=True, update_running=False)
        return N.forward_branches(net, trunk_out, cfg.K, masks=masks).logits

    base = [z.data.copy() for z in forward_logits()]
    q_frozen = [L.peer_target(base, i, cfg.T) for i in range(len(base))]

    def f() -> Tensor:
        logits = forward_logits()
        total = None
        for i, z in enumerate(logits):
            term = T.scale(L.j_hard(y, z, 1.0), cfg.alpha_out)
            if cfg.alpha_out < 1.0:
                term = T.add(term, T.scale(L.j_soft(q_frozen[i], z, cfg.T), 1.0 - cfg.alpha_out))
            total = term if total is None else T.add(total, term)
        return T.scale(total, 1.0 / len(logits))

    reference = L.l_out(y, N.forward_branches(
        net, net.forward_trunk(xt, train=True, update_running=False)[2], cfg.K, masks=masks
    ), cfg).item()
    assert abs(f().item() - reference) < 1e-12, "frozen-target closure drifted from the loss"
    return f


def _block_input_value(net: Network, i: int, x: np.ndarray) -> Tensor:
    """Value of the tensor feeding block i; constant under in-scope perturbations."""
    xt = T.constant(np.asarray(x, dtype=net.dtype))
    block_inputs, _, _ = net.forward_trunk(xt, train=True, update_running=False)
    return T.constant(block_inputs[i - 1].data.copy())


def _mid_closure(net: Network, x: np.ndarray, y: np.ndarray, cfg: LossConfig, i: int):
    """Layer-i local classifier loss with the consensus target frozen."""
    xt = T.constant(np.asarray(x, dtype=net.dtype))
    block_inputs, _, _ = net.forward_trunk(xt, train=True, update_running=False)
    z_base = [
        net.local_heads[j].forward(
            N.local_activation(net, j + 1, block_inputs, train=True)
        ).data.copy()
        for j in range(net.N)
    ]
    q_frozen = L.mid_target(z_base, i, cfg.T, cfg.mid_include_self)
    feed = T.constant(block_inputs[i - 1].data.copy())

    def f() -> Tensor:
        h = net.blocks[i - 1].forward(feed, train=True, update_running=False)
        z = net.local_heads[i - 1].forward(h)
        total = T.scale(L.j_hard(y, z, cfg.T), cfg.alpha_mid)
        if q_frozen is not None and cfg.beta_mid > 0.0:
            total = T.add(total, T.scale(L.j_soft(q_frozen, z, cfg.T), cfg.beta_mid))
        return total

    return f


def _pull_push_closure(net: Network, x: np.ndarray, y: np.ndarray, cfg: LossConfig, i: int):
    feed = _block_input_value(net, i, x)

    def f() -> Tensor:
        h = net.blocks[i - 1].forward(feed, train=True, update_running=False)
        return L.l_pull_push_layer(x, y, h, i, net, cfg)

    return f


def _kernel_closure(net: Network, cfg: LossConfig):
    def f() -> Tensor:
        return L.l_kernel(net, cfg)

    return f


# -- public entry points --------------------------------------------------------


def run_gradient_checks(net: Network, x: np.ndarray, y: np.ndarray, cfg: LossConfig,
                        h: float = 1e-5, kinds: Optional[set] = None) -> list[CheckResult]:
    """Finite-difference + locality checks for every active objective.

    Returns one result per objective (and per layer for the layer-scoped
    ones); a result passes when its max relative error is <= 1e-4 and no
    out-of-scope parameter received gradient.
    """
    kinds = set(kinds if kinds is not None else cfg.active or {"out", "mid", "pull_push", "kernel"})
    results = []

    if "out" in kinds:
        scope = _trunk_and_head_names(net)
        f = _out_closure(net, x, y, cfg)
        errors = _grad_errors(f, _scoped_params(net, scope), net, h)
        results.append(CheckResult("l_out", max(errors.values()), errors))

    if "mid" in kinds:
        for i in range(1, net.N + 1):
            scope = net.block_param_names(i) | net.local_head_param_names(i)
            f = _mid_closure(net, x, y, cfg, i)
            errors = _grad_errors(f, _scoped_params(net, scope), net, h)
            violations = _locality_violations(f, net, scope)
            results.append(CheckResult(f"l_mid[{i}]", max(errors.values()), errors, violations))

    if "pull_push" in kinds:
        for i in range(1, net.N + 1):
            scope = net.block_param_names(i) | {f"proj{i}.weight"}
            f = _pull_push_closure(net, x, y, cfg, i)
            errors = _grad_errors(f, _scoped_params(net, scope), net, h)
            violations = _locality_violations(f, net, scope)
            results.append(
                CheckResult(f"l_pull_push[{i}]", max(errors.values()), errors, violations)
            )

    if "kernel" in kinds:
        groups = cfg.resolve_kernel_groups(net)
        scope = {
            f"block{i + 1}.conv.weight"
            for i, b in enumerate(net.blocks)
            if b.group in groups
        }
        f = _kernel_closure(net, cfg)
        errors = _grad_errors(f, _scoped_params(net, scope), net, h)
        violations = _locality_violations(f, net, scope)
        results.append(CheckResult("l_kernel", max(errors.values()), errors, violations))

    return results
