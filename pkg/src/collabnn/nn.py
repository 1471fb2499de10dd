"""Layer stack with per-layer classifier heads, projections, and dropout branches.

A network is a trunk of conv blocks (convolution -> batch norm -> ReLU) and
pools, followed by a classifier head of linear and dropout layers. Every conv
block additionally owns a small local classifier head (adaptive max pool,
3x3 convolution, fully connected layer) and a learned 1x1 projection used by
the similarity-alignment objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .rng import STREAM_INIT, substream
from .tensor import Tensor


class BuildError(Exception):
    """The architecture does not shape-check end to end."""


LOCAL_HEAD_POOL = 4  # local heads pool activations to 4x4 before their conv


@dataclass(frozen=True)
class LayerSpec:
    """One entry of an architecture description.

    kind "conv" expands to convolution -> batch norm -> ReLU and carries
    channels / kernel / group; "pool" carries window; "linear" carries units;
    "dropout" carries rate; "flatten" separates trunk from head.
    """

    kind: str
    channels: int = 0
    kernel: int = 3
    group: int = 0
    window: int = 2
    units: int = 0
    rate: float = 0.5


def conv_spec(channels: int, kernel: int = 3, group: int = 0) -> LayerSpec:
    return LayerSpec("conv", channels=channels, kernel=kernel, group=group)


def pool_spec(window: int = 2) -> LayerSpec:
    return LayerSpec("pool", window=window)


def linear_spec(units: int) -> LayerSpec:
    return LayerSpec("linear", units=units)


def dropout_spec(rate: float = 0.5) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def flatten_spec() -> LayerSpec:
    return LayerSpec("flatten")


class ConvBlock:
    """Convolution (same padding, no bias) -> batch norm -> ReLU."""

    def __init__(self, weight: Tensor, gamma: Tensor, beta: Tensor, state: T.BatchNormState, group: int):
        self.weight = weight
        self.gamma = gamma
        self.beta = beta
        self.state = state
        self.group = group
        self.padding = weight.shape[2] // 2

    def forward(self, x: Tensor, train: bool, update_running: bool = True) -> Tensor:
        y = T.conv2d(x, self.weight, stride=1, padding=self.padding)
        y = T.batchnorm2d(y, self.gamma, self.beta, self.state, train, update_running)
        return T.relu(y)


class LocalHead:
    """Adaptive max pool to 4x4, a 3x3 convolution, then a fully connected layer."""

    def __init__(self, conv_weight: Tensor, fc_weight: Tensor, fc_bias: Tensor):
        self.conv_weight = conv_weight
        self.fc_weight = fc_weight
        self.fc_bias = fc_bias

    def forward(self, h: Tensor) -> Tensor:
        p = T.adaptive_maxpool2d(h, LOCAL_HEAD_POOL, LOCAL_HEAD_POOL)
        c = T.conv2d(p, self.conv_weight, stride=1, padding=1)
        flat = c.reshape((h.shape[0], -1))
        return T.linear(flat, self.fc_weight, self.fc_bias)


class HeadLinear:
    def __init__(self, weight: Tensor, bias: Tensor, final: bool):
        self.weight = weight
        self.bias = bias
        self.final = final


@dataclass
class BranchSet:
    """The K^n logit tensors from enumerating dropout masks across the head.

    Branch b uses the mask tuple given by the base-K digits of b (first
    dropout layer = most significant digit); all branches share the same
    trunk activations.
    """

    logits: list[Tensor]
    masks: list[list[np.ndarray]]  # masks[j][k]: k-th mask of dropout layer j
    K: int
    n: int

    def logit_values(self) -> list[np.ndarray]:
        return [z.data for z in self.logits]


class Network:
    """Trunk + head parameter container with forward methods."""

    def __init__(self, arch: Sequence[LayerSpec], m: int, input_shape: tuple[int, int, int],
                 seed: int, dtype=np.float32):
        self.arch = list(arch)
        self.m = m
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        self.trunk: list[tuple] = []       # ("conv", ConvBlock) | ("pool", window)
        self.blocks: list[ConvBlock] = []
        self.head: list[tuple] = []        # ("flatten",) | ("dropout", rate, width) | ("linear", HeadLinear)
        self.local_heads: list[LocalHead] = []
        self.projections: list[Tensor] = []
        self.dropout_specs: list[tuple[float, int]] = []  # (rate, width) per dropout layer
        self._build(substream(seed, STREAM_INIT))

    # -- construction ---------------------------------------------------------

    def _uniform(self, rng, shape, fan_in):
        bound = math.sqrt(1.0 / fan_in)
        return T.parameter(rng.uniform(-bound, bound, size=shape).astype(self.dtype))

    def _build(self, rng) -> None:
        specs = self.arch
        if not specs:
            raise BuildError("architecture is empty")
        flatten_positions = [i for i, s in enumerate(specs) if s.kind == "flatten"]
        if len(flatten_positions) != 1:
            raise BuildError("architecture must contain exactly one flatten layer")
        split = flatten_positions[0]
        trunk_specs, head_specs = specs[:split], specs[split + 1 :]
        if not any(s.kind == "conv" for s in trunk_specs):
            raise BuildError("trunk must contain at least one conv block")

        c, h, w = self.input_shape
        for s in trunk_specs:
            if s.kind == "conv":
                if s.channels < 1:
                    raise BuildError(f"conv block needs channels >= 1, got {s.channels}")
                if s.kernel % 2 == 0:
                    raise BuildError(f"conv kernel must be odd for same padding, got {s.kernel}")
                weight = self._uniform(rng, (s.channels, c, s.kernel, s.kernel), c * s.kernel * s.kernel)
                gamma = T.parameter(np.ones(s.channels, dtype=self.dtype))
                beta = T.parameter(np.zeros(s.channels, dtype=self.dtype))
                state = T.BatchNormState(s.channels, dtype=self.dtype)
                block = ConvBlock(weight, gamma, beta, state, s.group)
                self.trunk.append(("conv", block))
                self.blocks.append(block)
                c = s.channels
            elif s.kind == "pool":
                if s.window > h or s.window > w:
                    raise BuildError(f"pool window {s.window} exceeds activation {h}x{w}")
                self.trunk.append(("pool", s.window))
                h, w = (h - s.window) // s.window + 1, (w - s.window) // s.window + 1
            else:
                raise BuildError(f"layer kind {s.kind!r} not allowed in the trunk")
            if h < 1 or w < 1:
                raise BuildError("trunk pools reduce the activation below 1x1")

        width = c * h * w
        self.head.append(("flatten",))
        linear_specs = [s for s in head_specs if s.kind == "linear"]
        if not linear_specs:
            raise BuildError("head must contain at least one linear layer")
        if linear_specs[-1].units != self.m:
            raise BuildError(
                f"final linear layer has {linear_specs[-1].units} units, expected {self.m} classes"
            )
        seen_linear = 0
        for s in head_specs:
            if s.kind == "linear":
                if s.units < 1:
                    raise BuildError(f"linear layer needs units >= 1, got {s.units}")
                seen_linear += 1
                weight = self._uniform(rng, (width, s.units), width)
                bias = T.parameter(np.zeros(s.units, dtype=self.dtype))
                self.head.append(("linear", HeadLinear(weight, bias, seen_linear == len(linear_specs))))
                width = s.units
            elif s.kind == "dropout":
                if not 0.0 <= s.rate < 1.0:
                    raise BuildError(f"dropout rate must be in [0, 1), got {s.rate}")
                self.head.append(("dropout", s.rate, width))
                self.dropout_specs.append((s.rate, width))
            else:
                raise BuildError(f"layer kind {s.kind!r} not allowed in the head")

        for block in self.blocks:
            ch = block.weight.shape[0]
            conv_w = self._uniform(rng, (ch, ch, 3, 3), ch * 9)
            fc_in = ch * LOCAL_HEAD_POOL * LOCAL_HEAD_POOL
            fc_w = self._uniform(rng, (fc_in, self.m), fc_in)
            fc_b = T.parameter(np.zeros(self.m, dtype=self.dtype))
            self.local_heads.append(LocalHead(conv_w, fc_w, fc_b))
            ident = np.zeros((ch, ch, 1, 1), dtype=self.dtype)
            ident[np.arange(ch), np.arange(ch), 0, 0] = 1.0
            self.projections.append(T.parameter(ident))

    # -- introspection ----------------------------------------------------------

    @property
    def N(self) -> int:
        return len(self.blocks)

    @property
    def n_dropout(self) -> int:
        return len(self.dropout_specs)

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            params[f"block{i + 1}.conv.weight"] = block.weight
            params[f"block{i + 1}.bn.gamma"] = block.gamma
            params[f"block{i + 1}.bn.beta"] = block.beta
        li = 0
        for item in self.head:
            if item[0] == "linear":
                li += 1
                params[f"head.linear{li}.weight"] = item[1].weight
                params[f"head.linear{li}.bias"] = item[1].bias
        for i, lh in enumerate(self.local_heads):
            params[f"local_head{i + 1}.conv.weight"] = lh.conv_weight
            params[f"local_head{i + 1}.fc.weight"] = lh.fc_weight
            params[f"local_head{i + 1}.fc.bias"] = lh.fc_bias
        for i, proj in enumerate(self.projections):
            params[f"proj{i + 1}.weight"] = proj
        return params

    def block_param_names(self, i: int) -> set[str]:
        """Parameter names of trunk conv block i (1-based)."""
        return {f"block{i}.conv.weight", f"block{i}.bn.gamma", f"block{i}.bn.beta"}

    def local_head_param_names(self, i: int) -> set[str]:
        return {f"local_head{i}.conv.weight", f"local_head{i}.fc.weight", f"local_head{i}.fc.bias"}

    # -- forward ---------------------------------------------------------------

    def forward_trunk(self, x: Tensor, train: bool, update_running: bool = True):
        """Run the trunk; returns (block inputs, block outputs, trunk output).

        block_inputs[i] is the tensor feeding conv block i+1 (after any pools),
        which is what the locality-scoped losses detach.
        """
        if x.shape[1:] != self.input_shape:
            raise BuildError(f"input shape {x.shape[1:]} != configured {self.input_shape}")
        block_inputs: list[Tensor] = []
        block_outputs: list[Tensor] = []
        cur = x
        for item in self.trunk:
            if item[0] == "conv":
                block_inputs.append(cur)
                cur = item[1].forward(cur, train, update_running)
                block_outputs.append(cur)
            else:
                cur = T.maxpool2d(cur, item[1], item[1])
        return block_inputs, block_outputs, cur

    def forward_head(self, trunk_out: Tensor, masks: Optional[list[np.ndarray]]) -> Tensor:
        """Apply the classifier head; masks align with the dropout layers.

        masks=None runs the evaluation path (dropout disabled); inverted
        dropout at train time means no rescaling is needed here.
        """
        cur = trunk_out
        j = 0
        for item in self.head:
            if item[0] == "flatten":
                cur = cur.reshape((cur.shape[0], -1))
            elif item[0] == "dropout":
                if masks is not None:
                    cur = T.dropout_apply(cur, masks[j], item[1])
                j += 1
            else:
                layer = item[1]
                cur = T.linear(cur, layer.weight, layer.bias)
                if not layer.final:
                    cur = T.relu(cur)
        return cur

    def sample_masks(self, batch: int, K: int, rng) -> list[list[np.ndarray]]:
        """Draw K keep/drop masks per dropout layer, in layer-major order."""
        masks = []
        for rate, width in self.dropout_specs:
            masks.append(
                [(rng.random((batch, width)) >= rate).astype(self.dtype) for _ in range(K)]
            )
        return masks


def build_network(arch: Sequence[LayerSpec], m: int, input_shape: tuple[int, int, int],
                  seed: int, dtype=np.float32) -> Network:
    if m < 2:
        raise BuildError(f"need at least 2 classes, got {m}")
    return Network(arch, m, input_shape, seed, dtype)


def default_arch(channels: Sequence[int] = (8, 16, 16), hidden: int = 64, m: int = 4,
                 dropout_rate: float = 0.5) -> list[LayerSpec]:
    """Desk-scale stack: three conv blocks with two pools, one hidden linear,
    dropout before each head linear (so two dropout layers)."""
    return [
        conv_spec(channels[0], group=0),
        pool_spec(2),
        conv_spec(channels[1], group=1),
        pool_spec(2),
        conv_spec(channels[2], group=2),
        flatten_spec(),
        dropout_spec(dropout_rate),
        linear_spec(hidden),
        dropout_spec(dropout_rate),
        linear_spec(m),
    ]


def forward_branches(net: Network, trunk_out: Tensor, K: int, rng=None,
                     masks: Optional[list[list[np.ndarray]]] = None) -> BranchSet:
    """Evaluate the head once per element of the K-fold mask product.

    K masks are sampled per dropout layer (or taken from `masks`), and the
    head runs K^n times over the shared trunk output. K=1 is an ordinary
    single dropout forward.
    """
    if K < 1:
        raise T.ParameterError(f"branch count must be >= 1, got {K}")
    n = net.n_dropout
    if n < 1:
        raise BuildError("head has no dropout layers to branch over")
    if masks is None:
        if rng is None:
            raise T.UsageError("forward_branches needs an rng when masks are not given")
        masks = net.sample_masks(trunk_out.shape[0], K, rng)
    logits = []
    for b in range(K ** n):
        digits = []
        rem = b
        for _ in range(n):
            digits.append(rem % K)
            rem //= K
        digits.reverse()  # first dropout layer = most significant digit
        branch_masks = [masks[j][digits[j]] for j in range(n)]
        logits.append(net.forward_head(trunk_out, branch_masks))
    return BranchSet(logits=logits, masks=masks, K=K, n=n)


def forward_local_head(net: Network, i: int, h_i: Tensor) -> Tensor:
    """Local logits of layer i from a detached activation.

    Gradients from losses on the result reach only the local head's own
    parameters; pairing with a locality-scoped activation (see the losses
    module) is what lets layer i's weights receive gradient as well.
    """
    if not 1 <= i <= net.N:
        raise BuildError(f"layer index {i} out of range 1..{net.N}")
    return net.local_heads[i - 1].forward(T.detach(h_i))


def project(net: Network, i: int, h_i: Tensor) -> Tensor:
    """Apply the learned 1x1 channel-preserving projection of layer i."""
    if not 1 <= i <= net.N:
        raise BuildError(f"layer index {i} out of range 1..{net.N}")
    return T.conv2d(h_i, net.projections[i - 1], stride=1, padding=0)


def local_activation(net: Network, i: int, block_inputs: list[Tensor], train: bool) -> Tensor:
    """Recompute block i from its detached input: the locality-scoped view.

    Gradients through the result stop at block i's parameters; running
    batch-norm statistics are not updated a second time.
    """
    if not 1 <= i <= net.N:
        raise BuildError(f"layer index {i} out of range 1..{net.N}")
    return net.blocks[i - 1].forward(T.detach(block_inputs[i - 1]), train, update_running=False)
