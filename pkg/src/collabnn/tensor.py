"""Minimal dense tensor type with recorded forward ops and reverse-mode gradients.

Tensors wrap numpy arrays (float32 for training, float64 for verification;
both run the identical code path). Operations executed while a Tape is
active append nodes to it; ``backward`` replays the tape in reverse and
accumulates gradients into every reachable tensor that requires them.
Without an active tape, ops are plain numpy computations (inference mode).

A tape is confined to one logical thread and normally spans exactly one
forward + loss evaluation.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np


class TensorError(Exception):
    """Base class for tensor-engine errors."""


class DimensionError(TensorError):
    """Operand shapes are inconsistent with the operation."""


class ParameterError(TensorError):
    """An op parameter (stride, rate, temperature, ...) is out of range."""


class NumericError(TensorError):
    """Non-finite values where finite ones are required."""


class UsageError(TensorError):
    """The engine was driven incorrectly (e.g. backward on a non-scalar)."""


class StatsError(TensorError):
    """Batch statistics are degenerate (too few elements)."""


class InvalidCheckError(TensorError):
    """A gradient check was asked to verify a non-deterministic function."""


# Fault injection for negative-control testing of the gradient checker: one
# backward rule is deliberately scaled, which a correct finite-difference
# check must detect. "matmul_grad" sits on every loss path (linear layers,
# similarity gram matrices, kernel correlations); "conv2d_kernel_grad" only
# on convolutional ones.
_FAULTS = ("conv2d_kernel_grad", "matmul_grad")
_FAULT: Optional[str] = None


def set_fault(name: Optional[str]) -> None:
    global _FAULT
    if name is not None and name not in _FAULTS:
        raise ParameterError(f"unknown fault {name!r}")
    _FAULT = name


class TapeNode:
    __slots__ = ("kind", "out", "parents", "parent_ids", "run")

    def __init__(self, kind: str, out, parents: tuple, parent_ids: tuple, run: Callable[[], None]):
        self.kind = kind
        self.out = out
        self.parents = parents
        self.parent_ids = parent_ids
        self.run = run


class Tape:
    """Append-only record of executed ops; parents always precede children."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def add(self, kind: str, out, parents: tuple, run: Callable[[], None]) -> int:
        parent_ids = tuple(
            p.node for p in parents if p.node is not None and p.tape is self
        )
        self.nodes.append(TapeNode(kind, out, parents, parent_ids, run))
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense N-d array with an optional gradient buffer and tape handle."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.tape: Optional[Tape] = None
        self.node: Optional[int] = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"

    # -- gradient plumbing --------------------------------------------------

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, no tape parent: gradients do not flow through."""
        return Tensor(self.data)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add_scalar(self, other) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, other) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if _is_number(other):
            return add_scalar(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if _is_number(other) else div(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _is_number(x) -> bool:
    return isinstance(x, (int, float))


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _record(out: Tensor, kind: str, parents: tuple, run: Callable[[], None]) -> Tensor:
    """Attach `out` to the active tape when some parent participates in grads."""
    tape = active_tape()
    if tape is None:
        return out
    if not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out.tape = tape
    out.node = tape.add(kind, out, parents, run)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable tensor.

    Repeated calls accumulate; callers zero grads between steps. Tensors
    that do not feed the loss keep grad=None (relied on by locality checks).
    """
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.tape is None:
        return  # constant loss: nothing to propagate
    tape = loss.tape
    needed = {loss.node}
    order: list[TapeNode] = []
    for idx in range(loss.node, -1, -1):
        if idx not in needed:
            continue
        node = tape.nodes[idx]
        order.append(node)
        needed.update(node.parent_ids)
    # Reset intermediate grads so repeated calls re-derive them; only leaf
    # tensors (parameters, inputs) keep accumulating across calls.
    for node in order:
        node.out.grad = None
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in order:
        node.run()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise and structural ops -----------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def run():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _record(out, "add", (a, b), run)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def run():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _record(out, "sub", (a, b), run)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def run():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b_data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a_data, b.shape))

    return _record(out, "mul", (a, b), run)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    a_data, b_data = a.data, b.data

    def run():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b_data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a_data / (b_data * b_data), b.shape))

    return _record(out, "div", (a, b), run)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def run():
        if a.requires_grad:
            a.accumulate_grad(out.grad * c)

    return _record(out, "scale", (a,), run)


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + float(c))

    def run():
        if a.requires_grad:
            a.accumulate_grad(out.grad)

    return _record(out, "add_scalar", (a,), run)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))

    def run():
        if a.requires_grad:
            a.accumulate_grad(out.grad * mask)

    return _record(out, "relu", (a,), run)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    a_data = a.data

    def run():
        if a.requires_grad:
            a.accumulate_grad(out.grad / a_data)

    return _record(out, "log", (a,), run)


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)
    out = Tensor(root)
    # Guard the 1/sqrt blowup at exactly zero so degenerate inputs (constant
    # feature maps, perfectly matched similarity targets) stay finite.
    denom = 2.0 * np.maximum(root, 1e-12)

    def run():
        if a.requires_grad:
            a.accumulate_grad(out.grad / denom)

    return _record(out, "sqrt", (a,), run)


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes only where a >= floor."""
    floor = float(floor)
    out = Tensor(np.maximum(a.data, floor))
    mask = a.data >= floor

    def run():
        if a.requires_grad:
            a.accumulate_grad(out.grad * mask)

    return _record(out, "clip_min", (a,), run)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def run():
        g = out.grad
        if axis is None:
            g = np.broadcast_to(g.reshape((1,) * len(shape)), shape)
        elif not keepdims:
            g = np.broadcast_to(np.expand_dims(g, axis), shape)
        else:
            g = np.broadcast_to(g, shape)
        if a.requires_grad:
            a.accumulate_grad(np.ascontiguousarray(g))

    return _record(out, "sum", (a,), run)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    orig = a.shape

    def run():
        if a.requires_grad:
            a.accumulate_grad(out.grad.reshape(orig))

    return _record(out, "reshape", (a,), run)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T.copy())

    def run():
        if a.requires_grad:
            a.accumulate_grad(out.grad.T)

    return _record(out, "transpose", (a,), run)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    a_data, b_data = a.data, b.data

    def run():
        g = out.grad
        if a.requires_grad:
            da = g @ b_data.T
            if _FAULT == "matmul_grad":
                da = da * 1.1
            a.accumulate_grad(da)
        if b.requires_grad:
            b.accumulate_grad(a_data.T @ g)

    return _record(out, "matmul", (a, b), run)


def detach(t: Tensor) -> Tensor:
    return t.detach()


# -- neural-network ops ------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of row vectors: x @ weight + bias."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError(
            f"linear expects (N,D), (D,M), (M,), got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DimensionError(
            f"linear extents disagree: {x.shape} x {weight.shape} + {bias.shape}"
        )
    return add(matmul(x, weight), bias)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (no kernel flip, no bias)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW and FCKK, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if c != kc:
        raise DimensionError(f"input channels {c} != kernel channels {kc}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ParameterError(f"padding must be >= 0, got {padding}")
    span_h = h + 2 * padding - kh
    span_w = w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(
            f"conv2d output extents are not integral for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    ho = span_h // stride + 1
    wo = span_w // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # N,C,Ho,Wo,KH,KW
    kdata = kernel.data
    out = Tensor(np.einsum("nchwij,fcij->nfhw", windows, kdata, optimize=True))

    def run():
        g = out.grad
        if kernel.requires_grad:
            dk = np.einsum("nchwij,nfhw->fcij", windows, g, optimize=True)
            if _FAULT == "conv2d_kernel_grad":
                dk = dk * 1.1
            kernel.accumulate_grad(dk)
        if x.requires_grad:
            contrib = np.einsum("nfhw,fcij->nchwij", g, kdata, optimize=True)
            gpad = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += contrib[
                        :, :, :, :, i, j
                    ]
            if padding:
                x.accumulate_grad(gpad[:, :, padding : padding + h, padding : padding + w])
            else:
                x.accumulate_grad(gpad)

    return _record(out, "conv2d", (x, kernel), run)


def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Per-window maximum; ties route gradient to the first element row-major."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW, got {x.shape}")
    if stride is None:
        stride = window
    n, c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(f"window {window} larger than input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    views = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    views = views[:, :, ::stride, ::stride].reshape(n, c, ho, wo, window * window)
    idx = views.argmax(axis=-1)
    out = Tensor(np.take_along_axis(views, idx[..., None], axis=-1)[..., 0])

    def run():
        if not x.requires_grad:
            return
        g = out.grad
        ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=False)
        rows = hi * stride + idx // window
        cols = wi * stride + idx % window
        dx = np.zeros_like(x.data)
        np.add.at(dx, (ni, ci, rows, cols), g)
        x.accumulate_grad(dx)

    return _record(out, "maxpool2d", (x,), run)


def adaptive_maxpool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Max pool to a fixed output size, with per-cell windows floor(i*H/oh)..ceil((i+1)*H/oh)."""
    if x.ndim != 4:
        raise DimensionError(f"adaptive_maxpool2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out_data = np.empty((n, c, out_h, out_w), dtype=x.data.dtype)
    picks = []  # (a, b, hs, ws, argmax over the window, window width)
    for a in range(out_h):
        hs, he = (a * h) // out_h, -(-((a + 1) * h) // out_h)
        for b in range(out_w):
            ws, we = (b * w) // out_w, -(-((b + 1) * w) // out_w)
            sub = x.data[:, :, hs:he, ws:we]
            flat = sub.reshape(n, c, -1)
            am = flat.argmax(axis=-1)
            out_data[:, :, a, b] = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]
            picks.append((a, b, hs, ws, am, we - ws))
    out = Tensor(out_data)

    def run():
        if not x.requires_grad:
            return
        g = out.grad
        dx = np.zeros_like(x.data)
        ni, ci = np.indices((n, c))
        for a, b, hs, ws, am, width in picks:
            np.add.at(dx, (ni, ci, hs + am // width, ws + am % width), g[:, :, a, b])
        x.accumulate_grad(dx)

    return _record(out, "adaptive_maxpool2d", (x,), run)


class BatchNormState:
    """Running statistics for one batch-norm layer (population variance)."""

    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    train: bool,
    update_running: bool = True,
) -> Tensor:
    """Per-channel normalization by batch stats (train) or running stats (eval)."""
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta must have shape ({c},)")
    gamma_col = gamma.data.reshape(1, c, 1, 1)

    if train:
        m = n * h * w
        if m < 2:
            raise StatsError(f"batch statistics over {m} elements are degenerate")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            mom = state.momentum
            state.running_mean = ((1.0 - mom) * state.running_mean + mom * mean).astype(
                state.running_mean.dtype
            )
            state.running_var = ((1.0 - mom) * state.running_var + mom * var).astype(
                state.running_var.dtype
            )
        inv = 1.0 / np.sqrt(var + state.eps)
        inv_col = inv.reshape(1, c, 1, 1)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_col
        out = Tensor(gamma_col * xhat + beta.data.reshape(1, c, 1, 1))

        def run():
            g = out.grad
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = g * gamma_col
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                x.accumulate_grad(inv_col / m * (m * dxhat - s1 - xhat * s2))

        return _record(out, "batchnorm2d", (x, gamma, beta), run)

    inv = 1.0 / np.sqrt(state.running_var + state.eps)
    inv_col = inv.reshape(1, c, 1, 1)
    xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv_col
    out = Tensor(gamma_col * xhat + beta.data.reshape(1, c, 1, 1))

    def run_eval():
        g = out.grad
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x.accumulate_grad(g * gamma_col * inv_col)

    return _record(out, "batchnorm2d_eval", (x, gamma, beta), run_eval)


def dropout_apply(x: Tensor, mask: np.ndarray, rate: float) -> Tensor:
    """Inverted dropout with a caller-provided {0,1} mask: x * mask / (1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    mask = np.asarray(mask)
    if mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} != input shape {x.shape}")
    factor = mask.astype(x.data.dtype) / (1.0 - rate)
    out = Tensor(x.data * factor)

    def run():
        if x.requires_grad:
            x.accumulate_grad(out.grad * factor)

    return _record(out, "dropout", (x,), run)


def _check_logits(z: Tensor, temperature: float) -> None:
    if temperature <= 0.0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(z.data)):
        raise NumericError("softmax input contains non-finite values")


def softmax_temperature(z: Tensor, temperature: float = 1.0) -> Tensor:
    """Row softmax of z / T, computed with max-subtraction."""
    _check_logits(z, temperature)
    zd = z.data
    shifted = (zd - zd.max(axis=-1, keepdims=True)) / temperature
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def run():
        if z.requires_grad:
            g = out.grad
            inner = (g * p).sum(axis=-1, keepdims=True)
            z.accumulate_grad(p * (g - inner) / temperature)

    return _record(out, "softmax_temperature", (z,), run)


def log_softmax_temperature(z: Tensor, temperature: float = 1.0) -> Tensor:
    """log(softmax(z / T)); avoids the underflow of composing log after softmax."""
    _check_logits(z, temperature)
    zd = z.data
    shifted = (zd - zd.max(axis=-1, keepdims=True)) / temperature
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    out = Tensor(logp)
    p = np.exp(logp)

    def run():
        if z.requires_grad:
            g = out.grad
            z.accumulate_grad((g - p * g.sum(axis=-1, keepdims=True)) / temperature)

    return _record(out, "log_softmax_temperature", (z,), run)


# -- verification -------------------------------------------------------------


def finite_diff_check(f: Callable[[], Tensor], theta: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients of f.

    `f` must be a deterministic scalar function of `theta` (fixed masks and
    data, closed over), re-evaluable at perturbed parameter values. Relative
    error per coordinate is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    v1 = f()
    v2 = f()
    if v1.data.size != 1:
        raise UsageError("finite_diff_check requires a scalar-valued function")
    if not np.array_equal(v1.data, v2.data):
        raise InvalidCheckError(
            "function is not deterministic between evaluations; fix masks and seeds"
        )

    saved_grad = theta.grad
    theta.grad = None
    with Tape():
        loss = f()
        backward(loss)
    analytic = (
        theta.grad.copy() if theta.grad is not None else np.zeros_like(theta.data)
    )
    theta.grad = saved_grad

    flat = theta.data.flat
    aflat = analytic.reshape(-1)
    worst = 0.0
    for i in range(theta.data.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
        if err > worst:
            worst = err
    return worst
