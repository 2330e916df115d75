"""Differentiable operations for the branched CNN and its learnable front-end.

Each op computes its forward value with numpy and, when a graph is active and an
input requires grad, records a closure producing the input gradients. Only
bias addition broadcasts; every other binary op needs equal shapes.
"""
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericFailure, ShapeError
from .tensor import Tensor, current_graph


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericFailure(f"{op} produced non-finite values")
    out = Tensor(data)
    graph = current_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(op, inputs, out, backward_fn)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _result("scale", a.data * factor, (a,), lambda g: (g * factor,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[:, c, ...] + bias[c]; the only broadcasting op."""
    if bias.ndim != 1 or x.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match axis 1 of {x.shape}")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    reduce_axes = tuple(i for i in range(x.ndim) if i != 1)
    return _result(
        "add_bias",
        x.data + bias.data.reshape(shape),
        (x, bias),
        lambda g: (g, g.sum(axis=reduce_axes)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sum_all(x: Tensor) -> Tensor:
    return _result("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _result("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# ---------------------------------------------------------------- structural

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward_fn)


def flip(x: Tensor, axis: int = -1) -> Tensor:
    return _result("flip", np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis).copy(),))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """x[:, start:stop]; how each branch takes its own front-end band."""
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel_slice: [{start}, {stop}) outside {x.shape[1]} channels")

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return _result("channel_slice", x.data[:, start:stop].copy(), (x,), backward_fn)


def gather(params: Tensor, index: np.ndarray, sign: np.ndarray) -> Tensor:
    """out[n] = sign[n] * params[index[n]]; gradients of shared entries are summed."""
    index = np.asarray(index, dtype=np.intp)
    sign = np.asarray(sign, dtype=np.float64)

    def backward_fn(g):
        gp = np.zeros_like(params.data)
        np.add.at(gp, index, sign * g)
        return (gp,)

    return _result("gather", sign * params.data[index], (params,), backward_fn)


def gammatone(params: Tensor, length: int) -> Tensor:
    """g(n) = alpha * t^(eta-1) * exp(-2 pi beta t) * cos(2 pi f t) with t = n + 1.

    params = [alpha, eta, beta, f] in per-sample units; phase is fixed at zero.
    """
    alpha, eta, beta, f = params.data
    t = np.arange(1, length + 1, dtype=np.float64)
    base = t ** (eta - 1) * np.exp(-2 * np.pi * beta * t)
    cos = np.cos(2 * np.pi * f * t)
    g = alpha * base * cos

    def backward_fn(up):
        d_alpha = base * cos
        d_eta = g * np.log(t)
        d_beta = -2 * np.pi * t * g
        d_f = -2 * np.pi * t * alpha * base * np.sin(2 * np.pi * f * t)
        return (np.array([up @ d_alpha, up @ d_eta, up @ d_beta, up @ d_f]),)

    return _result("gammatone", g, (params,), backward_fn)


# ---------------------------------------------------------------- convolution

def _pad_window(x: np.ndarray, length: int, offset: int):
    left, right = length - 1 - offset, offset
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(left, right)])
    return xp, left


def conv1d(x: Tensor, kernels: Tensor, offset: int = None) -> Tensor:
    """Multi-channel same-length convolution.

    z[o](n) = sum_c sum_i w[o, c, i] * x[c](n + offset - i), with offset
    defaulting to floor((K-1)/2). x is (C_in, N) or (B, C_in, N); kernels are
    (C_out, C_in, K).
    """
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if kernels.ndim != 3 or xd.ndim != 3 or xd.shape[1] != kernels.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} does not match kernels {kernels.shape}")
    K = kernels.shape[2]
    c = (K - 1) // 2 if offset is None else offset
    if not 0 <= c < K:
        raise ShapeError(f"conv1d: offset {c} outside kernel of length {K}")
    N = xd.shape[2]
    xp, left = _pad_window(xd, K, c)
    windows = sliding_window_view(xp, K, axis=2)  # (B, C_in, N, K)
    wf = kernels.data[:, :, ::-1]
    out = np.einsum("bcnk,ock->bon", windows, wf, optimize=True)

    def backward_fn(g):
        g3 = g[None] if unbatched else g
        dw = np.einsum("bcnk,bon->ock", windows, g3, optimize=True)[:, :, ::-1]
        dxp = np.zeros_like(xp)
        for k in range(K):
            dxp[:, :, k:k + N] += np.einsum("oc,bon->bcn", wf[:, :, k], g3, optimize=True)
        dx = dxp[:, :, left:left + N]
        return (dx[0] if unbatched else dx, dw.copy())

    return _result("conv1d", out[0] if unbatched else out, (x, kernels), backward_fn)


def depthwise_conv1d(x: Tensor, kernels: Tensor, offset: int = None) -> Tensor:
    """Channel c of x (B, C, N) convolved with kernels[c] (C, K), same offset rule as conv1d."""
    if x.ndim != 3 or kernels.ndim != 2 or x.shape[1] != kernels.shape[0]:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} does not match kernels {kernels.shape}")
    K = kernels.shape[1]
    c = (K - 1) // 2 if offset is None else offset
    N = x.shape[2]
    xp, left = _pad_window(x.data, K, c)
    windows = sliding_window_view(xp, K, axis=2)
    wf = kernels.data[:, ::-1]
    out = np.einsum("bcnk,ck->bcn", windows, wf, optimize=True)

    def backward_fn(g):
        dw = np.einsum("bcnk,bcn->ck", windows, g, optimize=True)[:, ::-1]
        dxp = np.zeros_like(xp)
        for k in range(K):
            dxp[:, :, k:k + N] += wf[None, :, k, None] * g
        return (dxp[:, :, left:left + N], dw.copy())

    return _result("depthwise_conv1d", out, (x, kernels), backward_fn)


def maxpool1d(x: Tensor, width: int = 2) -> Tensor:
    """Non-overlapping max pooling on the last axis; a trailing remainder is dropped."""
    n_out = x.shape[-1] // width
    trimmed = x.data[..., :n_out * width]
    blocks = trimmed.reshape(x.shape[:-1] + (n_out, width))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        dx = np.zeros_like(x.data)
        dx[..., :n_out * width] = gb.reshape(trimmed.shape)
        return (dx,)

    return _result("maxpool1d", out, (x,), backward_fn)


# ---------------------------------------------------------------- normalisation / regularisation

@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (buffers, not parameters)."""
    channels: int
    momentum: float = 0.99
    eps: float = 1e-9
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalisation over every axis but axis 1."""
    if x.shape[1] != state.channels or gamma.shape != (state.channels,) or beta.shape != (state.channels,):
        raise ShapeError(f"batchnorm: input {x.shape} does not match {state.channels} channels")
    axes = tuple(i for i in range(x.ndim) if i != 1)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    m = x.size // state.channels

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mu
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * var
    else:
        mu, var = state.running_mean, state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward_fn(g):
        d_gamma = (g * xhat).sum(axis=axes)
        d_beta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if training:
            dx = (inv_std.reshape(shape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
            )
        else:
            dx = dxhat * inv_std.reshape(shape)
        return (dx, d_gamma, d_beta)

    return _result("batchnorm", out, (x, gamma, beta), backward_fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: masks and rescales by 1/(1-p) in training, identity otherwise."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- dense head

def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x (B, F) @ weight.T (F, O) + bias (O)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward_fn(g):
        return (g @ weight.data, g.T @ x.data, g.sum(axis=0))

    return _result("dense", out, (x, weight, bias), backward_fn)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    s = _softmax(x.data)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result("softmax", s, (x,), backward_fn)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -sum(t * log softmax(logits)); targets are one-hot or soft labels."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"cross_entropy: targets {t.shape} vs logits {logits.shape}")
    if np.any(t < 0) or not np.allclose(t.sum(axis=-1), 1.0, atol=1e-9):
        raise ShapeError("cross_entropy: targets must be non-negative and sum to 1 per row")
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    batch = z.shape[0] if z.ndim > 1 else 1
    loss = -np.sum(t * log_probs) / batch

    def backward_fn(g):
        return (float(g) * (np.exp(log_probs) - t) / batch,)

    return _result("cross_entropy", np.asarray(loss), (logits,), backward_fn)


def one_hot(labels: Sequence[int], classes: int = 2) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), np.asarray(labels, dtype=np.intp)] = 1.0
    return out


__all__ = [
    "add", "mul", "scale", "add_bias", "relu", "sum_all", "mean_all", "reshape", "flatten", "concat",
    "flip", "channel_slice", "gather", "gammatone", "conv1d", "depthwise_conv1d", "maxpool1d", "BatchNormState",
    "batchnorm", "dropout", "dense", "softmax", "cross_entropy", "one_hot",
]
