"""Differentiable layers: dense, 3D convolution and pooling, batch norm,
activations, dropout and the training losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import BatchTooSmall, InputTooSmall, ShapeMismatch
from .tensor import Tensor, as_tensor, make_result

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

BCE_CLAMP = 1e-7

# cap on im2col elements materialised per conv chunk
_CONV_CHUNK_ELEMENTS = 1 << 23


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeMismatch(f"dense expects x[B,I], w[I,O], b[O]; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"dense: x{x.shape} . w{w.shape} + b{b.shape}")
    xv, wv = x.values, w.values

    def backward(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return make_result(xv @ wv + b.values, (x, w, b), backward, "dense")


def _depth_chunks(depth: int, per_slice: int):
    step = max(1, _CONV_CHUNK_ELEMENTS // max(per_slice, 1))
    for start in range(0, depth, step):
        yield slice(start, min(start + step, depth))


def _valid_correlate(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """out[b,o,d,h,w] = sum_{c,i,j,l} x[b,c,d+i,h+j,w+l] k[o,c,i,j,l]."""
    kd, kh, kw = k.shape[2:]
    windows = sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))
    bsz, _, od, oh, ow = windows.shape[:5]
    out = np.empty((bsz, k.shape[0], od, oh, ow))
    per_slice = bsz * x.shape[1] * kd * kh * kw * oh * ow
    for sl in _depth_chunks(od, per_slice):
        part = np.tensordot(windows[:, :, sl], k, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        out[:, :, sl] = np.moveaxis(part, -1, 1)
    return out


def conv3d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """Valid (unpadded), stride-1 3D cross-correlation."""
    if x.ndim != 5 or k.ndim != 5 or b.ndim != 1:
        raise ShapeMismatch(f"conv3d expects x[B,C,D,H,W], k[O,C,kd,kh,kw], b[O]; got {x.shape}, {k.shape}, {b.shape}")
    if x.shape[1] != k.shape[1] or k.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"conv3d channel mismatch: x{x.shape}, k{k.shape}, b{b.shape}")
    if any(s < ks for s, ks in zip(x.shape[2:], k.shape[2:])):
        raise InputTooSmall(f"conv3d input {x.shape[2:]} smaller than kernel {k.shape[2:]}")
    xv, kv = x.values, k.values
    out = _valid_correlate(xv, kv) + b.values[None, :, None, None, None]

    def backward(g):
        kd, kh, kw = kv.shape[2:]
        windows = sliding_window_view(xv, (kd, kh, kw), axis=(2, 3, 4))
        dk = np.zeros_like(kv)
        per_slice = g.shape[0] * xv.shape[1] * kd * kh * kw * g.shape[3] * g.shape[4]
        for sl in _depth_chunks(g.shape[2], per_slice):
            dk += np.tensordot(g[:, :, sl], windows[:, :, sl], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gpad = np.pad(g, ((0, 0), (0, 0), (kd - 1, kd - 1), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        flipped = np.ascontiguousarray(kv[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        dx = _valid_correlate(gpad, flipped)
        return dx, dk, g.sum(axis=(0, 2, 3, 4))

    return make_result(out, (x, k, b), backward, "conv3d")


def conv3d_output_shape(spatial, kernel: int = 3) -> tuple[int, ...]:
    return tuple(s - kernel + 1 for s in spatial)


def pool_output_shape(spatial, size: int = 2) -> tuple[int, ...]:
    return tuple(s // size for s in spatial)


def maxpool3d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pool; trailing remainder slices are dropped.

    Gradient goes to the first maximum in scan order within each window.
    """
    if x.ndim != 5:
        raise ShapeMismatch(f"maxpool3d expects x[B,C,D,H,W], got {x.shape}")
    if any(s < size for s in x.shape[2:]):
        raise InputTooSmall(f"maxpool3d input {x.shape[2:]} smaller than window {size}")
    bsz, ch = x.shape[:2]
    pd, ph, pw = pool_output_shape(x.shape[2:], size)
    crop = x.values[:, :, : pd * size, : ph * size, : pw * size]
    win = (
        crop.reshape(bsz, ch, pd, size, ph, size, pw, size)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(bsz, ch, pd, ph, pw, size**3)
    )
    arg = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, arg, axis=-1)[..., 0]
    in_shape = x.shape

    def backward(g):
        gw = np.zeros((bsz, ch, pd, ph, pw, size**3))
        np.put_along_axis(gw, arg, g[..., None], axis=-1)
        gcrop = (
            gw.reshape(bsz, ch, pd, ph, pw, size, size, size)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(bsz, ch, pd * size, ph * size, pw * size)
        )
        dx = np.zeros(in_shape)
        dx[:, :, : pd * size, : ph * size, : pw * size] = gcrop
        return (dx,)

    return make_result(out, (x,), backward, "maxpool3d")


@dataclass
class BatchNormState:
    """Running statistics plus the fixed momentum/epsilon of one layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def create(cls, features: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(features), np.ones(features), momentum, epsilon)


def _bn_axes(x: Tensor) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 2:
        return (0,), (1, x.shape[1])
    if x.ndim == 5:
        return (0, 2, 3, 4), (1, x.shape[1], 1, 1, 1)
    raise ShapeMismatch(f"batchnorm expects [B,F] or [B,C,D,H,W], got {x.shape}")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-feature (per-channel for 5D input) batch normalisation.

    Train mode normalises with the batch statistics (population variance) and
    updates the running averages in ``state``; eval mode uses the running
    averages.
    """
    axes, bshape = _bn_axes(x)
    features = bshape[1]
    if gamma.shape != (features,) or beta.shape != (features,):
        raise ShapeMismatch(f"batchnorm gamma/beta must have shape ({features},)")
    xv = x.values
    gv = gamma.values.reshape(bshape)
    eps = state.epsilon

    if mode == "eval":
        rm = state.running_mean.reshape(bshape)
        invstd = 1.0 / np.sqrt(state.running_var.reshape(bshape) + eps)
        xhat = (xv - rm) * invstd

        def backward_eval(g):
            return g * gv * invstd, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_result(gv * xhat + beta.values.reshape(bshape), (x, gamma, beta), backward_eval, "batchnorm_eval")

    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    n = xv.size // features
    if n < 2:
        raise BatchTooSmall("batch norm in train mode needs at least two values per feature")
    mu = xv.mean(axis=axes, keepdims=True)
    var = ((xv - mu) ** 2).mean(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * invstd
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mu.reshape(features)
    state.running_var = (1 - m) * state.running_var + m * var.reshape(features)

    def backward_train(g):
        dxhat = g * gv
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = invstd / n * (n * dxhat - s1 - xhat * s2)
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(gv * xhat + beta.values.reshape(bshape), (x, gamma, beta), backward_train, "batchnorm")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return make_result(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,), "relu")


def selu(x: Tensor) -> Tensor:
    xv = x.values
    neg = xv <= 0
    expx = np.exp(np.minimum(xv, 0.0))
    out = SELU_LAMBDA * np.where(neg, SELU_ALPHA * (expx - 1.0), xv)
    slope = SELU_LAMBDA * np.where(neg, SELU_ALPHA * expx, 1.0)
    return make_result(out, (x,), lambda g: (g * slope,), "selu")


def sigmoid_values(v: np.ndarray) -> np.ndarray:
    """Logistic function without overflow for either sign."""
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_values(x.values)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


ACTIVATIONS = {"relu": relu, "selu": selu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; eval mode and rate 0 are the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_result(x.values * mask, (x,), lambda g: (g * mask,), "dropout")


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy with p clamped to [1e-7, 1 - 1e-7]."""
    yv = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if p.ndim != 2 or p.shape[1] != 1 or p.shape[0] != yv.shape[0]:
        raise ShapeMismatch(f"bce_loss: p{p.shape} vs {yv.shape[0]} labels")
    pv = p.values
    pc = np.clip(pv, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = pv.shape[0]
    loss = -(yv * np.log(pc) + (1.0 - yv) * np.log(1.0 - pc)).mean()
    inside = (pv >= BCE_CLAMP) & (pv <= 1.0 - BCE_CLAMP)

    def backward(g):
        return (float(g) * inside * (-(yv / pc) + (1.0 - yv) / (1.0 - pc)) / n,)

    return make_result(np.asarray(loss), (p,), backward, "bce")


def l1_penalty(t: Tensor, coefficient: float = 0.001) -> Tensor:
    """coefficient * sum |t|, subgradient 0 at zero."""
    tv = t.values
    sign = np.sign(tv)
    return make_result(
        np.asarray(coefficient * np.abs(tv).sum()), (t,), lambda g: (float(g) * coefficient * sign,), "l1"
    )


def mse_loss(pred: Tensor, target) -> Tensor:
    tv = np.asarray(target, dtype=np.float64)
    if pred.shape != tv.shape:
        raise ShapeMismatch(f"mse_loss: {pred.shape} vs {tv.shape}")
    diff = pred.values - tv
    n = diff.size
    return make_result(np.asarray((diff**2).mean()), (pred,), lambda g: (float(g) * 2.0 * diff / n,), "mse")


def parameter(values) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


__all__ = [
    "ACTIVATIONS",
    "BatchNormState",
    "activation",
    "as_tensor",
    "batchnorm",
    "bce_loss",
    "conv3d",
    "conv3d_output_shape",
    "dense",
    "dropout",
    "l1_penalty",
    "maxpool3d",
    "mse_loss",
    "parameter",
    "pool_output_shape",
    "relu",
    "selu",
    "sigmoid",
    "sigmoid_values",
]
