"""Differentiable layers: the exact set the keypoint network needs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Parameter, Tensor, as_tensor, make_node

TRAIN = "train"
EVAL = "eval"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def conv2d(x, weight: Parameter, bias: Parameter, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input via im2col and a batched matrix product."""
    x = as_tensor(x)
    w = as_tensor(weight)
    b = as_tensor(bias)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input, got shape {x.shape}")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d weight must be (outC, inC, k, k), got {w.shape}")
    n, c, h, wd = x.shape
    oc, ic, k, _ = w.shape
    if ic != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ic}")
    if b.shape != (oc,):
        raise ValueError(f"conv2d bias must have shape ({oc},), got {b.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d output size would be {oh}x{ow}")

    dt = x.data.dtype
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dt)
        xp[:, :, pad:pad + h, pad:pad + wd] = x.data
    else:
        xp = x.data
    cols = np.empty((n, c, k, k, oh, ow), dtype=dt)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    cols = cols.reshape(n, c * k * k, oh * ow)
    wmat = w.data.reshape(oc, c * k * k)
    out = np.matmul(wmat, cols)
    out += b.data[:, None]
    out = out.reshape(n, oc, oh, ow)

    def backward_fn(g):
        gm = g.reshape(n, oc, oh * ow)
        gb = gm.sum(axis=(0, 2), dtype=np.float64).astype(dt) if b.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64).astype(dt).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm).reshape(n, c, k, k, oh, ow)
            gxp = np.zeros(xp.shape, dtype=dt)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb

    return make_node(out, (x, w, b), backward_fn, "conv2d")


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    channels: int
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None


def batch_norm(
    x,
    gamma: Parameter,
    beta: Parameter,
    state: BatchNormState,
    eps: float = 1e-5,
    momentum: float = 0.9,
    mode: str = TRAIN,
) -> Tensor:
    """Per-channel normalization over (batch, H, W).

    ``momentum`` is the weight kept on the old running value.
    """
    _check_mode(mode)
    x = as_tensor(x)
    g = as_tensor(gamma)
    bt = as_tensor(beta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if n == 0:
        raise ValueError("batch_norm on an empty batch")
    if g.shape != (c,) or bt.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    dt = x.data.dtype
    m = n * h * w

    if mode == TRAIN:
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64)
        unbiased = var * m / max(m - 1, 1)
        # running stats are held at float32 precision so a checkpoint round trip is exact
        if state.initialized:
            rm = momentum * state.running_mean + (1 - momentum) * mean
            rv = momentum * state.running_var + (1 - momentum) * unbiased
        else:
            rm, rv = mean, unbiased
        state.running_mean = rm.astype(np.float32).astype(np.float64)
        state.running_var = rv.astype(np.float32).astype(np.float64)
    else:
        if not state.initialized:
            raise RuntimeError("batch_norm in eval mode before any training step")
        mean = state.running_mean
        var = state.running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - mean.astype(dt)[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * g.data[None, :, None, None] + bt.data[None, :, None, None]

    def backward_fn(gout):
        ggamma = (gout * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(dt) if g.requires_grad else None
        gbeta = gout.sum(axis=(0, 2, 3), dtype=np.float64).astype(dt) if bt.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = gout * g.data[None, :, None, None]
            if mode == TRAIN:
                s1 = gxhat.mean(axis=(0, 2, 3), dtype=np.float64).astype(dt)
                s2 = (gxhat * xhat).mean(axis=(0, 2, 3), dtype=np.float64).astype(dt)
                gx = (gxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]) * inv_std[None, :, None, None]
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return make_node(out, (x, g, bt), backward_fn, "batch_norm")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def backward_fn(g):
        return (np.where(out > 0, g, 0).astype(g.dtype, copy=False),)

    return make_node(out, (x,), backward_fn, "relu")


def global_average_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"global_average_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h * w == 0:
        raise ValueError("global_average_pool over zero spatial extent")
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.data.dtype)

    def backward_fn(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.data.dtype),)

    return make_node(out, (x,), backward_fn, "global_average_pool")


def fully_connected(x, weight: Parameter, bias: Parameter) -> Tensor:
    """Affine map of each batch row; weight is (out, in), input is flattened."""
    x = as_tensor(x)
    w = as_tensor(weight)
    b = as_tensor(bias)
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    if w.data.ndim != 2 or w.shape[1] != flat.shape[1]:
        raise ValueError(f"fully_connected: input dim {flat.shape[1]} does not match weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"fully_connected: bias must have shape ({w.shape[0]},)")
    out = flat @ w.data.T + b.data

    def backward_fn(g):
        gx = (g @ w.data).reshape(x.shape) if x.requires_grad else None
        gw = g.T @ flat if w.requires_grad else None
        gb = g.sum(axis=0, dtype=np.float64).astype(g.dtype) if b.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, w, b), backward_fn, "fully_connected")


def dropout(x, rate: float, mode: str, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1 - rate) in train mode."""
    _check_mode(mode)
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if mode == EVAL or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1 - rate)
    out = x.data * keep

    def backward_fn(g):
        return (g * keep,)

    return make_node(out, (x,), backward_fn, "dropout")


def l2_loss(prediction, target) -> Tensor:
    """Sum of squared differences over components, averaged over the batch."""
    p = as_tensor(prediction)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.data.dtype)
    if p.shape != t.shape:
        raise ValueError(f"l2_loss shape mismatch: {p.shape} vs {t.shape}")
    batch = p.shape[0] if p.data.ndim else 1
    diff = p.data - t
    with np.errstate(over="ignore"):  # overflow surfaces as a non-finite node below
        val = np.asarray(np.sum(np.square(diff, dtype=np.float64)) / batch, dtype=p.data.dtype)

    def backward_fn(g):
        return (g * 2.0 * diff / batch,)

    return make_node(val, (p,), backward_fn, "l2_loss")


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        return (g * factor,)

    return make_node(x.data * factor, (x,), backward_fn, "scale")


def add(*terms) -> Tensor:
    """Elementwise sum of equally shaped tensors."""
    ts = [as_tensor(t) for t in terms]
    if not ts:
        raise ValueError("add needs at least one term")
    out = ts[0].data.copy()
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ValueError(f"add shape mismatch: {t.shape} vs {ts[0].shape}")
        out = out + t.data

    def backward_fn(g):
        return tuple(g for _ in ts)

    return make_node(out, ts, backward_fn, "add")
