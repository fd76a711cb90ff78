"""Differentiable operators on :class:`~uniconvnet.tensor.Tensor`.

Each operator computes its forward value with numpy and records a backward
closure on the tape of its tracked inputs.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tensor, record

LN_EPS = 1e-6


@dataclass
class OpCounter:
    """Tally of work performed while the counter is active."""

    macs: int = 0
    elementwise: int = 0


_counters: list[OpCounter] = []


@contextlib.contextmanager
def count_ops():
    """Count multiplies actually executed by conv2d/linear inside the block."""
    counter = OpCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _tally(macs: int = 0, elementwise: int = 0) -> None:
    for c in _counters:
        c.macs += int(macs)
        c.elementwise += int(elementwise)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation with symmetric zero padding.

    ``weight`` is (C_out, C_in/groups, K_h, K_w).  Depthwise kernels are
    applied one tap at a time (a strided slice of the padded input times the
    tap weight); every other grouping goes through an im2col matrix product.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects a (B, C, H, W) input, got {x.shape}")
    B, C_in, H, W = x.shape
    C_out, cig, KH, KW = weight.shape
    if groups < 1 or C_in % groups or C_out % groups:
        raise ShapeError(f"conv2d: channels {C_in}->{C_out} not divisible by groups={groups}")
    if cig != C_in // groups:
        raise ShapeError(f"conv2d: weight expects {cig * groups} input channels, got {C_in}")
    if bias is not None and bias.shape != (C_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({C_out},)")
    Ho = conv_output_extent(H, KH, stride, padding)
    Wo = conv_output_extent(W, KW, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {Ho}x{Wo} for input {H}x{W}")

    G, cog = groups, C_out // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    wd = weight.data
    dtype = np.result_type(x.data, wd)

    def taps():
        for i in range(KH):
            for j in range(KW):
                yield i, j, (slice(None), slice(None), slice(i, i + hs, stride), slice(j, j + ws, stride))

    if cig == 1 and cog == 1:
        out = np.zeros((B, C_out, Ho, Wo), dtype=dtype)
        for i, j, sl in taps():
            out += xp[sl] * wd[None, :, 0, i, j, None, None]
        cols = None
    else:
        # cols: (G, B*Ho*Wo, cig*KH*KW)
        cols = np.empty((B, G, cig, KH, KW, Ho, Wo), dtype=xp.dtype)
        for i, j, sl in taps():
            cols[:, :, :, i, j] = xp[sl].reshape(B, G, cig, Ho, Wo)
        cols = cols.transpose(1, 0, 5, 6, 2, 3, 4).reshape(G, B * Ho * Wo, cig * KH * KW)
        wmat = wd.reshape(G, cog, cig * KH * KW)
        out = np.matmul(cols, wmat.transpose(0, 2, 1))  # (G, BHW, cog)
        out = out.reshape(G, B, Ho, Wo, cog).transpose(1, 0, 4, 2, 3).reshape(B, C_out, Ho, Wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    _tally(macs=KH * KW * B * G * cog * cig * Ho * Wo)

    def bwd(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        if cols is None:
            dw = np.zeros_like(wd)
            for i, j, sl in taps():
                dxp[sl] += g * wd[None, :, 0, i, j, None, None]
                dw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
        else:
            gm = g.reshape(B, G, cog, Ho, Wo).transpose(1, 0, 3, 4, 2).reshape(G, B * Ho * Wo, cog)
            dw = np.matmul(gm.transpose(0, 2, 1), cols).reshape(wd.shape)
            dcols = np.matmul(gm, wd.reshape(G, cog, cig * KH * KW))
            dcols = dcols.reshape(G, B, Ho, Wo, cig, KH, KW).transpose(1, 0, 4, 5, 6, 2, 3)
            for i, j, sl in taps():
                dxp[sl] += dcols[:, :, :, i, j].reshape(B, C_in, Ho, Wo)
        dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record("conv2d", inputs, out, bwd)


def _phi(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf-based normal CDF."""
    cdf = _phi(x.data)
    _tally(elementwise=x.data.size)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return record("gelu", [x], (x.data * cdf).astype(x.dtype), bwd)


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize each (b, h, w) channel vector, then apply a per-channel affine."""
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} for {C} channels")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    ga = gamma.data[None, :, None, None]
    out = xhat * ga + beta.data[None, :, None, None]
    _tally(elementwise=x.data.size)

    def bwd(g):
        dxhat = g * ga
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record("layer_norm", [x, gamma, beta], out, bwd)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("elementwise_mul", a, b)
    _tally(elementwise=a.data.size)
    return record("mul", [a, b], a.data * b.data, lambda g: (g * b.data, g * a.data))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    _tally(elementwise=a.data.size)
    return record("add", [a, b], a.data + b.data, lambda g: (g, g))


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply channel c of ``x`` by ``s[c]``."""
    if s.shape != (x.shape[1],):
        raise ShapeError(f"scale_channels: scale shape {s.shape} for {x.shape[1]} channels")
    sv = s.data[None, :, None, None]
    _tally(elementwise=x.data.size)

    def bwd(g):
        return g * sv, (g * x.data).sum(axis=(0, 2, 3))

    return record("scale_channels", [x, s], x.data * sv, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    _tally(elementwise=x.data.size)

    def bwd(g):
        return (np.broadcast_to(g / (H * W), x.shape).copy(),)

    return record("avg_pool", [x], x.data.mean(axis=(2, 3), keepdims=True), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over channels of a (B, C, 1, 1) tensor; ``weight`` is (C_out, C)."""
    B, C, H, W = x.shape
    if (H, W) != (1, 1):
        raise ShapeError(f"linear expects (B, C, 1, 1), got {x.shape}")
    C_out = weight.shape[0]
    if weight.shape != (C_out, C):
        raise ShapeError(f"linear: weight {weight.shape} does not take {C} inputs")
    if bias is not None and bias.shape != (C_out,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({C_out},)")
    x2 = x.data[:, :, 0, 0]
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    _tally(macs=B * C * C_out)

    def bwd(g):
        g2 = g[:, :, 0, 0]
        grads = [(g2 @ weight.data)[:, :, None, None], g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record("linear", inputs, out[:, :, None, None], bwd)


def flatten_logits(x: Tensor) -> Tensor:
    """(B, K, 1, 1) -> (B, K)."""
    B, K = x.shape[:2]
    return record("flatten", [x], x.data.reshape(B, K), lambda g: (g.reshape(x.shape),))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, K) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    B, K = z.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} != ({B},)")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(B), labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)

    return record("cross_entropy", [logits], np.asarray(loss, dtype=z.dtype), bwd)
