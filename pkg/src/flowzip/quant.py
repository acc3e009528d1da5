"""Hybrid integer/scale tensors and the learned-step-size quantizer.

A quantized tensor is an 8-bit integer grid plus a positive real scale;
``dequantize`` multiplies them back. The quantizer clips, divides by the
scale, and rounds half-away-from-zero. Its backward pass uses the straight
through estimator for the input and the three-branch closed form for the
scale, rescaled by 1/sqrt(C * Q_P).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import require_finite, round_half_away

SIGNED_LO, SIGNED_HI = -128, 127
UNSIGNED_LO, UNSIGNED_HI = 0, 255
MIN_SCALE = 1e-6


@dataclass
class QuantizerParams:
    """Learnable scale plus the integer clip range.

    scale is a positive scalar for per-tensor quantization or a positive
    1-D array (one entry per output channel) for weight tensors.
    """

    scale: np.ndarray
    signed: bool = True

    def __post_init__(self):
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        if np.any(self.scale <= 0):
            raise ValueError("quantizer scale must be positive")

    @property
    def lo(self) -> int:
        return SIGNED_LO if self.signed else UNSIGNED_LO

    @property
    def hi(self) -> int:
        return SIGNED_HI if self.signed else UNSIGNED_HI

    @property
    def per_channel(self) -> bool:
        return self.scale.size > 1

    def scale_view(self, ndim: int) -> np.ndarray:
        """Reshape the scale to broadcast along axis 0 of an ndim tensor."""
        if not self.per_channel:
            return self.scale.reshape(()) if ndim == 0 else self.scale
        return self.scale.reshape((-1,) + (1,) * (ndim - 1))


@dataclass
class QuantizedTensor:
    """8-bit integer values with a real scale; dequantizes to scale * values."""

    values: np.ndarray
    scale: np.ndarray
    signed: bool = True

    def __post_init__(self):
        lo, hi = (SIGNED_LO, SIGNED_HI) if self.signed else (UNSIGNED_LO, UNSIGNED_HI)
        v = np.asarray(self.values)
        if v.size and (v.min() < lo or v.max() > hi):
            raise ValueError(f"quantized values outside [{lo}, {hi}]")
        self.values = v.astype(np.int32)
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        if np.any(self.scale <= 0):
            raise ValueError("scale must be positive")

    def scale_view(self) -> np.ndarray:
        if self.scale.size == 1:
            return self.scale
        return self.scale.reshape((-1,) + (1,) * (self.values.ndim - 1))


def quantize(r: np.ndarray, p: QuantizerParams) -> QuantizedTensor:
    """Clip r/scale to the integer range and round half-away-from-zero."""
    r = require_finite(np.asarray(r, dtype=np.float64), "quantizer input")
    s = p.scale_view(r.ndim)
    v = round_half_away(np.clip(r / s, p.lo, p.hi))
    return QuantizedTensor(values=v, scale=p.scale, signed=p.signed)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Elementwise scale * values (exact: every i8 * f64 product is representable)."""
    return q.values.astype(np.float64) * q.scale_view()


def init_scale(r: np.ndarray, bit_width: int = 8) -> float:
    """Data-dependent scale init: 2 * mean|r| / sqrt(2**b - 1), floored at 1e-6."""
    r = np.asarray(r, dtype=np.float64)
    if r.size == 0:
        raise ValueError("cannot initialize a scale from an empty tensor")
    s = 2.0 * float(np.mean(np.abs(r))) / float(np.sqrt(2.0**bit_width - 1.0))
    return max(s, MIN_SCALE)


def _channel_count(r: np.ndarray, p: QuantizerParams) -> int:
    # Per-channel scales quantize weight tensors laid out (C_out, ...);
    # per-tensor scales quantize activations laid out (B, C, H, W).
    if p.per_channel:
        return int(p.scale.size)
    if r.ndim >= 3:
        return int(r.shape[-3])
    return int(r.shape[0]) if r.ndim >= 1 else 1


def grad_rescale(r: np.ndarray, p: QuantizerParams) -> float:
    """LSQ gradient re-scaling factor g = 1/sqrt(C * Q_P)."""
    return 1.0 / float(np.sqrt(_channel_count(r, p) * p.hi))


def scale_grad_branches(r: np.ndarray, p: QuantizerParams) -> np.ndarray:
    """Elementwise d(dequantized output)/d(scale), the three-branch form.

    In-range: round(r/s) - r/s; clipped low: lo; clipped high: hi.
    """
    s = p.scale_view(r.ndim)
    u = np.asarray(r, dtype=np.float64) / s
    mid = round_half_away(u) - u
    return np.where(u < p.lo, float(p.lo), np.where(u > p.hi, float(p.hi), mid))


def quantizer_backward(
    r: np.ndarray, p: QuantizerParams, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """STE gradients through the fake-quantize op.

    grad_r passes upstream through on in-range elements and is zero on
    clipped ones. grad_scale sums upstream * branch terms and multiplies by
    g = 1/sqrt(C * Q_P); per-channel scales reduce over all but axis 0.
    """
    r = np.asarray(r, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != r.shape:
        raise ValueError("upstream shape must match input shape")
    s = p.scale_view(r.ndim)
    u = r / s
    in_range = (u >= p.lo) & (u <= p.hi)
    grad_r = np.where(in_range, upstream, 0.0)

    g = grad_rescale(r, p)
    weighted = upstream * scale_grad_branches(r, p)
    if p.per_channel:
        grad_scale = g * weighted.reshape(r.shape[0], -1).sum(axis=1)
    else:
        grad_scale = np.atleast_1d(g * float(weighted.sum()))
    return grad_r, grad_scale
