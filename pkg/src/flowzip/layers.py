"""Network building blocks: convolutions, binary gates, residual blocks.

Each block runs in one of two engines:

* simulation -- float arithmetic on tape Nodes, with optional fake
  quantization of activations and weights (training and the float/fake
  inference paths);
* integer -- int8 values with real scales, 32-bit accumulation, and
  double-precision rescaling (the deployment path). Its GEMMs run through
  float64 BLAS, which is exact here because every intermediate sum is an
  integer far below 2**53.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .numerics import round_half_away
from .quant import MIN_SCALE, QuantizedTensor, QuantizerParams, init_scale

KERNEL = 3
# Input values are bytes plus bounded coupling updates; nets see u/128 - 1.
NET_INPUT_SCALE = 1.0 / 128.0

# True int32 accumulators must not overflow: |acc| <= 255 * 128 * 9 * C_in + |bias|.
MAX_ACC = 2**31 - 1
MAX_BIAS_INT = 2**30


class GateVector:
    """Learnable per-filter gates in [0,1]; the binarized view is I(g > 0.5)."""

    def __init__(self, count: int, alpha: float = 0.8):
        self.node = ad.Node(np.full(count, float(alpha)), requires_grad=True)

    @property
    def g(self) -> np.ndarray:
        return self.node.value

    def binarized(self) -> np.ndarray:
        return (self.node.value > 0.5).astype(np.int64)

    def clamp(self):
        np.clip(self.node.value, 0.0, 1.0, out=self.node.value)


class ConvLayer:
    """3x3 stride-1 same-padding convolution with float bias.

    Weight layout is (C_out, C_in, k, k). ``wscale`` is the per-output-channel
    learned quantizer step; ``gate`` is optional filter gating.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        rng: np.random.Generator | None = None,
        zero_init: bool = False,
        k: int = KERNEL,
    ):
        if zero_init or rng is None:
            w = np.zeros((c_out, c_in, k, k))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (c_in * k * k)), (c_out, c_in, k, k))
        self.w = ad.Node(w, requires_grad=True)
        self.b = ad.Node(np.zeros(c_out), requires_grad=True)
        self.wscale = ad.Node(np.ones(c_out), requires_grad=True)
        self.gate: GateVector | None = None

    @property
    def c_out(self) -> int:
        return self.w.value.shape[0]

    @property
    def c_in(self) -> int:
        return self.w.value.shape[1]

    def calibrate_weight_scale(self):
        w = self.w.value
        flat = np.abs(w.reshape(w.shape[0], -1))
        s = 2.0 * flat.mean(axis=1) / np.sqrt(255.0)
        self.wscale.value[...] = np.maximum(s, MIN_SCALE)

    def effective_weight(self, weight_quant: bool):
        if weight_quant:
            return ad.fake_quantize(self.w, self.wscale, signed=True)
        return self.w

    def quantized_weight(self) -> QuantizedTensor:
        p = QuantizerParams(scale=self.wscale.value, signed=True)
        from .quant import quantize

        return quantize(self.w.value, p)


def conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Float convolution of a plain array through a layer (no tape)."""
    return ad.conv2d_raw(
        np.asarray(x, dtype=np.float64), layer.w.value, layer.b.value
    )


def gconv(x: np.ndarray, layer: ConvLayer, gate: GateVector) -> np.ndarray:
    """Gated convolution: output channel c is zeroed when gate_c <= 0.5."""
    if len(gate.g) != layer.c_out:
        raise ValueError("gate length must equal the output channel count")
    y = conv2d(x, layer)
    return y * gate.binarized()[None, :, None, None]


def relu_int(q: QuantizedTensor) -> QuantizedTensor:
    """Integer ReLU: clamp values at zero; the scale is untouched."""
    return QuantizedTensor(
        values=np.maximum(q.values, 0), scale=q.scale, signed=False
    )


def _check_acc_bound(c_in: int, bhat: np.ndarray):
    bound = 255 * 128 * KERNEL * KERNEL * c_in + int(np.abs(bhat).max(initial=0))
    if bound > MAX_ACC:
        raise ValueError(f"int32 accumulator could overflow (bound {bound})")


def int_conv_acc(
    values: np.ndarray, w_int: np.ndarray, bhat: np.ndarray
) -> np.ndarray:
    """Integer convolution accumulator (exact, returned as integral float64)."""
    _check_acc_bound(w_int.shape[1], bhat)
    B, C, H, W = values.shape
    cols = ad.im2col(values.astype(np.float64), w_int.shape[2])
    cout = w_int.shape[0]
    acc = np.matmul(w_int.reshape(cout, -1).astype(np.float64), cols)
    acc += bhat[:, None]
    return acc.reshape(B, cout, H, W)


def fold_bias(b: np.ndarray, w_scale: np.ndarray, x_scale: float) -> np.ndarray:
    """Bias folded into the accumulator: round(b / (s_W * s_x))."""
    bhat = round_half_away(b / (w_scale * x_scale))
    if np.abs(bhat).max(initial=0) > MAX_BIAS_INT:
        raise ValueError("folded bias exceeds the 32-bit accumulator budget")
    return bhat


def requantize(
    acc: np.ndarray, m: np.ndarray, lo: int, hi: int
) -> np.ndarray:
    """Rescale an integer accumulator by m (double precision), round, clip."""
    return np.clip(round_half_away(acc * m), lo, hi)


def int_conv2d(
    x: QuantizedTensor,
    layer: ConvLayer,
    out_scale: float,
    out_signed: bool = True,
) -> QuantizedTensor:
    """Integer-only convolution: int8 GEMM, folded bias, double rescale.

    Dequantizes to approximately the float conv2d output; the only extra
    error terms are the output rounding (<= 0.5 * out_scale) and the bias
    quantization (<= 0.5 * s_W * s_x).
    """
    if float(out_scale) <= 0:
        raise ValueError("out_scale must be positive")
    w_q = layer.quantized_weight()
    sw = layer.wscale.value
    sx = float(x.scale[0])
    bhat = fold_bias(layer.b.value, sw, sx)
    acc = int_conv_acc(x.values, w_q.values, bhat)
    # m is per output channel when the weight scale is per-channel
    m = (sw * sx / float(out_scale))[None, :, None, None]
    lo, hi = (-128, 127) if out_signed else (0, 255)
    vals = requantize(acc, m, lo, hi)
    return QuantizedTensor(values=vals, scale=np.atleast_1d(float(out_scale)), signed=out_signed)


@dataclass
class ResidualBlock:
    """One pre-quantized residual unit: relu(SAdd(Q(x), B(relu(A(Q(x)))))).

    ``idx_a``/``idx_b`` are the kept-filter index lists after physical
    pruning (identity lists when unpruned). The scatter-add places conv B's
    (possibly narrow) output back into the unpruned channel space of the
    shortcut before the addition.
    """

    conv_a: ConvLayer
    conv_b: ConvLayer
    q_in: ad.Node
    q_mid: ad.Node
    idx_a: np.ndarray | None = None
    idx_b: np.ndarray | None = None
    width: int = 0

    @classmethod
    def build(cls, width: int, rng: np.random.Generator) -> "ResidualBlock":
        return cls(
            conv_a=ConvLayer(width, width, rng),
            conv_b=ConvLayer(width, width, rng),
            q_in=ad.Node(np.ones(1), requires_grad=True),
            q_mid=ad.Node(np.ones(1), requires_grad=True),
            width=width,
        )

    def attach_gates(self, alpha: float):
        self.conv_a.gate = GateVector(self.conv_a.c_out, alpha)
        self.conv_b.gate = GateVector(self.conv_b.c_out, alpha)

    def gates(self) -> list[GateVector]:
        return [g for g in (self.conv_a.gate, self.conv_b.gate) if g is not None]

    def kept_sets(self) -> tuple[np.ndarray, np.ndarray]:
        """Kept output-channel indices for conv A and conv B."""
        if self.idx_a is not None:
            return self.idx_a, self.idx_b
        if self.conv_a.gate is not None:
            return (
                np.flatnonzero(self.conv_a.gate.binarized()),
                np.flatnonzero(self.conv_b.gate.binarized()),
            )
        full_a = np.arange(self.conv_a.c_out)
        full_b = np.arange(self.conv_b.c_out)
        return full_a, full_b


def _pad_rows(narrow: np.ndarray, idx: np.ndarray, rows: int) -> np.ndarray:
    full = np.zeros((rows,) + narrow.shape[1:])
    full[idx] = narrow
    return full


def _pad_cols(narrow: np.ndarray, idx: np.ndarray, cols: int) -> np.ndarray:
    full = np.zeros((narrow.shape[0], cols) + narrow.shape[2:])
    full[:, idx] = narrow
    return full


def _pruned_block_weights(blk: "ResidualBlock", weight_quant: bool):
    """Zero-padded full-width weights of a physically pruned block.

    The float path runs pruned models through full-width GEMMs so kept
    channels see bit-identical summation order to the gated model; removed
    positions contribute exact zeros. Pruned models are inference artifacts,
    so no tape is needed here.
    """

    def eff(layer: ConvLayer) -> np.ndarray:
        if not weight_quant:
            return layer.w.value
        from .quant import dequantize

        return dequantize(layer.quantized_weight())

    wa = _pad_rows(eff(blk.conv_a), blk.idx_a, blk.width)
    ba = _pad_rows(blk.conv_a.b.value, blk.idx_a, blk.width)
    wb = _pad_rows(_pad_cols(eff(blk.conv_b), blk.idx_a, blk.width), blk.idx_b, blk.width)
    bb = _pad_rows(blk.conv_b.b.value, blk.idx_b, blk.width)
    return ad.Node(wa), ad.Node(ba), ad.Node(wb), ad.Node(bb)


def block_sim(
    x,
    blk: ResidualBlock,
    act_quant: bool,
    weight_quant: bool,
    calibrate: bool = False,
):
    """Simulation-path residual block on tape Nodes (or arrays)."""
    a = x
    if act_quant:
        if calibrate:
            calibrate_activation(blk.q_in, ad.value_of(x))
        a = ad.fake_quantize(x, blk.q_in, signed=False)
    if blk.idx_a is not None:
        wa, ba, wb, bb = _pruned_block_weights(blk, weight_quant)
    else:
        wa, ba = blk.conv_a.effective_weight(weight_quant), blk.conv_a.b
        wb, bb = blk.conv_b.effective_weight(weight_quant), blk.conv_b.b
    h = ad.conv2d(a, wa, ba)
    if blk.conv_a.gate is not None:
        mask = ad.binarize_ste(blk.conv_a.gate.node)
        h = ad.mul(h, ad.reshape(mask, (1, -1, 1, 1)))
    h = ad.relu(h)
    if act_quant:
        if calibrate:
            calibrate_activation(blk.q_mid, ad.value_of(h))
        h = ad.fake_quantize(h, blk.q_mid, signed=False)
    r = ad.conv2d(h, wb, bb)
    if blk.conv_b.gate is not None:
        mask = ad.binarize_ste(blk.conv_b.gate.node)
        r = ad.mul(r, ad.reshape(mask, (1, -1, 1, 1)))
    y = ad.add(a, r)
    return ad.relu(y)


def block_int(q: QuantizedTensor, blk: ResidualBlock, next_scale: float) -> QuantizedTensor:
    """Integer-path residual block.

    The incoming tensor is already quantized at this block's input scale
    (the producer requantized directly into it). Gated-off channels bypass
    the accumulator and requantize the shortcut directly, which keeps the
    gated model bit-identical to the physically pruned one.
    """
    sa = float(q.scale[0])
    kept_a, kept_b = blk.kept_sets()
    pruned = blk.idx_a is not None

    wa = blk.conv_a.quantized_weight().values
    swa = blk.conv_a.wscale.value
    ba = blk.conv_a.b.value
    wb = blk.conv_b.quantized_weight().values
    swb = blk.conv_b.wscale.value
    bb = blk.conv_b.b.value
    if not pruned:
        wa, swa, ba = wa[kept_a], swa[kept_a], ba[kept_a]
        wb, swb, bb = wb[kept_b][:, kept_a], swb[kept_b], bb[kept_b]

    s_mid = float(blk.q_mid.value[0])
    s_next = float(next_scale)
    avals = q.values

    if len(kept_b):
        acc1 = int_conv_acc(avals, wa, fold_bias(ba, swa, sa))
        h = requantize(acc1, (swa * sa / s_mid)[None, :, None, None], 0, 255)
        acc2 = int_conv_acc(h, wb, fold_bias(bb, swb, s_mid))
        # shortcut joins the 32-bit accumulator in conv B's unit system
        short_unit = sa / (swb * s_mid)
        acc2 = acc2 + round_half_away(
            avals[:, kept_b].astype(np.float64) * short_unit[None, :, None, None]
        )
        y_kept = requantize(acc2, (swb * s_mid / s_next)[None, :, None, None], 0, 255)
    else:
        y_kept = None

    out = np.empty_like(avals)
    off = np.setdiff1d(np.arange(blk.width), kept_b, assume_unique=True)
    if len(off):
        out[:, off] = requantize(
            avals[:, off].astype(np.float64), np.float64(sa / s_next), 0, 255
        ).astype(avals.dtype)
    if y_kept is not None:
        out[:, kept_b] = y_kept.astype(avals.dtype)
    return QuantizedTensor(values=out, scale=np.atleast_1d(s_next), signed=False)


def calibrate_activation(node: ad.Node, tensor: np.ndarray):
    """Set an activation quantizer scale from calibration data."""
    node.value[...] = init_scale(tensor, 8)
