"""Minimal reverse-mode automatic differentiation over numpy arrays.

The op set is exactly what the flow and its objectives need: convolution,
relu, (scatter-)add, slicing/concat, space-to-depth, rounding and gate
binarization with straight-through gradients, the LSQ fake-quantizer, the
discretized-logistic log-mass, and a few scalar reductions. Every op
registers an exact adjoint; gradient tests check each against central
finite differences.

Usage: wrap parameters in ``Node(arr, requires_grad=True)``, build the loss
with the functions below, call ``backward(loss)``, read ``node.grad``.
Inside ``no_grad()`` the same functions run without recording.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable

import numpy as np

from . import quant
from .numerics import round_half_away

_state = threading.local()


def _grad_on() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_on()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "vjps", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Node, ...] = ()
        self.vjps: tuple[Callable, ...] = ()
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, leaf={self.requires_grad})"


def _lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _make(value, parents, vjps) -> Node:
    if not _grad_on():
        return Node(value)
    out = Node(value)
    out.parents = tuple(parents)
    out.vjps = tuple(vjps)
    return out


def _accum(node: Node, g: np.ndarray):
    # Reduce broadcasted gradient back to the parent's shape.
    while g.ndim > node.value.ndim:
        g = g.sum(axis=0)
    for ax, n in enumerate(node.value.shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad = node.grad + g


def backward(loss: Node):
    """Populate .grad on every node reachable from loss (seeded with 1)."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            _accum(parent, vjp(node.grad))


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _lift(a), _lift(b)
    return _make(a.value + b.value, (a, b), (lambda g: g, lambda g: g))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    return _make(a.value - b.value, (a, b), (lambda g: g, lambda g: -g))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), (lambda g: g * bv, lambda g: g * av))


def scale(a, c: float):
    a = _lift(a)
    return _make(a.value * c, (a,), (lambda g: g * c,))


def add_const(a, c: float):
    a = _lift(a)
    return _make(a.value + c, (a,), (lambda g: g,))


def neg(a):
    return scale(a, -1.0)


def exp(a):
    a = _lift(a)
    out = np.exp(a.value)
    return _make(out, (a,), (lambda g: g * out,))


def log(a):
    a = _lift(a)
    av = a.value
    return _make(np.log(av), (a,), (lambda g: g / av,))


def sigmoid(a):
    a = _lift(a)
    from .numerics import sigmoid as _sig

    out = _sig(a.value)
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),))


def relu(a):
    a = _lift(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), (lambda g: g * mask,))


def nsum(a):
    a = _lift(a)
    shp = a.value.shape
    return _make(np.asarray(a.value.sum()), (a,), (lambda g: np.broadcast_to(g, shp),))


def mean(a):
    a = _lift(a)
    n = a.value.size
    shp = a.value.shape
    return _make(
        np.asarray(a.value.mean()), (a,), (lambda g: np.broadcast_to(g / n, shp),)
    )


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shp):
    a = _lift(a)
    old = a.value.shape
    return _make(a.value.reshape(shp), (a,), (lambda g: g.reshape(old),))


def transpose(a, axes):
    a = _lift(a)
    inv = np.argsort(axes)
    return _make(
        np.ascontiguousarray(a.value.transpose(axes)),
        (a,),
        (lambda g: np.ascontiguousarray(g.transpose(inv)),),
    )


def channel_slice(a, start: int, stop: int):
    """Slice channels (axis 1) of a NCHW tensor."""
    a = _lift(a)
    width = a.value.shape[1]

    def vjp(g):
        out = np.zeros(a.value.shape[:1] + (width,) + a.value.shape[2:])
        out[:, start:stop] = g
        return out

    return _make(np.ascontiguousarray(a.value[:, start:stop]), (a,), (vjp,))


def channel_concat(a, b):
    a, b = _lift(a), _lift(b)
    na = a.value.shape[1]
    return _make(
        np.concatenate([a.value, b.value], axis=1),
        (a, b),
        (lambda g: g[:, :na], lambda g: g[:, na:]),
    )


def scatter_add(base, src, idx: np.ndarray):
    """base + (src scattered into channels idx); idx indexes axis 1 of base."""
    base, src = _lift(base), _lift(src)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= base.value.shape[1]):
        raise IndexError("scatter-add channel index out of range")
    out = base.value.copy()
    out[:, idx] += src.value
    return _make(out, (base, src), (lambda g: g, lambda g: g[:, idx]))


def squeeze2x2(a):
    """Space-to-depth: (B,C,H,W) -> (B,4C,H/2,W/2), channel-major offsets."""
    a = _lift(a)
    B, C, H, W = a.value.shape
    if H % 2 or W % 2:
        raise ValueError("squeeze needs even spatial dims")

    def fwd(x):
        return (
            x.reshape(B, C, H // 2, 2, W // 2, 2)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(B, 4 * C, H // 2, W // 2)
        )

    def vjp(g):
        return (
            g.reshape(B, C, 2, 2, H // 2, W // 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(B, C, H, W)
        )

    return _make(np.ascontiguousarray(fwd(a.value)), (a,), (vjp,))


def unsqueeze2x2(a):
    """Inverse of squeeze2x2: (B,4C,h,w) -> (B,C,2h,2w)."""
    a = _lift(a)
    B, C4, h, w = a.value.shape
    if C4 % 4:
        raise ValueError("channel count must be divisible by 4")
    C = C4 // 4

    def fwd(x):
        return (
            x.reshape(B, C, 2, 2, h, w)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(B, C, 2 * h, 2 * w)
        )

    def vjp(g):
        return (
            g.reshape(B, C, h, 2, w, 2)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(B, 4 * C, h, w)
        )

    return _make(np.ascontiguousarray(fwd(a.value)), (a,), (vjp,))


# ---------------------------------------------------------------------------
# convolution


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B,C,H,W) -> (B, C*k*k, H*W) patch matrix with same-padding.

    The layout keeps the batched GEMM transpose-free: y = W_mat @ cols.
    """
    B, C, H, W = x.shape
    pad = (k - 1) // 2
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad : pad + H, pad : pad + W] = x
    cols = np.empty((B, C, k * k, H, W))
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = xp[:, :, i : i + H, j : j + W]
    return cols.reshape(B, C * k * k, H * W)


def conv2d_raw(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    """Plain float convolution, stride 1, same padding, odd kernel."""
    B, C, H, W = x.shape
    Cout, Cin, k, _ = w.shape
    if C != Cin:
        raise ValueError(f"channel mismatch: input has {C}, kernel expects {Cin}")
    y = np.matmul(w.reshape(Cout, Cin * k * k), im2col(x, k))
    if b is not None:
        y += b[:, None]
    return y.reshape(B, Cout, H, W)


def conv2d(x, w, b=None):
    """Tape-aware convolution; the input gradient reuses the forward kernel
    via the flipped-transposed-weights identity (exact for stride 1)."""
    xn, wn = _lift(x), _lift(w)
    bn = _lift(b) if b is not None else None
    xv, wv = xn.value, wn.value
    B, C, H, W = xv.shape
    Cout, Cin, k, _ = wv.shape
    if C != Cin:
        raise ValueError(f"channel mismatch: input has {C}, kernel expects {Cin}")
    cols = im2col(xv, k)
    y = np.matmul(wv.reshape(Cout, Cin * k * k), cols)
    if bn is not None:
        y += bn.value[:, None]
    y = y.reshape(B, Cout, H, W)

    def vjp_x(g):
        w_flip = np.ascontiguousarray(wv.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        return conv2d_raw(g, w_flip, None)

    def vjp_w(g):
        gm = g.reshape(B, Cout, H * W)
        return np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wv.shape)

    if bn is None:
        return _make(y, (xn, wn), (vjp_x, vjp_w))

    def vjp_b(g):
        return g.sum(axis=(0, 2, 3))

    return _make(y, (xn, wn, bn), (vjp_x, vjp_w, vjp_b))


# ---------------------------------------------------------------------------
# straight-through ops


def round_ste(a):
    """Round half-away-from-zero; gradient is the identity everywhere."""
    a = _lift(a)
    return _make(round_half_away(a.value), (a,), (lambda g: g,))


def binarize_ste(a, threshold: float = 0.5):
    """Gate binarization I(g > threshold) with identity gradient."""
    a = _lift(a)
    return _make((a.value > threshold).astype(np.float64), (a,), (lambda g: g,))


def fake_quantize(r, s, signed: bool):
    """LSQ fake quantization: dequantize(quantize(r)) with learned scale s.

    Backward delegates to quant.quantizer_backward so the tape and the
    standalone quantizer share one definition of the gradients.
    """
    rn, sn = _lift(r), _lift(s)
    p = quant.QuantizerParams(scale=sn.value, signed=signed)
    out = quant.dequantize(quant.quantize(rn.value, p))

    cache: dict = {}

    def both(g):
        key = id(g)
        if cache.get("key") != key:
            cache["key"] = key
            cache["grads"] = quant.quantizer_backward(rn.value, p, g)
        return cache["grads"]

    return _make(out, (rn, sn), (lambda g: both(g)[0], lambda g: both(g)[1]))


# ---------------------------------------------------------------------------
# discretized logistic log-mass


def _logpmf_terms(z: np.ndarray, mu: np.ndarray, log_s: np.ndarray):
    """Stable log pmf of the integer logistic plus the two boundary terms.

    pmf(z) = sigmoid((z + 1/2 - mu)/s) - sigmoid((z - 1/2 - mu)/s).
    Reflecting z - mu into the left tail keeps the CDF difference away from
    cancellation, so the log never underflows to -inf for any finite input.
    """
    from .numerics import LN2, log1mexp, log_sigmoid

    s = np.exp(log_s)
    d = z - mu
    sign = np.where(d > 0, -1.0, 1.0)
    dr = d * sign  # reflected distance, always <= 0
    a = (dr + 0.5) / s
    b = (dr - 0.5) / s
    la = log_sigmoid(a)
    lb = log_sigmoid(b)
    ln_pmf = la + log1mexp(la - lb)
    # d(ln pmf)/d(a or b) expressed via exp of bounded log differences
    term_a = np.exp(la + log_sigmoid(-a) - ln_pmf)
    term_b = np.exp(lb + log_sigmoid(-b) - ln_pmf)
    # gradient wrt (z - mu), undoing the reflection
    dlnpmf_dd = sign * (term_a - term_b) / s
    dlnpmf_dlogs = -(a * term_a - b * term_b)
    return ln_pmf / LN2, dlnpmf_dd / LN2, dlnpmf_dlogs / LN2


def logistic_logpmf_raw(z, mu, log_s) -> np.ndarray:
    """log2 pmf of the discretized logistic, stable in both tails."""
    z = np.asarray(z, dtype=np.float64)
    out, _, _ = _logpmf_terms(z, np.asarray(mu, float), np.asarray(log_s, float))
    return out


def logistic_logpmf(z, mu, log_s):
    """Tape op returning per-dimension log2 probabilities.

    z may be a Node (gradients flow into the flow via the STE rounding) or a
    plain integer array.
    """
    zn, mn, ln = _lift(z), _lift(mu), _lift(log_s)
    out, dz, dls = _logpmf_terms(zn.value, mn.value, ln.value)
    return _make(
        out,
        (zn, mn, ln),
        (lambda g: g * dz, lambda g: g * (-dz), lambda g: g * dls),
    )
