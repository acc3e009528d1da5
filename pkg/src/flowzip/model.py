"""The multi-scale integer discrete flow.

Each level squeezes space into channels, applies additive couplings with
alternating orientation, then factors out half the channels under a
conditional logistic prior predicted from the retained half; the last level
keeps everything under a learnable per-channel prior. All latent-domain
arithmetic is integer, so the flow inverts exactly for any parameter values
and any of the three execution paths (float, fake-quantized, integer).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataFormatError
from .layers import (
    NET_INPUT_SCALE,
    ConvLayer,
    QuantizedTensor,
    ResidualBlock,
    block_int,
    block_sim,
    calibrate_activation,
    fold_bias,
    int_conv_acc,
)
from .numerics import round_half_away

LOG_S_INIT = float(np.log(32.0))
MU_INIT = 128.0


@dataclass
class FlowConfig:
    levels: int = 2
    couplings: int = 4
    hidden: int = 32
    blocks: int = 2
    in_channels: int = 3

    def validate(self):
        if self.levels < 1 or self.couplings < 1 or self.blocks < 1:
            raise DataFormatError("levels, couplings, and blocks must be >= 1")
        c = self.in_channels * 4
        for _ in range(self.levels - 1):
            if c % 2:
                raise DataFormatError("channel count must stay even across levels")
            c = (c // 2) * 4


def space_to_depth(x: np.ndarray) -> np.ndarray:
    """(B,C,H,W) -> (B,4C,H/2,W/2); channel-major, 2x2 offsets row-major."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DataFormatError("spatial dims must be even to squeeze")
    return (
        x.reshape(B, C, H // 2, 2, W // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(B, 4 * C, H // 2, W // 2)
    )


def depth_to_space(x: np.ndarray) -> np.ndarray:
    """Inverse of space_to_depth."""
    B, C4, h, w = x.shape
    if C4 % 4:
        raise DataFormatError("channel count must be divisible by 4 to unsqueeze")
    C = C4 // 4
    return (
        x.reshape(B, C, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, 2 * h, 2 * w)
    )


@dataclass
class SimCtx:
    act_quant: bool = False
    weight_quant: bool = False
    calibrate: bool = False


class CouplingNet:
    """stem conv -> relu -> residual blocks -> zero-initialized output conv.

    The stem is never quantized; the output conv has no activation quantizer
    on its output (the coupling rounds it to integers anyway).
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        hidden: int,
        n_blocks: int,
        rng: np.random.Generator,
        quantizable: bool = True,
        out_bias_init: np.ndarray | None = None,
    ):
        self.stem = ConvLayer(c_in, hidden, rng)
        self.blocks = [ResidualBlock.build(hidden, rng) for _ in range(n_blocks)]
        self.out = ConvLayer(hidden, c_out, zero_init=True)
        if out_bias_init is not None:
            self.out.b.value[...] = out_bias_init
        self.q_out = ad.Node(np.ones(1), requires_grad=True)
        self.quantizable = quantizable

    def forward_sim(self, u, ctx: SimCtx):
        """u holds raw latent values (integral); returns the net output Node."""
        aq = ctx.act_quant and self.quantizable
        wq = ctx.weight_quant and self.quantizable
        v = ad.add_const(ad.scale(u, NET_INPUT_SCALE), -1.0)
        h = ad.relu(ad.conv2d(v, self.stem.w, self.stem.b))
        for blk in self.blocks:
            if ctx.calibrate and aq:
                calibrate_activation(blk.q_in, h.value)
            h = block_sim(h, blk, aq, wq, calibrate=ctx.calibrate)
        if ctx.calibrate and aq:
            calibrate_activation(self.q_out, h.value)
        if aq:
            h = ad.fake_quantize(h, self.q_out, signed=False)
        w_eff = self.out.effective_weight(wq)
        return ad.conv2d(h, w_eff, self.out.b)

    def forward_int(self, u: np.ndarray) -> np.ndarray:
        """Integer path: int8 tensors between the (float) stem and the output.

        Returns the dequantized output as float64; the caller rounds it.
        """
        v = u.astype(np.float64) * NET_INPUT_SCALE - 1.0
        h = np.maximum(ad.conv2d_raw(v, self.stem.w.value, self.stem.b.value), 0.0)
        s0 = float(self.blocks[0].q_in.value[0])
        q = QuantizedTensor(
            values=np.clip(round_half_away(h / s0), 0, 255),
            scale=np.atleast_1d(s0),
            signed=False,
        )
        for i, blk in enumerate(self.blocks):
            nxt = (
                float(self.blocks[i + 1].q_in.value[0])
                if i + 1 < len(self.blocks)
                else float(self.q_out.value[0])
            )
            q = block_int(q, blk, nxt)
        w_q = self.out.quantized_weight()
        sw = self.out.wscale.value
        sx = float(q.scale[0])
        acc = int_conv_acc(q.values, w_q.values, fold_bias(self.out.b.value, sw, sx))
        return acc * (sw * sx)[None, :, None, None]

    def conv_layers(self):
        yield self.stem
        for blk in self.blocks:
            yield blk.conv_a
            yield blk.conv_b
        yield self.out


class CouplingLayer:
    """Additive coupling: one half is shifted by the rounded net output.

    Orientation alternates per coupling index: even couplings transform the
    second channel half, odd ones the first.
    """

    def __init__(self, channels: int, transform_second: bool, net: CouplingNet):
        self.m = channels // 2
        self.channels = channels
        self.transform_second = transform_second
        self.net = net

    def _split(self, x):
        if self.transform_second:
            return (0, self.m), (self.m, self.channels)
        return (self.m, self.channels), (0, self.m)

    def forward_sim(self, x, ctx: SimCtx):
        (a0, a1), (b0, b1) = self._split(x)
        xa = ad.channel_slice(x, a0, a1)
        xb = ad.channel_slice(x, b0, b1)
        zb = ad.add(xb, ad.round_ste(self.net.forward_sim(xa, ctx)))
        if self.transform_second:
            return ad.channel_concat(xa, zb)
        return ad.channel_concat(zb, xa)

    def forward_int_domain(self, x: np.ndarray, t_fn) -> np.ndarray:
        (a0, a1), (b0, b1) = self._split(x)
        xa, xb = x[:, a0:a1], x[:, b0:b1]
        t = round_half_away(t_fn(self.net, xa)).astype(np.int64)
        zb = xb + t
        return (
            np.concatenate([xa, zb], axis=1)
            if self.transform_second
            else np.concatenate([zb, xa], axis=1)
        )

    def inverse_int_domain(self, z: np.ndarray, t_fn) -> np.ndarray:
        (a0, a1), (b0, b1) = self._split(z)
        za, zb = z[:, a0:a1], z[:, b0:b1]
        t = round_half_away(t_fn(self.net, za)).astype(np.int64)
        xb = zb - t
        return (
            np.concatenate([za, xb], axis=1)
            if self.transform_second
            else np.concatenate([xb, za], axis=1)
        )


class Level:
    def __init__(
        self,
        channels: int,
        cfg: FlowConfig,
        rng: np.random.Generator,
        is_last: bool,
    ):
        self.channels = channels
        self.couplings = [
            CouplingLayer(
                channels,
                transform_second=(d % 2 == 0),
                net=CouplingNet(
                    channels // 2,
                    channels - channels // 2,
                    cfg.hidden,
                    cfg.blocks,
                    rng,
                ),
            )
            for d in range(cfg.couplings)
        ]
        self.is_last = is_last
        if is_last:
            self.retained, self.factored = channels, 0
            self.prior_net = None
        else:
            self.retained = channels // 2
            self.factored = channels - self.retained
            bias = np.concatenate(
                [np.full(self.factored, MU_INIT), np.full(self.factored, LOG_S_INIT)]
            )
            self.prior_net = CouplingNet(
                self.retained,
                2 * self.factored,
                cfg.hidden,
                2,
                rng,
                quantizable=False,
                out_bias_init=bias,
            )

    def prior_params_sim(self, retained):
        # Prior networks stay unquantized in every path.
        out = self.prior_net.forward_sim(retained, SimCtx())
        mu = ad.channel_slice(out, 0, self.factored)
        log_s = ad.channel_slice(out, self.factored, 2 * self.factored)
        return mu, log_s

    def prior_params_raw(self, retained_values: np.ndarray):
        """Prior-net evaluation on plain arrays (used by the codec paths)."""
        with ad.no_grad():
            node = ad.Node(retained_values.astype(np.float64))
            out = self.prior_net.forward_sim(node, SimCtx()).value
        return out[:, : self.factored], out[:, self.factored :]


class FlowResult:
    """Latents in decode-conditioning order shallow-to-deep, plus priors."""

    def __init__(self, latents, priors, log2p):
        self.latents = latents  # [factored level 1, ..., final]
        self.priors = priors  # matching (mu, log_s) float arrays
        self.log2p = log2p  # per-image analytic log2 probability, shape (B,)


class FlowModel:
    def __init__(self, cfg: FlowConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.levels: list[Level] = []
        c = cfg.in_channels
        for li in range(cfg.levels):
            c *= 4
            level = Level(c, cfg, rng, is_last=(li == cfg.levels - 1))
            self.levels.append(level)
            c = level.retained
        self.final_channels = self.levels[-1].channels
        self.final_mu = ad.Node(
            np.full(self.final_channels, MU_INIT), requires_grad=True
        )
        self.final_log_s = ad.Node(
            np.full(self.final_channels, LOG_S_INIT), requires_grad=True
        )
        self.gated = False
        self.act_quant = False
        self.weight_quant = False
        self.pruned = False
        self.stage = 0

    # -- structure ---------------------------------------------------------

    def coupling_nets(self):
        for lvl in self.levels:
            for c in lvl.couplings:
                yield c.net

    def gates(self):
        out = []
        for net in self.coupling_nets():
            for blk in net.blocks:
                out.extend(blk.gates())
        return out

    def attach_gates(self, alpha: float):
        for net in self.coupling_nets():
            for blk in net.blocks:
                blk.attach_gates(alpha)
        self.gated = True

    def check_input(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DataFormatError(
                f"expected (B,{self.cfg.in_channels},H,W) input, got {x.shape}"
            )
        div = 2**self.cfg.levels
        if x.shape[2] % div or x.shape[3] % div:
            raise DataFormatError(
                f"spatial dims must be divisible by {div}, got {x.shape[2:]}"
            )

    def sim_ctx(self, calibrate: bool = False) -> SimCtx:
        return SimCtx(self.act_quant, self.weight_quant, calibrate)

    # -- training path (tape Nodes end to end) ------------------------------

    def training_forward(self, x: np.ndarray, calibrate: bool = False):
        """Returns (total log2 probability Node, per-level latent Nodes)."""
        self.check_input(np.asarray(x))
        ctx = self.sim_ctx(calibrate)
        h = ad.Node(np.asarray(x, dtype=np.float64))
        logps = []
        for lvl in self.levels:
            h = ad.squeeze2x2(h)
            for coup in lvl.couplings:
                h = coup.forward_sim(h, ctx)
            if not lvl.is_last:
                retained = ad.channel_slice(h, 0, lvl.retained)
                factored = ad.channel_slice(h, lvl.retained, lvl.channels)
                mu, log_s = lvl.prior_params_sim(retained)
                logps.append(ad.nsum(ad.logistic_logpmf(factored, mu, log_s)))
                h = retained
        mu = ad.reshape(self.final_mu, (1, -1, 1, 1))
        log_s = ad.reshape(self.final_log_s, (1, -1, 1, 1))
        logps.append(ad.nsum(ad.logistic_logpmf(h, mu, log_s)))
        total = logps[0]
        for term in logps[1:]:
            total = ad.add(total, term)
        return total

    # -- inference paths (exact integer latent domain) ----------------------

    def _t_int(self, net: CouplingNet, xa: np.ndarray) -> np.ndarray:
        return net.forward_int(xa)

    def _t_fn(self, path: str):
        """Coupling-net evaluator for an inference path.

        "float" disables all quantizers, "fake" simulates them in float
        arithmetic, "int" runs the integer kernels.
        """
        if path == "int":
            if not (self.act_quant and self.weight_quant):
                raise DataFormatError("integer path requires a stage-5 checkpoint")
            return self._t_int
        if path == "float":
            ctx = SimCtx(False, False)
        elif path == "fake":
            if not self.act_quant:
                raise DataFormatError("fake-quant path requires a quantized checkpoint")
            ctx = SimCtx(self.act_quant, self.weight_quant)
        else:
            raise DataFormatError(f"unknown inference path: {path}")

        def t_sim(net: CouplingNet, xa: np.ndarray) -> np.ndarray:
            with ad.no_grad():
                return net.forward_sim(ad.Node(xa.astype(np.float64)), ctx).value

        return t_sim

    def flow_forward(self, x: np.ndarray, path: str = "float") -> FlowResult:
        """Map images to integer latents plus their priors and log2 mass."""
        x = np.asarray(x)
        self.check_input(x)
        t_fn = self._t_fn(path)
        h = x.astype(np.int64)
        latents, priors = [], []
        log2p = np.zeros(x.shape[0])
        for lvl in self.levels:
            h = space_to_depth(h)
            for coup in lvl.couplings:
                h = coup.forward_int_domain(h, t_fn)
            if not lvl.is_last:
                retained = h[:, : lvl.retained]
                factored = h[:, lvl.retained :]
                mu, log_s = lvl.prior_params_raw(retained)
                latents.append(factored)
                priors.append((mu, log_s))
                log2p += ad.logistic_logpmf_raw(factored, mu, log_s).sum(axis=(1, 2, 3))
                h = retained
        mu = self.final_mu.value.reshape(1, -1, 1, 1)
        log_s = self.final_log_s.value.reshape(1, -1, 1, 1)
        latents.append(h)
        priors.append((mu, log_s))
        log2p += ad.logistic_logpmf_raw(h, mu, log_s).sum(axis=(1, 2, 3))
        return FlowResult(latents, priors, log2p)

    def flow_inverse(self, latents: list[np.ndarray], path: str = "float") -> np.ndarray:
        """Exact inverse: reconstruct images from integer latents."""
        if len(latents) != len(self.levels):
            raise DataFormatError(
                f"expected {len(self.levels)} latent tensors, got {len(latents)}"
            )
        t_fn = self._t_fn(path)
        h = np.asarray(latents[-1], dtype=np.int64)
        if h.ndim != 4 or h.shape[1] != self.final_channels:
            raise DataFormatError("final latent has the wrong shape")
        for li in reversed(range(len(self.levels))):
            lvl = self.levels[li]
            if not lvl.is_last:
                fac = np.asarray(latents[li], dtype=np.int64)
                if fac.shape[1] != lvl.factored or fac.shape[2:] != h.shape[2:]:
                    raise DataFormatError("factored latent has the wrong shape")
                h = np.concatenate([h, fac], axis=1)
            for coup in reversed(lvl.couplings):
                h = coup.inverse_int_domain(h, t_fn)
            h = depth_to_space(h)
        return h

    def latent_dim(self, h: int, w: int) -> int:
        return self.cfg.in_channels * h * w
