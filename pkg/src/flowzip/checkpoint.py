"""Versioned binary checkpoint format.

Layout (little-endian):

    magic   8 bytes  "IODFCKPT"
    version u16      format version (1)
    flags   u16      bit0 gated, bit1 act_quant, bit2 weight_quant, bit3 pruned
    stage   u8       last completed training stage (0..5)
    L, D, blocks u8  architecture
    hidden  u16
    in_ch   u8
    splits  L x (retained u16, factored u16)
    count   u32      number of arrays
    arrays  count x (kind u8 | ndim u8 | ndim x u32 dims | payload)
             kind 0: f32 parameters   kind 1: f32 gates
             kind 2: f32 quantizer scales   kind 3: u32 kept-filter indices
    checksum u64     blake2b-64 of all preceding bytes

Arrays appear in model declaration order. Parameters are stored as 32-bit
floats; in memory the model computes in float64.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import ChecksumError, DataFormatError
from .model import FlowConfig, FlowModel

MAGIC = b"IODFCKPT"
VERSION = 1

KIND_PARAM, KIND_GATE, KIND_QSCALE, KIND_INDEX = 0, 1, 2, 3

FLAG_GATED, FLAG_ACT_Q, FLAG_WEIGHT_Q, FLAG_PRUNED = 1, 2, 4, 8


def checksum64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _named_entries(model: FlowModel):
    """Yield (kind, name, node-or-array) in fixed declaration order.

    Gates are serialized only for gated unpruned models; kept-index lists
    only for pruned ones; quantizer scales only once quantization is on.
    """
    gated = model.gated and not model.pruned

    def conv_entries(prefix, layer, quantizable):
        yield KIND_PARAM, f"{prefix}.w", layer.w
        yield KIND_PARAM, f"{prefix}.b", layer.b
        if gated and layer.gate is not None:
            yield KIND_GATE, f"{prefix}.gate", layer.gate.node
        if model.weight_quant and quantizable:
            yield KIND_QSCALE, f"{prefix}.wscale", layer.wscale

    for li, lvl in enumerate(model.levels):
        nets = [(f"level{li}.coup{d}", c.net) for d, c in enumerate(lvl.couplings)]
        if lvl.prior_net is not None:
            nets.append((f"level{li}.prior", lvl.prior_net))
        for name, net in nets:
            q = net.quantizable
            yield from conv_entries(f"{name}.stem", net.stem, False)
            for bi, blk in enumerate(net.blocks):
                bp = f"{name}.block{bi}"
                yield from conv_entries(f"{bp}.conv_a", blk.conv_a, q)
                yield from conv_entries(f"{bp}.conv_b", blk.conv_b, q)
                if model.pruned and q:
                    yield KIND_INDEX, f"{bp}.idx_a", blk
                    yield KIND_INDEX, f"{bp}.idx_b", blk
                if model.act_quant and q:
                    yield KIND_QSCALE, f"{bp}.q_in", blk.q_in
                    yield KIND_QSCALE, f"{bp}.q_mid", blk.q_mid
            yield from conv_entries(f"{name}.out", net.out, q)
            if model.act_quant and q:
                yield KIND_QSCALE, f"{name}.q_out", net.q_out
    yield KIND_PARAM, "final.mu", model.final_mu
    yield KIND_PARAM, "final.log_s", model.final_log_s


def named_parameters(model: FlowModel):
    """(name, Node) pairs of everything the optimizer may touch."""
    for kind, name, obj in _named_entries(model):
        if kind == KIND_INDEX:
            continue
        yield name, obj


def serialize(model: FlowModel) -> bytes:
    parts = [MAGIC]
    flags = (
        (FLAG_GATED if model.gated else 0)
        | (FLAG_ACT_Q if model.act_quant else 0)
        | (FLAG_WEIGHT_Q if model.weight_quant else 0)
        | (FLAG_PRUNED if model.pruned else 0)
    )
    cfg = model.cfg
    parts.append(
        struct.pack(
            "<HHBBBBHB",
            VERSION,
            flags,
            model.stage,
            cfg.levels,
            cfg.couplings,
            cfg.blocks,
            cfg.hidden,
            cfg.in_channels,
        )
    )
    for lvl in model.levels:
        parts.append(struct.pack("<HH", lvl.retained, lvl.factored))

    arrays = []
    for kind, name, obj in _named_entries(model):
        if kind == KIND_INDEX:
            arr = obj.idx_a if name.endswith("idx_a") else obj.idx_b
            arrays.append((kind, np.asarray(arr, dtype=np.uint32)))
        else:
            arrays.append((kind, obj.value.astype(np.float32)))
    parts.append(struct.pack("<I", len(arrays)))
    for kind, arr in arrays:
        parts.append(struct.pack("<BB", kind, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", checksum64(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataFormatError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(data: bytes) -> FlowModel:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise DataFormatError("not a flowzip checkpoint (bad magic)")
    body, stored = data[:-8], struct.unpack("<Q", data[-8:])[0]
    if checksum64(body) != stored:
        raise ChecksumError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    version, flags, stage, L, D, blocks, hidden, in_ch = r.unpack("<HHBBBBHB")
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    splits = [r.unpack("<HH") for _ in range(L)]

    cfg = FlowConfig(levels=L, couplings=D, hidden=hidden, blocks=blocks, in_channels=in_ch)
    model = FlowModel(cfg, seed=0)
    model.stage = stage
    model.gated = bool(flags & FLAG_GATED)
    model.act_quant = bool(flags & FLAG_ACT_Q)
    model.weight_quant = bool(flags & FLAG_WEIGHT_Q)
    model.pruned = bool(flags & FLAG_PRUNED)
    for lvl, (ret, fac) in zip(model.levels, splits):
        if (lvl.retained, lvl.factored) != (ret, fac):
            raise DataFormatError("checkpoint split sizes do not match architecture")
    if model.gated and not model.pruned:
        model.attach_gates(0.8)

    (count,) = r.unpack("<I")
    entries = list(_named_entries(model))
    if count != len(entries):
        raise DataFormatError(
            f"checkpoint holds {count} arrays, model expects {len(entries)}"
        )
    for kind, name, obj in entries:
        akind, ndim = r.unpack("<BB")
        if akind != kind:
            raise DataFormatError(f"array kind mismatch at {name}")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        if kind == KIND_INDEX:
            arr = np.frombuffer(r.take(4 * n), dtype="<u4").reshape(shape)
            idx = arr.astype(np.int64)
            if name.endswith("idx_a"):
                obj.idx_a = idx
            else:
                obj.idx_b = idx
        else:
            arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
            value = arr.astype(np.float64)
            if not np.all(np.isfinite(value)):
                raise DataFormatError(f"non-finite values in checkpoint array {name}")
            obj.value = value
    if r.pos != len(body):
        raise DataFormatError("trailing bytes in checkpoint")
    _restore_pruned_shapes(model)
    return model


def _restore_pruned_shapes(model: FlowModel):
    # After loading a pruned checkpoint the narrow arrays already carry their
    # shapes; nothing to do beyond a consistency check.
    if not model.pruned:
        return
    for net in model.coupling_nets():
        for blk in net.blocks:
            if blk.idx_a is None or blk.idx_b is None:
                raise DataFormatError("pruned checkpoint is missing kept-filter indices")
            if blk.conv_a.w.value.shape[0] != len(blk.idx_a):
                raise DataFormatError("pruned conv shapes do not match index lists")


def save_model(model: FlowModel, path: str) -> int:
    """Write the checkpoint; returns its checksum (used as the model id)."""
    data = serialize(model)
    with open(path, "wb") as f:
        f.write(data)
    return checksum64(data)


def load_model(path: str) -> tuple[FlowModel, int]:
    """Read a checkpoint; returns (model, checksum of the file bytes)."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DataFormatError(f"cannot read checkpoint: {e}") from e
    return deserialize(data), checksum64(data)
