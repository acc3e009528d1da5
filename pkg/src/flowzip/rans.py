"""Range asymmetric numeral systems coder with logistic-derived mass tables.

The coder keeps a single integer state in [2**31, 2**63), emitting 32-bit
words on renormalization. Encoding is stack-like (last pushed, first
decoded), so streams are encoded in reverse of the decoder's symbol order.

Mass tables hold integer frequencies F over a contiguous symbol alphabet
[lo, hi] with sum(F) == M exactly and F >= 1 everywhere, so any in-alphabet
symbol is encodable no matter how badly the model mispredicts it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptStreamError, DataFormatError
from .numerics import sigmoid

RANS_L = 1 << 31  # lower bound of the normalization interval
WORD_MASK = 0xFFFFFFFF
DEFAULT_M = 1 << 16


@dataclass
class MassTable:
    """Integer frequencies and cumulative sums over [lo, hi], total M."""

    lo: int
    hi: int
    F: np.ndarray
    C: np.ndarray  # length K+1, C[0] = 0, C[K] = M
    M: int

    def __post_init__(self):
        # int32 suffices whenever M fits (cumulative sums are bounded by M)
        dtype = np.int32 if self.M <= 2**31 - 1 else np.int64
        self.F = np.asarray(self.F, dtype=dtype)
        self.C = np.asarray(self.C, dtype=dtype)
        # precomputed renormalization base: state must stay below base * F
        self.renorm_base = (RANS_L // self.M) << 32

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    def cross_entropy_bits(self, counts: np.ndarray) -> float:
        """sum over symbols of count * -log2(F/M); counts indexed from lo."""
        return float(np.sum(counts * -np.log2(self.F / self.M)))


def _raw_probabilities(mu: float, s: float, lo: int, hi: int) -> np.ndarray:
    """Tail-collapsed discretized logistic over [lo, hi].

    Interior masses come from the stable log-pmf; the boundary symbols absorb
    their whole tails. The two edge expressions mirror each other exactly so
    integer-centered tables come out palindromic.
    """
    from .autodiff import logistic_logpmf_raw

    z = np.arange(lo, hi + 1, dtype=np.float64)
    p = np.exp2(logistic_logpmf_raw(z, mu, np.log(s)))
    p[0] = sigmoid(np.asarray((lo + 0.5 - mu) / s))
    p[-1] = sigmoid(np.asarray(-(hi - 0.5 - mu) / s))
    return p


def mass_table(mu: float, s: float, lo: int, hi: int, M: int = DEFAULT_M) -> MassTable:
    """Quantize the clipped logistic to integer frequencies summing to M.

    Floor-then-largest-remainder, with a floor of one per symbol. Remainder
    ties are resolved all-or-none per tie group (preserving symmetry), any
    residue or floor deficit going to the largest-frequency symbol.
    """
    if not (lo < hi):
        raise DataFormatError("mass table needs lo < hi")
    K = hi - lo + 1
    if M < K:
        raise DataFormatError(f"total mass {M} cannot cover {K} symbols")
    if not (s > 0 and np.isfinite(s) and np.isfinite(mu)):
        raise DataFormatError("mass table needs finite mu and positive s")

    target = _raw_probabilities(mu, s, lo, hi) * M
    base = np.floor(target)
    rem = target - base
    F = base.astype(np.int64)

    leftover = int(M - F.sum())
    if leftover > 0:
        order = np.argsort(-rem, kind="stable")
        i = 0
        while leftover > 0 and i < K:
            j = i
            while j < K and rem[order[j]] == rem[order[i]]:
                j += 1
            group = order[i:j]
            if len(group) <= leftover:
                F[group] += 1
                leftover -= len(group)
            i = j
        if leftover > 0:
            F[np.argmax(F)] += leftover
            leftover = 0

    zero = F == 0
    F[zero] = 1
    deficit = int(F.sum() - M)
    while deficit > 0:
        j = int(np.argmax(F))
        take = min(deficit, int(F[j]) - 1)
        if take == 0:
            raise DataFormatError("mass table cannot satisfy the frequency floor")
        F[j] -= take
        deficit -= take

    C = np.zeros(K + 1, dtype=np.int64)
    np.cumsum(F, out=C[1:])
    return MassTable(lo=lo, hi=hi, F=F, C=C, M=M)


def rans_encode_step(x: int, sym: int, table: MassTable) -> int:
    """Pure encode update: floor(x/F)*M + C + x mod F (no renormalization)."""
    f = int(table.F[sym])
    return (x // f) * table.M + int(table.C[sym]) + x % f


def rans_decode_step(x: int, table: MassTable) -> tuple[int, int]:
    """Recover (symbol index, previous state) from one encode step."""
    cf = x % table.M
    sym = int(np.searchsorted(table.C, cf, side="right")) - 1
    x_prev = (x // table.M) * int(table.F[sym]) + cf - int(table.C[sym])
    return sym, x_prev


class RansEncoder:
    """Streaming encoder; callers push symbols in reverse decode order."""

    def __init__(self):
        self.state = RANS_L
        self.words: list[int] = []

    def push(self, sym: int, table: MassTable):
        f = int(table.F[sym])
        threshold = table.renorm_base * f
        while self.state >= threshold:
            self.words.append(self.state & WORD_MASK)
            self.state >>= 32
        self.state = (self.state // f) * table.M + int(table.C[sym]) + self.state % f

    def mark(self) -> int:
        """Current emitted-word count (chunk boundary for containers)."""
        return len(self.words)

    def payload(self, start: int = 0, end: int | None = None, final: bool = False) -> bytes:
        words = self.words[start : len(self.words) if end is None else end]
        out = np.asarray(words, dtype="<u4").tobytes()
        if final:
            out += struct.pack("<Q", self.state)
        return out


class RansDecoder:
    """Streaming decoder consuming emitted words in reverse emission order."""

    def __init__(self, state: int):
        if not (RANS_L <= state < 1 << 63):
            raise CorruptStreamError("initial coder state out of range")
        self.state = state
        self.words: list[int] = []
        self.wpos = 0

    def feed(self, payload: bytes):
        """Load a chunk of 32-bit words (consumed back to front)."""
        if len(payload) % 4:
            raise CorruptStreamError("payload length is not a multiple of 4")
        self.words = np.frombuffer(payload, dtype="<u4").tolist()
        self.wpos = len(self.words)

    def pull(self, table: MassTable) -> int:
        sym, self.state = rans_decode_step(self.state, table)
        while self.state < RANS_L:
            if self.wpos == 0:
                raise CorruptStreamError("coder state underflow: truncated payload")
            self.wpos -= 1
            self.state = (self.state << 32) | self.words[self.wpos]
        return sym

    def chunk_exhausted(self) -> bool:
        return self.wpos == 0


def encode_stream(symbols, tables: list[MassTable]) -> bytes:
    """Encode one symbol per table; empty input yields the 8-byte state."""
    if len(symbols) != len(tables):
        raise DataFormatError("need exactly one mass table per symbol")
    enc = RansEncoder()
    for sym, table in zip(reversed(list(symbols)), reversed(tables)):
        enc.push(int(sym), table)
    return enc.payload(final=True)


def decode_stream(payload: bytes, tables: list[MassTable]):
    """Inverse of encode_stream; validates full word consumption and the
    final state returning to the initial bound."""
    if len(payload) < 8 or (len(payload) - 8) % 4:
        raise CorruptStreamError("malformed payload")
    (state,) = struct.unpack("<Q", payload[-8:])
    dec = RansDecoder(state)
    dec.feed(payload[:-8])
    out = [dec.pull(table) for table in tables]
    if not dec.chunk_exhausted() or dec.state != RANS_L:
        raise CorruptStreamError("payload did not decode to a clean final state")
    return out
