"""Carry-less range coder (Subbotin) with 64-bit state and byte-wise renormalisation.

Encoder state is ``(low, range)`` with ``low + range <= 2^64`` at all times.
Each symbol with cumulative frequency ``cum`` and frequency ``freq`` out of
``total`` narrows the interval to ``r = range // total``,
``low += r * cum``, ``range = r * freq``. While the top byte of ``low`` and
``low + range`` agree, or ``range`` drops below ``BOT`` (in which case it is
cut to ``-low mod BOT`` so the top byte is settled), the top byte is emitted.
The flush writes the shortest big-endian prefix V with
``low <= V < low + range``; the decoder treats bytes past the end as zeros.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import List, Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 56
BOT = 1 << 40
MASK = (1 << 64) - 1


class CorruptPayloadError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (payload byte offset {offset})")
        self.offset = offset


def quantize_pmf(p: np.ndarray) -> np.ndarray:
    """Integer frequencies summing to 2^16 with every bin >= 1.

    ``p`` is (..., n) nonnegative and sums to one along the last axis.
    """
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[-1]
    if n > TOTAL:
        raise ValueError("alphabet larger than the CDF precision")
    freq = 1 + np.floor(p * (TOTAL - n)).astype(np.int64)
    rem = TOTAL - freq.sum(-1)
    top = np.argmax(p, axis=-1)
    np.put_along_axis(freq, top[..., None], np.take_along_axis(freq, top[..., None], -1) + rem[..., None], -1)
    return freq


def cdf_from_freq(freq: np.ndarray) -> np.ndarray:
    freq = np.asarray(freq, dtype=np.int64)
    c = np.zeros(freq.shape[:-1] + (freq.shape[-1] + 1,), dtype=np.int64)
    np.cumsum(freq, axis=-1, out=c[..., 1:])
    return c


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    def encode(self, cum: int, freq: int, total: int = TOTAL):
        if freq <= 0 or cum + freq > total:
            raise ValueError("invalid symbol interval")
        r = self.range // total
        self.low += r * cum
        self.range = r * freq
        while True:
            if (self.low ^ (self.low + self.range)) >= TOP:
                if self.range >= BOT:
                    break
                self.range = (-self.low) & (BOT - 1)
            self.out.append(self.low >> 56)
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK

    def finish(self) -> bytes:
        lo, hi = self.low, self.low + self.range
        for n in range(0, 9):
            unit = 1 << (64 - 8 * n)
            v = -(-lo // unit) * unit
            if v < hi:
                self.out += (v >> (64 - 8 * n)).to_bytes(n, "big") if n else b""
                break
        out = bytes(self.out)
        self.out = bytearray()
        return out


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def decode(self, cdf: Sequence[int], total: int = TOTAL) -> int:
        r = self.range // total
        v = (self.code - self.low) // r
        if v >= total or v < 0:
            raise CorruptPayloadError("code value outside the coding interval", max(self.pos - 8, 0))
        s = bisect_right(cdf, v) - 1
        cum, freq = int(cdf[s]), int(cdf[s + 1]) - int(cdf[s])
        self.low += r * cum
        self.range = r * freq
        while True:
            if (self.low ^ (self.low + self.range)) >= TOP:
                if self.range >= BOT:
                    break
                self.range = (-self.low) & (BOT - 1)
            self.code = ((self.code << 8) & MASK) | self._byte()
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK
        return s

    def check_end(self):
        """Raise if the decoder consumed far beyond the payload."""
        if self.pos - 8 > len(self.data):
            raise CorruptPayloadError("payload exhausted", len(self.data))


def range_encode(symbols: Sequence[int], cdfs: Sequence[Sequence[int]]) -> bytes:
    if len(symbols) == 0:
        return b""
    enc = RangeEncoder()
    for s, c in zip(symbols, cdfs):
        enc.encode(int(c[s]), int(c[s + 1]) - int(c[s]))
    return enc.finish()


def range_decode(data: bytes, cdfs: Sequence[Sequence[int]]) -> List[int]:
    if len(cdfs) == 0:
        return []
    dec = RangeDecoder(data)
    out = [dec.decode(list(c)) for c in cdfs]
    dec.check_end()
    return out


def ideal_bits(symbols: Sequence[int], freqs: np.ndarray) -> float:
    """Sum of -log2 of the quantised probabilities of ``symbols``."""
    f = np.asarray(freqs, dtype=np.float64)
    p = f[np.arange(len(symbols)), np.asarray(symbols)] / TOTAL
    return float(-np.log2(p).sum())
