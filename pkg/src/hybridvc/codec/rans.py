"""Integer-only byte-wise rANS coder over 16-bit quantized CDF tables.

Stream layout produced by :func:`range_encode`::

    rANS payload (>= 4 bytes, final state first) | crc32(symbols) (4 bytes, big-endian)

The trailing CRC is computed over the decoded symbols, so decoding with the
wrong tables fails loudly instead of silently returning garbage.

Symbols outside a table's support are coded as the table's escape entry
followed by a bypass-coded value: 6 bits for the bit length of the zig-zag
mapped value, then the value itself in chunks of at most 8 bits.  Any value
with ``|v| < 2**31`` is representable.
"""
from __future__ import annotations

import bisect
import struct
import zlib
from dataclasses import dataclass

import numpy as np

PROB_BITS = 16
PROB_SCALE = 1 << PROB_BITS
RANS_L = 1 << 23
ESCAPE_LIMIT = 1 << 31


class DecodeError(ValueError):
    """Raised on truncated, corrupted or mismatched entropy-coded streams."""


@dataclass
class CdfTables:
    """A bank of quantized CDFs.

    ``cdfs[i]`` has ``n_i + 2`` entries, starts at 0, ends at ``PROB_SCALE``
    and is strictly increasing; entry ``n_i`` is the escape symbol.  Value
    ``v`` is coded in table ``i`` as index ``v - offsets[i]``.
    """
    cdfs: list[list[int]]
    offsets: list[int]

    def __post_init__(self):
        if len(self.cdfs) != len(self.offsets):
            raise ValueError("cdfs and offsets differ in length")
        for cdf in self.cdfs:
            validate_cdf(cdf)

    def __len__(self):
        return len(self.cdfs)


def validate_cdf(cdf) -> None:
    if len(cdf) < 2 or cdf[0] != 0 or cdf[-1] != PROB_SCALE:
        raise ValueError("CDF must start at 0 and end at 2**16")
    if any(b <= a for a, b in zip(cdf, cdf[1:])):
        raise ValueError("CDF must be strictly increasing")


def pmf_to_quantized_cdf(pmf: np.ndarray) -> list[int]:
    """Quantize a pmf (support symbols, escape mass appended by caller) to a CDF.

    Every entry keeps frequency >= 1; rounding error is absorbed by the
    largest bins so the total is exactly ``2**16``.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if len(pmf) >= PROB_SCALE:
        raise ValueError("too many symbols for 16-bit precision")
    total = pmf.sum()
    freq = np.maximum(1, np.rint(pmf / total * PROB_SCALE)).astype(np.int64)
    diff = int(freq.sum()) - PROB_SCALE
    order = np.argsort(-freq, kind="stable")
    i = 0
    while diff != 0:
        j = order[i % len(order)]
        if diff > 0:
            take = min(diff, int(freq[j]) - 1)
            freq[j] -= take
            diff -= take
        else:
            freq[j] -= diff
            diff = 0
        i += 1
    cdf = [0]
    for f in freq:
        cdf.append(cdf[-1] + int(f))
    return cdf


def _zigzag(v: int) -> int:
    return 2 * v if v >= 0 else -2 * v - 1


def _unzigzag(z: int) -> int:
    return z // 2 if z % 2 == 0 else -(z + 1) // 2


def _bypass_ops(value: int) -> list[tuple[int, int]]:
    z = _zigzag(value)
    nbits = z.bit_length()
    ops = [(nbits << 10, 1 << 10)]  # 6-bit uniform: bit length 0..32
    pos = 0
    while pos < nbits:
        b = min(8, nbits - pos)
        chunk = (z >> pos) & ((1 << b) - 1)
        f = 1 << (PROB_BITS - b)
        ops.append((chunk * f, f))
        pos += b
    return ops


def symbols_crc(symbols: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(symbols, dtype="<i8").tobytes())


def range_encode(symbols, indexes, tables: CdfTables) -> bytes:
    """Entropy code integer ``symbols``; ``indexes[i]`` selects the CDF for symbol i."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    indexes = np.asarray(indexes, dtype=np.int64).reshape(-1)
    if symbols.shape != indexes.shape:
        raise ValueError("symbols and indexes differ in size")
    ops: list[tuple[int, int]] = []
    cdfs, offsets = tables.cdfs, tables.offsets
    for v, i in zip(symbols.tolist(), indexes.tolist()):
        cdf = cdfs[i]
        n = len(cdf) - 2
        s = v - offsets[i]
        if 0 <= s < n:
            ops.append((cdf[s], cdf[s + 1] - cdf[s]))
        else:
            if abs(v) >= ESCAPE_LIMIT:
                raise ValueError(f"symbol {v} outside the escape range")
            ops.append((cdf[n], cdf[n + 1] - cdf[n]))
            ops.extend(_bypass_ops(v))

    out = bytearray()
    x = RANS_L
    scale_shift = (RANS_L >> PROB_BITS) << 8
    for start, freq in reversed(ops):
        x_max = scale_shift * freq
        while x >= x_max:
            out.append(x & 0xFF)
            x >>= 8
        x = ((x // freq) << PROB_BITS) + (x % freq) + start
    out += bytes((x & 0xFF, (x >> 8) & 0xFF, (x >> 16) & 0xFF, (x >> 24) & 0xFF))
    out.reverse()
    return bytes(out) + struct.pack(">I", symbols_crc(symbols))


class _Reader:
    def __init__(self, data: bytes):
        if len(data) < 4:
            raise DecodeError("stream truncated: missing rANS state")
        self.data = data
        self.pos = 4
        self.x = int.from_bytes(data[:4], "big")
        if self.x < RANS_L:
            raise DecodeError("stream corrupted: invalid rANS state")

    def get(self, cdf) -> int:
        s_cum = self.x & (PROB_SCALE - 1)
        s = bisect.bisect_right(cdf, s_cum) - 1
        self._advance(cdf[s], cdf[s + 1] - cdf[s], s_cum)
        return s

    def get_uniform(self, bits: int) -> int:
        f = 1 << (PROB_BITS - bits)
        s_cum = self.x & (PROB_SCALE - 1)
        s = s_cum // f
        self._advance(s * f, f, s_cum)
        return s

    def _advance(self, start, freq, s_cum):
        x = freq * (self.x >> PROB_BITS) + s_cum - start
        data, pos = self.data, self.pos
        while x < RANS_L:
            if pos >= len(data):
                raise DecodeError("stream truncated")
            x = (x << 8) | data[pos]
            pos += 1
        self.x, self.pos = x, pos


def range_decode(data: bytes, indexes, tables: CdfTables) -> np.ndarray:
    """Inverse of :func:`range_encode`; ``len(indexes)`` symbols are decoded."""
    if len(data) < 8:
        raise DecodeError("stream truncated")
    payload, crc = data[:-4], struct.unpack(">I", data[-4:])[0]
    indexes = np.asarray(indexes, dtype=np.int64).reshape(-1)
    reader = _Reader(payload)
    cdfs, offsets = tables.cdfs, tables.offsets
    out = np.empty(len(indexes), dtype=np.int64)
    for k, i in enumerate(indexes.tolist()):
        cdf = cdfs[i]
        n = len(cdf) - 2
        s = reader.get(cdf)
        if s < n:
            out[k] = s + offsets[i]
            continue
        nbits = reader.get_uniform(6)
        if nbits > 32:
            raise DecodeError("stream corrupted: invalid escape length")
        z, pos = 0, 0
        while pos < nbits:
            b = min(8, nbits - pos)
            z |= reader.get_uniform(b) << pos
            pos += b
        out[k] = _unzigzag(z)
    if reader.pos != len(payload) or reader.x != RANS_L:
        raise DecodeError("stream corrupted: trailing state mismatch")
    if symbols_crc(out) != crc:
        raise DecodeError("checksum mismatch: wrong tables or corrupted stream")
    return out
