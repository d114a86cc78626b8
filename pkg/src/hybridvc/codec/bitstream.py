"""Frame and sequence bitstream framing.

Frame layout (all integers big-endian)::

    magic      4s   b"HVCF"
    version    B
    frame_type B    0 = intra, 1 = inter
    width      H    original (uncropped) frame width
    height     H
    lmbda_idx  B
    cfg_hash   8s   first 8 bytes of the config's SHA-256
    lengths    4I   flow, offset, hyper, frame substream byte counts
    crcs       4I   crc32 of each substream
    payload         substreams in that fixed order

A sequence file is ``b"HVCS" | version B | frame count I`` followed by the
frame bitstreams back to back.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

from .rans import DecodeError

SUBSTREAMS = ("flow", "offset", "hyper", "frame")
FORMAT_VERSION = 1
FRAME_MAGIC = b"HVCF"
SEQ_MAGIC = b"HVCS"
_HEADER = struct.Struct(">4sBBHHB8s4I4I")
HEADER_SIZE = _HEADER.size
_SEQ_HEADER = struct.Struct(">4sBI")

INTRA, INTER = 0, 1


class BitstreamError(DecodeError):
    """Malformed, corrupted or incompatible bitstream."""


class CompatibilityError(BitstreamError):
    """Bitstream produced by a different model configuration or format version."""


@dataclass
class Bitstream:
    frame_type: int
    width: int
    height: int
    lmbda_index: int
    config_hash: bytes
    substreams: dict[str, bytes] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.substreams) - set(SUBSTREAMS)
        if unknown:
            raise ValueError(f"unknown substreams {sorted(unknown)}")
        for name in SUBSTREAMS:
            self.substreams.setdefault(name, b"")
        if len(self.config_hash) != 8:
            raise ValueError("config hash must be 8 bytes")

    def lengths(self) -> dict[str, int]:
        return {k: len(self.substreams[k]) for k in SUBSTREAMS}

    def to_bytes(self) -> bytes:
        parts = [self.substreams[k] for k in SUBSTREAMS]
        header = _HEADER.pack(FRAME_MAGIC, FORMAT_VERSION, self.frame_type, self.width, self.height,
                              self.lmbda_index, self.config_hash,
                              *(len(p) for p in parts), *(zlib.crc32(p) for p in parts))
        return header + b"".join(parts)

    def __len__(self):
        return HEADER_SIZE + sum(self.lengths().values())

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["Bitstream", int]:
        """Parse one frame starting at ``offset``; returns it and the bytes consumed."""
        if len(data) - offset < HEADER_SIZE:
            raise BitstreamError("truncated frame header")
        fields = _HEADER.unpack_from(data, offset)
        magic, version, ftype, width, height, lidx, chash = fields[:7]
        lengths, crcs = fields[7:11], fields[11:15]
        if magic != FRAME_MAGIC:
            raise BitstreamError(f"bad frame magic {magic!r}")
        if version != FORMAT_VERSION:
            raise CompatibilityError(f"format version {version}, decoder supports {FORMAT_VERSION}")
        if ftype not in (INTRA, INTER):
            raise BitstreamError(f"unknown frame type {ftype}")
        pos = offset + HEADER_SIZE
        if pos + sum(lengths) > len(data):
            raise BitstreamError("truncated frame payload")
        subs = {}
        for name, n, crc in zip(SUBSTREAMS, lengths, crcs):
            chunk = bytes(data[pos:pos + n])
            if zlib.crc32(chunk) != crc:
                raise BitstreamError(f"checksum mismatch in {name} substream")
            subs[name] = chunk
            pos += n
        return cls(ftype, width, height, lidx, chash, subs), pos - offset


def write_sequence(frames: list[Bitstream]) -> bytes:
    return _SEQ_HEADER.pack(SEQ_MAGIC, FORMAT_VERSION, len(frames)) + b"".join(f.to_bytes() for f in frames)


def read_sequence(data: bytes) -> list[Bitstream]:
    if len(data) < _SEQ_HEADER.size:
        raise BitstreamError("truncated sequence header")
    magic, version, count = _SEQ_HEADER.unpack_from(data, 0)
    if magic != SEQ_MAGIC:
        raise BitstreamError(f"bad sequence magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CompatibilityError(f"format version {version}, decoder supports {FORMAT_VERSION}")
    pos = _SEQ_HEADER.size
    frames = []
    for _ in range(count):
        bs, n = Bitstream.from_bytes(data, pos)
        frames.append(bs)
        pos += n
    if pos != len(data):
        raise BitstreamError(f"{len(data) - pos} trailing bytes after last frame")
    return frames
