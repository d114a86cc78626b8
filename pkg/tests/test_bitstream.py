import hashlib
import json
from pathlib import Path

import pytest
import torch

from hybridvc.codec.bitstream import (
    HEADER_SIZE, INTER, INTRA, Bitstream, BitstreamError, CompatibilityError, read_sequence, write_sequence,
)
from hybridvc.codec.model import VideoCodec
from hybridvc.config import CodecConfig

DATA = Path(__file__).parent / "data"


def _frame(**kw):
    args = dict(frame_type=INTER, width=70, height=50, lmbda_index=2, config_hash=b"12345678",
                substreams={"flow": b"\x01\x02", "offset": b"", "hyper": b"abc", "frame": bytes(range(40))})
    args.update(kw)
    return Bitstream(**args)


def test_round_trip_and_length():
    bs = _frame()
    raw = bs.to_bytes()
    assert len(raw) == len(bs) == HEADER_SIZE + 2 + 3 + 40
    parsed, used = Bitstream.from_bytes(raw)
    assert parsed == bs and used == len(raw)


def test_header_size_is_fixed():
    assert HEADER_SIZE == 51


@pytest.mark.parametrize("pos", [HEADER_SIZE, HEADER_SIZE + 3, -1])
def test_payload_corruption_fails_checksum(pos):
    raw = bytearray(_frame().to_bytes())
    raw[pos] ^= 0x01
    with pytest.raises(BitstreamError, match="checksum"):
        Bitstream.from_bytes(bytes(raw))


def test_truncation_and_bad_magic():
    raw = _frame().to_bytes()
    with pytest.raises(BitstreamError):
        Bitstream.from_bytes(raw[:-1])
    with pytest.raises(BitstreamError):
        Bitstream.from_bytes(raw[:10])
    with pytest.raises(BitstreamError, match="magic"):
        Bitstream.from_bytes(b"XXXX" + raw[4:])


def test_version_mismatch_is_compatibility_error():
    raw = bytearray(_frame().to_bytes())
    raw[4] = 9
    with pytest.raises(CompatibilityError):
        Bitstream.from_bytes(bytes(raw))


def test_sequence_container():
    frames = [_frame(frame_type=INTRA), _frame(), _frame(substreams={})]
    data = write_sequence(frames)
    assert read_sequence(data) == frames
    with pytest.raises(BitstreamError):
        read_sequence(data + b"\x00")
    with pytest.raises(BitstreamError):
        read_sequence(data[:-1])


def test_golden_sequence_decodes_bit_exactly():
    meta = json.loads((DATA / "golden_sequence.json").read_text())
    data = (DATA / "golden_sequence.bin").read_bytes()
    torch.manual_seed(meta["seed"])
    model = VideoCodec(CodecConfig().with_preset(meta["preset"])).eval()
    state, recons = None, []
    for bs in read_sequence(data):
        recon, state = model.decode_frame(bs, state)
        recons.append(recon)
    assert len(recons) == meta["frames"]
    digest = hashlib.sha256(torch.cat(recons).numpy().tobytes()).hexdigest()
    assert digest == meta["recon_sha256"]


def test_golden_sequence_corruption_detected():
    data = bytearray((DATA / "golden_sequence.bin").read_bytes())
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(BitstreamError):
        read_sequence(bytes(data))
