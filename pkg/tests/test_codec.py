import dataclasses

import pytest
import torch

from hybridvc.codec.bitstream import HEADER_SIZE, Bitstream, CompatibilityError, read_sequence, write_sequence
from hybridvc.codec.model import VideoCodec
from hybridvc.config import CodecConfig, GopConfig
from hybridvc.evaluation import decode_sequence, encode_sequence, evaluate_sequence
from hybridvc.synthetic import generate_synthetic_clip


@pytest.fixture(scope="module")
def clip():
    return generate_synthetic_clip("elastic", seed=1, frames=6, height=64, width=64).tensor()


def _model(preset, seed=0):
    torch.manual_seed(seed)
    return VideoCodec(CodecConfig().with_preset(preset)).eval()


@pytest.mark.parametrize("preset", ["A", "D", "F", "J"])
def test_closed_loop_bit_exact(preset, clip):
    model = _model(preset)
    streams, infos, recon = encode_sequence(model, clip, GopConfig(4, 6), decode_check=True)
    decoded = decode_sequence(model, write_sequence(streams))
    assert torch.equal(decoded, recon)
    assert recon.min() >= 0 and recon.max() <= 1


def test_preset_a_has_no_offset_bytes(clip):
    model = _model("A")
    streams, _, _ = encode_sequence(model, clip[:3], GopConfig(8, 3), decode_check=False)
    assert all(bs.lengths()["offset"] == 0 for bs in streams)
    model_d = _model("D")
    streams, _, _ = encode_sequence(model_d, clip[:3], GopConfig(8, 3), decode_check=False)
    assert all(bs.lengths()["offset"] > 0 for bs in streams[1:])


def test_preset_f_has_no_flow_bytes(clip):
    streams, _, _ = encode_sequence(_model("F"), clip[:3], GopConfig(8, 3), decode_check=False)
    assert all(bs.lengths()["flow"] == 0 for bs in streams)


def test_bpp_accounting(clip):
    res = evaluate_sequence(_model("D"), clip[:4], GopConfig(8, 4))
    total = sum(sum(r.bytes.values()) for r in res.frames)
    pixels = 4 * 64 * 64
    assert len(res.bitstream) == total + 9  # sequence container header
    assert all(r.bytes["header"] == HEADER_SIZE for r in res.frames)
    assert res.aggregate.bpp == pytest.approx(8 * total / pixels)
    assert sum(res.aggregate.breakdown.values()) == pytest.approx(res.aggregate.bpp)
    assert res.frames[0].frame_type == "I" and res.frames[0].bpp > 0


def test_model_mismatch_refused(clip):
    a = _model("D")
    b = VideoCodec(dataclasses.replace(CodecConfig().with_preset("D"), lmbda_index=1)).eval()
    streams, _, _ = encode_sequence(a, clip[:2], GopConfig(8, 2), decode_check=False)
    with pytest.raises(CompatibilityError):
        b.decode_frame(streams[0], None)


def test_inter_without_reference_refused(clip):
    model = _model("D")
    streams, _, _ = encode_sequence(model, clip[:2], GopConfig(8, 2), decode_check=False)
    with pytest.raises(Exception):
        model.decode_frame(streams[1], None)


def test_shapes_and_scales():
    model = _model("J")
    x = torch.rand(1, 3, 64, 64)
    ref = torch.rand(1, 3, 64, 64)
    intra = model.forward_intra(ref)
    out = model.forward_inter(x, ref, intra["feature"])
    y = model.ctx_encoder(x, out["contexts"])
    assert y.shape == (1, 96, 4, 4)
    _, scales = model.hyper.params(torch.zeros(1, model.cfg.channels.hyper, 1, 1))
    assert (scales >= 0.11).all()
    assert out["recon"].shape == x.shape and (out["recon"] >= 0).all() and (out["recon"] <= 1).all()
    for key in ("bits_flow", "bits_offset", "bits_frame", "bits_hyper"):
        assert out[key].item() >= 0
    assert intra["bits_frame"].item() > 0


def test_iframe_aliases(clip):
    model = _model("A")
    bs, state, info = model.encode_iframe(clip[:1])
    recon, _ = model.decode_iframe(Bitstream.from_bytes(bs.to_bytes())[0])
    assert torch.equal(recon, info.recon)


def test_non_multiple_resolution():
    model = _model("D")
    frames = torch.rand(2, 3, 40, 72)
    streams, _, recon = encode_sequence(model, frames, GopConfig(8, 2), decode_check=True)
    assert recon.shape == frames.shape
    assert len(read_sequence(write_sequence(streams))) == 2


def test_architecture_mismatch_refused(clip):
    streams, _, _ = encode_sequence(_model("D"), clip[:1], GopConfig(8, 1), decode_check=False)
    with pytest.raises(CompatibilityError):
        _model("J").decode_frame(streams[0], None)
