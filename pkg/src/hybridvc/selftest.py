"""Fast in-process invariant checks run by ``hybridvc selftest``."""
from __future__ import annotations

import time
import traceback

import numpy as np
import torch

from .codec.bitstream import Bitstream, BitstreamError
from .codec.model import VideoCodec
from .codec.rans import CdfTables, DecodeError, pmf_to_quantized_cdf, range_decode, range_encode
from .config import CodecConfig, canonical_text, parse_text
from .tensor_ops import DeformKernelSpec, bilinear_warp, deform_sample, identity_deform_weight


def _rans_round_trip():
    rng = np.random.default_rng(0)
    tables = CdfTables([pmf_to_quantized_cdf(np.array([0.5, 0.3, 0.15, 0.05]))], [-1])
    symbols = rng.integers(-1, 3, 10_000)
    symbols[::997] = 40  # escapes
    data = range_encode(symbols, np.zeros(len(symbols), np.int64), tables)
    assert np.array_equal(range_decode(data, np.zeros(len(symbols), np.int64), tables), symbols)
    try:
        range_decode(data[:-3], np.zeros(len(symbols), np.int64), tables)
    except DecodeError:
        pass
    else:
        raise AssertionError("truncated stream decoded")


def _warp_identity():
    x = torch.rand(1, 3, 8, 8)
    assert torch.equal(bilinear_warp(x, torch.zeros(1, 2, 8, 8)), x)
    shifted = bilinear_warp(x, torch.tensor([1.0, 0.0]).view(1, 2, 1, 1).expand(1, 2, 8, 8))
    assert torch.equal(shifted[..., :-1], x[..., 1:])


def _deform_degeneracy():
    spec = DeformKernelSpec(3, 2, True)
    x = torch.rand(1, 4, 6, 6)
    flow = torch.randn(1, 2, 6, 6)
    out = deform_sample(x, flow, torch.zeros(1, spec.offset_channels, 6, 6), spec,
                        identity_deform_weight(4, spec))
    assert torch.allclose(out, bilinear_warp(x, flow), atol=1e-5)


def _config_round_trip():
    cfg = CodecConfig().with_preset("D")
    assert parse_text(canonical_text(cfg)) == cfg


def _closed_loop():
    torch.manual_seed(0)
    model = VideoCodec(CodecConfig()).eval()
    frames = torch.rand(3, 3, 64, 64)
    state = dec = None
    for t in range(3):
        bs, state, info = model.encode_frame(frames[t:t + 1], state)
        parsed, _ = Bitstream.from_bytes(bs.to_bytes())
        recon, dec = model.decode_frame(parsed, dec)
        assert torch.equal(recon, info.recon), f"frame {t} differs"
    raw = bytearray(bs.to_bytes())
    raw[-1] ^= 0xFF
    try:
        Bitstream.from_bytes(bytes(raw))
    except BitstreamError:
        pass
    else:
        raise AssertionError("corrupted stream accepted")


CHECKS = [
    ("rans round trip", _rans_round_trip),
    ("warp identity and shift", _warp_identity),
    ("fgdc degenerates to warp", _deform_degeneracy),
    ("config canonical round trip", _config_round_trip),
    ("closed-loop coding", _closed_loop),
]


def run(out=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            fn()
            out(f"PASS {name} ({time.perf_counter() - t0:.2f}s)")
        except Exception:
            ok = False
            out(f"FAIL {name}\n{traceback.format_exc()}")
    return ok
