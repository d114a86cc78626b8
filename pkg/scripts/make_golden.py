"""Regenerate the golden vectors in tests/data.

Only rerun this after a deliberate format change; the tests pin the bytes.
"""
import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from hybridvc.codec.bitstream import write_sequence
from hybridvc.codec.model import VideoCodec
from hybridvc.codec.rans import CdfTables, pmf_to_quantized_cdf, range_encode
from hybridvc.config import CodecConfig
from hybridvc.synthetic import generate_synthetic_clip

OUT = Path(__file__).resolve().parents[1] / "tests" / "data"


def rans_vectors():
    tables = CdfTables(
        [pmf_to_quantized_cdf(np.array([0.6, 0.25, 0.1, 0.05])),
         pmf_to_quantized_cdf(np.array([0.05, 0.2, 0.5, 0.2, 0.04, 0.01]))],
        [0, -2],
    )
    rng = np.random.default_rng(2024)
    cases = []
    for n in (0, 1, 37, 500):
        idx = rng.integers(0, 2, n)
        sym = np.where(idx == 0, rng.integers(0, 3, n), rng.integers(-2, 3, n))
        if n > 10:
            sym[::11] = rng.integers(-300, 300, len(sym[::11]))  # escapes
        data = range_encode(sym, idx, tables)
        cases.append({"symbols": sym.tolist(), "indexes": idx.tolist(), "hex": data.hex()})
    return {"cdfs": tables.cdfs, "offsets": tables.offsets, "cases": cases}


def frame_vectors():
    torch.manual_seed(0)
    cfg = CodecConfig().with_preset("D")
    model = VideoCodec(cfg).eval()
    frames = generate_synthetic_clip("translate", seed=3, frames=3).tensor()
    state, streams, recons = None, [], []
    for t in range(3):
        bs, state, info = model.encode_frame(frames[t:t + 1], state)
        streams.append(bs)
        recons.append(info.recon)
    data = write_sequence(streams)
    digest = hashlib.sha256(torch.cat(recons).numpy().tobytes()).hexdigest()
    return data, {"preset": "D", "seed": 0, "clip_seed": 3, "frames": 3, "recon_sha256": digest,
                  "torch": torch.__version__}


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "golden_rans.json").write_text(json.dumps(rans_vectors()))
    data, meta = frame_vectors()
    (OUT / "golden_sequence.bin").write_bytes(data)
    (OUT / "golden_sequence.json").write_text(json.dumps(meta, indent=1))
    print(f"wrote {OUT}")
