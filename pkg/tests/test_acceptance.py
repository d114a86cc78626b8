"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the summary lines.
Criteria 6 and 7 train models and are marked slow.
"""
import time

import numpy as np
import pytest
import torch

from hybridvc.codec.bitstream import HEADER_SIZE, write_sequence
from hybridvc.codec.model import VideoCodec
from hybridvc.config import CodecConfig, GopConfig
from hybridvc.context_enhance import ChannelSpatialFusion, ContextEnhancer, CrossAttentionBlock, GatedFeedForward
from hybridvc.evaluation import decode_sequence, encode_sequence, evaluate_sequence, run_ablation
from hybridvc.metrics import RDCurve, bd_rate, ms_ssim, psnr
from hybridvc.synthetic import generate_synthetic_clip
from hybridvc.training import TrainConfig, train_multistage

import test_bitstream
import test_entropy
import test_rans
import test_tensor_ops
from helpers import fd_relative_error
from test_context_enhance import _inputs, _perturb
from test_metrics import ANCHOR, bd_rate_oracle


def _gate(capsys, number, title, checks, budget_s=None):
    """Run named checks, print one summary line and fail the test if any check failed."""
    t0 = time.perf_counter()
    failures = []
    notes = []
    for name, fn in checks:
        try:
            note = fn()
            if note:
                notes.append(f"{name}: {note}")
        except Exception as exc:  # noqa: BLE001 - every failure is reported
            failures.append(f"{name}: {type(exc).__name__}: {exc}")
    elapsed = time.perf_counter() - t0
    if budget_s is not None and elapsed > budget_s:
        failures.append(f"runtime {elapsed:.0f}s exceeds {budget_s:.0f}s")
    status = "PASS" if not failures else "FAIL"
    detail = "; ".join(failures or notes)
    with capsys.disabled():
        print(f"\n[{status}] criterion {number} {title} ({elapsed:.1f}s){': ' + detail if detail else ''}")
    assert not failures, "\n".join(failures)


# -- 1. operator oracles ----------------------------------------------------------

def test_criterion_1_operator_oracles(capsys):
    warp = test_tensor_ops.TestBilinearWarp()
    deform = test_tensor_ops.TestDeformSample()
    checks = [
        ("warp identity", warp.test_zero_flow_is_identity),
        ("warp integer shift", lambda: [warp.test_integer_shift_matches_indexing(dx, dy)
                                        for dx, dy in ((2, 0), (0, 3), (-1, 2))] and None),
        ("warp shifted image", warp.test_image_shifted_right_by_two),
        ("warp half pixel", warp.test_half_pixel_row),
        ("warp fractional oracle", warp.test_matches_scalar_oracle),
        ("deform brute force", lambda: [deform.test_bruteforce_oracle(g, m)
                                        for g, m in ((1, True), (2, True), (2, False))] and None),
        ("fgdc degenerates to warp", deform.test_degenerates_to_flow_warp),
        ("identity kernel", deform.test_identity_kernel),
    ]
    _gate(capsys, 1, "operator oracle suite", checks, budget_s=60)


# -- 2. gradients -------------------------------------------------------------------

def _block_grad(make, n_inputs, seed):
    torch.manual_seed(seed)
    module = make().double()
    inputs = [torch.randn(1, 8, 4, 4) for _ in range(n_inputs)]
    err = fd_relative_error(lambda *a: module(*a), inputs)
    assert err < 1e-3, f"relative error {err:.2e}"
    return f"{err:.1e}"


def test_criterion_2_gradients(capsys):
    warp = test_tensor_ops.TestBilinearWarp()
    deform = test_tensor_ops.TestDeformSample()
    checks = [
        ("warp", warp.test_gradient),
        ("deform_sample", deform.test_gradient),
        ("cross-attention block", lambda: _block_grad(lambda: CrossAttentionBlock(8, 2, 2.0), 2, 0)),
        ("gated feed-forward", lambda: _block_grad(lambda: GatedFeedForward(8), 1, 1)),
        ("fusion gates", lambda: _block_grad(lambda: ChannelSpatialFusion(8), 2, 2)),
    ]
    _gate(capsys, 2, "gradient suite", checks, budget_s=300)


# -- 3. entropy coding and bitstream -------------------------------------------------

def test_criterion_3_entropy_bitstream(capsys):
    fp = test_entropy.TestFactorizedPrior()
    gc = test_entropy.TestGaussianConditional()
    checks = [
        ("rans 10k round trip", test_rans.test_round_trip_10k),
        ("escape round trip", test_rans.test_escape_values_round_trip),
        ("factorized bytes vs estimate", fp.test_measured_bytes_match_estimate),
        ("gaussian bytes vs estimate", gc.test_measured_bytes_match_estimate),
        ("golden rans vectors", test_rans.test_golden_vectors_bit_exact),
        ("golden sequence", test_bitstream.test_golden_sequence_decodes_bit_exactly),
        ("corrupted payload", lambda: [test_bitstream.test_payload_corruption_fails_checksum(p)
                                       for p in (HEADER_SIZE, HEADER_SIZE + 3, -1)] and None),
        ("corrupted golden sequence", test_bitstream.test_golden_sequence_corruption_detected),
        ("truncated rans stream", test_rans.test_truncated_stream_fails),
    ]
    _gate(capsys, 3, "entropy/bitstream suite", checks, budget_s=60)


# -- 4. closed-loop determinism --------------------------------------------------------

def _closed_loop(preset, frames):
    torch.manual_seed(0)
    model = VideoCodec(CodecConfig().with_preset(preset)).eval()
    # encode_sequence decodes each frame and compares it with the encoder state
    streams, _, recon = encode_sequence(model, frames, GopConfig(8, len(frames)), decode_check=True)
    decoded = decode_sequence(model, write_sequence(streams))
    assert torch.equal(decoded, recon), "standalone decode differs"
    return streams


def test_criterion_4_closed_loop(capsys):
    frames = generate_synthetic_clip("elastic", seed=4, frames=32).tensor()

    def preset_a():
        streams = _closed_loop("A", frames)
        sizes = {bs.lengths()["offset"] for bs in streams}
        assert sizes == {0}, f"offset substream sizes {sizes}"

    checks = [
        ("32 frames, preset J", lambda: _closed_loop("J", frames) and None),
        ("32 frames, preset A, empty offset stream", preset_a),
    ]
    _gate(capsys, 4, "closed-loop determinism", checks, budget_s=600)


# -- 5. enhancement parity -------------------------------------------------------------

def test_criterion_5_enhancement_parity(capsys):
    def parity(preset):
        torch.manual_seed(0)
        cfg = CodecConfig().with_preset(preset)
        enc = _perturb(ContextEnhancer(cfg))
        dec = ContextEnhancer(cfg)
        dec.load_state_dict(enc.state_dict())
        ctx, ref, flows = _inputs(cfg, seed=7)
        o_bar = 0.1 * torch.randn(1, cfg.kernel.offset_channels, 16, 16)
        a, _ = enc(ctx, ref, flows, o_bar)
        b, _ = dec([c.clone() for c in ctx], [r.clone() for r in ref], [f.clone() for f in flows],
                   o_bar.clone())
        assert all(torch.equal(x, y) for x, y in zip(a, b)), "encoder/decoder outputs differ"

    _gate(capsys, 5, "zero-bitrate enhancement parity",
          [(f"preset {p}", lambda p=p: parity(p)) for p in "GHIJ"])


# -- 6. overfit smoke training -----------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_overfit_training(capsys, tmp_path):
    clip = generate_synthetic_clip("translate", seed=0, frames=8, height=64, width=64).tensor()
    cfg = TrainConfig(lmbda=2048.0, log_every=100)
    result = {}

    def train():
        res = train_multistage(CodecConfig().with_preset("J"), clip, cfg, out_dir=tmp_path)
        result["train"] = res
        return f"{sum(cfg.stage_steps)} steps"

    def coded():
        res = evaluate_sequence(result["train"].model, clip, GopConfig(8, 8))
        inter = [r for r in res.frames if r.frame_type == "P"]
        p = sum(r.psnr for r in inter) / len(inter)
        bpp = sum(r.bpp for r in inter) / len(inter)
        result.update(psnr=p, bpp=bpp)
        assert p > 30.0, f"inter PSNR {p:.2f} dB"
        assert bpp < 1.0, f"inter bpp {bpp:.3f}"
        return f"inter PSNR {p:.2f} dB at {bpp:.3f} bpp (coded bitstream, headers included)"

    def loss_ratio():
        res = result["train"]
        ratio = res.final_joint_loss / res.initial_joint_loss
        assert ratio < 0.5, f"final/initial joint loss {ratio:.3f}"
        return f"joint loss {res.initial_joint_loss:.2f} -> {res.final_joint_loss:.2f}"

    _gate(capsys, 6, "overfit smoke training",
          [("train", train), ("coded quality and rate", coded), ("loss reduction", loss_ratio)],
          budget_s=4 * 3600)


# -- 7. directional ablation ---------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_directional_ablation(capsys, tmp_path):
    train = generate_synthetic_clip("elastic", seed=0, frames=8).tensor()
    evald = generate_synthetic_clip("elastic", seed=1, frames=8).tensor()
    report = {}

    def run():
        report["r"] = run_ablation(["A", "D"], train, evald, train_cfg=TrainConfig(stage_steps=(100, 100, 300, 0)),
                                   out_dir=tmp_path, gop=GopConfig(8, 8), orderings=(("D", "A"),))
        assert (tmp_path / "ablation.csv").exists() and (tmp_path / "rd_curves.svg").exists()

    def flag():
        info = report["r"].orderings["D>A"]
        assert "held" in info
        with capsys.disabled():
            print("\n" + report["r"].table())
        if "error" in info:
            return f"ordering not comparable ({info['error']}), held={info['held']}"
        return f"D beats A at {info['wins']}/{info['total']} matched-quality points, held={info['held']}"

    _gate(capsys, 7, "directional ablation check (soft)", [("ablation run", run), ("ordering flag", flag)])


# -- 8. metrics ---------------------------------------------------------------------------

def test_criterion_8_metrics(capsys):
    def psnr_case():
        a = torch.rand(1, 3, 16, 16, dtype=torch.float64) * 0.8
        assert abs(psnr(a + 0.1, a) - 20.0) < 1e-9

    def msssim_self():
        a = torch.rand(1, 3, 160, 160, dtype=torch.float64)
        assert abs(ms_ssim(a, a) - 1.0) < 1e-9

    def bd_identity():
        assert abs(bd_rate(RDCurve(*ANCHOR), RDCurve(*ANCHOR))) < 1e-9

    def bd_doubling():
        v = bd_rate(RDCurve(*ANCHOR), RDCurve([2 * r for r in ANCHOR[0]], ANCHOR[1]))
        assert abs(v - 100.0) <= 0.1, v

    def bd_oracle():
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            rates = sorted(np.array(ANCHOR[0]) * rng.uniform(0.5, 2.0) * (1 + rng.uniform(0, 0.3, 4)))
            quals = [q + rng.uniform(-0.5, 0.5) for q in ANCHOR[1]]
            if any(b <= a for a, b in zip(rates, rates[1:])):
                continue
            diff = abs(bd_rate(RDCurve(*ANCHOR), RDCurve(rates, quals)) - bd_rate_oracle(ANCHOR, (rates, quals)))
            worst = max(worst, diff)
        assert worst <= 0.05, worst
        return f"max oracle gap {worst:.1e}%"

    _gate(capsys, 8, "metric correctness", [
        ("psnr uniform difference", psnr_case), ("ms-ssim self similarity", msssim_self),
        ("bd-rate identity", bd_identity), ("bd-rate doubling", bd_doubling),
        ("bd-rate fine-grid oracle", bd_oracle),
    ])
