"""Sequence evaluation, closed-loop verification and the ablation harness."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec.bitstream import HEADER_SIZE, SUBSTREAMS, Bitstream, read_sequence, write_sequence
from .codec.model import CodecState, VideoCodec
from .config import CodecConfig, GopConfig, PRESETS
from .metrics import MS_SSIM_MIN_SIZE, RDCurve, _log_rate_interp, bd_rate, ms_ssim, psnr
from .training import TrainConfig, load_checkpoint, save_checkpoint, train_multistage


class ClosedLoopError(RuntimeError):
    pass


class MissingCheckpointsError(FileNotFoundError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__("missing checkpoints: " + ", ".join(missing))


def gop_schedule(num_frames: int, intra_period: int) -> list[str]:
    """'I' at every multiple of the intra period, 'P' elsewhere."""
    if intra_period < 1:
        raise ValueError("intra period must be >= 1")
    return ["I" if t % intra_period == 0 else "P" for t in range(num_frames)]


@dataclass
class FrameRecord:
    index: int
    frame_type: str
    bytes: dict[str, int]
    bpp: float
    psnr: float
    ms_ssim: float | None = None

    def bpp_breakdown(self, pixels: int) -> dict[str, float]:
        return {k: 8.0 * v / pixels for k, v in self.bytes.items()}


@dataclass
class RDPoint:
    bpp: float
    psnr: float
    ms_ssim: float | None = None
    breakdown: dict[str, float] = field(default_factory=dict)
    label: str = ""


@dataclass
class SequenceResult:
    frames: list[FrameRecord]
    aggregate: RDPoint
    bitstream: bytes = field(repr=False, default=b"")
    recon: torch.Tensor | None = field(repr=False, default=None)


def encode_sequence(model: VideoCodec, frames: torch.Tensor, gop: GopConfig,
                    decode_check: bool = True) -> tuple[list[Bitstream], list, torch.Tensor]:
    """Code ``frames`` (T x 3 x H x W) following the GOP; optionally decode and compare every frame.

    Returns the frame bitstreams, per-frame coding info and encoder-side reconstructions.
    """
    model.eval()
    schedule = gop_schedule(len(frames), gop.intra_period)
    enc_state: CodecState | None = None
    dec_state: CodecState | None = None
    streams, infos, recons = [], [], []
    for t, kind in enumerate(schedule):
        x = frames[t:t + 1]
        if kind == "I":
            bs, enc_state, info = model.encode_intra(x, t)
        else:
            bs, enc_state, info = model.encode_inter(x, enc_state)
        streams.append(bs)
        infos.append(info)
        recons.append(info.recon)
        if decode_check:
            parsed, _ = Bitstream.from_bytes(bs.to_bytes())
            dec_recon, dec_state = model.decode_frame(parsed, None if kind == "I" else dec_state)
            if not torch.equal(dec_recon, info.recon) or not torch.equal(dec_state.feature, enc_state.feature):
                raise ClosedLoopError(f"decoder diverged from encoder at frame {t}")
    return streams, infos, torch.cat(recons)


def decode_sequence(model: VideoCodec, data: bytes) -> torch.Tensor:
    model.eval()
    state = None
    out = []
    for bs in read_sequence(data):
        recon, state = model.decode_frame(bs, state)
        out.append(recon)
    return torch.cat(out)


def evaluate_sequence(model: VideoCodec, frames: torch.Tensor, gop: GopConfig | None = None,
                      label: str = "", verify: bool = True) -> SequenceResult:
    """Code a sequence and aggregate rate and quality over every coded frame."""
    gop = gop or model.cfg.gop
    frames = frames[:gop.frames] if gop.frames else frames
    streams, infos, recon = encode_sequence(model, frames, gop, decode_check=verify)
    h, w = frames.shape[-2:]
    pixels = h * w
    use_msssim = min(h, w) >= MS_SSIM_MIN_SIZE
    records = []
    for t, (bs, info) in enumerate(zip(streams, infos)):
        sizes = {"header": HEADER_SIZE, **bs.lengths()}
        assert sum(sizes.values()) == info.total_bytes
        records.append(FrameRecord(
            index=t,
            frame_type="I" if bs.frame_type == 0 else "P",
            bytes=sizes,
            bpp=8.0 * info.total_bytes / pixels,
            psnr=psnr(recon[t], frames[t]),
            ms_ssim=ms_ssim(recon[t:t + 1], frames[t:t + 1]) if use_msssim else None,
        ))
    n = len(records)
    breakdown = {k: sum(r.bpp_breakdown(pixels)[k] for r in records) / n
                 for k in ("header",) + SUBSTREAMS}
    finite = [r.psnr for r in records if math.isfinite(r.psnr)]
    agg = RDPoint(
        bpp=sum(r.bpp for r in records) / n,
        psnr=sum(finite) / len(finite) if finite else math.inf,
        ms_ssim=(sum(r.ms_ssim for r in records) / n) if use_msssim else None,
        breakdown=breakdown,
        label=label,
    )
    return SequenceResult(records, agg, write_sequence(streams), recon)


def evaluate_checkpoint(path, cfg: CodecConfig, frames: torch.Tensor, gop: GopConfig | None = None,
                        label: str = "") -> SequenceResult:
    """Load ``path`` (refusing a hash mismatch with ``cfg``) and evaluate ``frames``."""
    model, _ = load_checkpoint(path, cfg)
    return evaluate_sequence(model, frames, gop or cfg.gop, label)


# -- ablation harness ---------------------------------------------------------

def dominance(anchor: RDCurve, test: RDCurve) -> tuple[int, int]:
    """(wins, total): anchor points inside the test's quality range where the test needs fewer bits."""
    ft = _log_rate_interp(test)
    lo, hi = min(test.qualities), max(test.qualities)
    wins = total = 0
    for r, q in zip(anchor.rates, anchor.qualities):
        if lo <= q <= hi:
            total += 1
            wins += int(float(ft(q)) < math.log(r))
    return wins, total


def default_anchor(preset: str) -> str:
    return "D" if preset in "GHIJ" else "A"


@dataclass
class AblationReport:
    curves: dict[str, RDCurve]
    points: dict[str, list[RDPoint]]
    bd_rates: dict[str, float]
    orderings: dict[str, dict]
    files: list[Path] = field(default_factory=list)

    def table(self) -> str:
        lines = [f"{'preset':<8}{'anchor':<8}{'BD-rate %':>12}"]
        for name, bd in self.bd_rates.items():
            anchor = self.orderings.get(name, {}).get("anchor", "")
            lines.append(f"{name:<8}{anchor:<8}{bd:>12.2f}")
        for key, o in self.orderings.items():
            if "error" in o:
                lines.append(f"{key}: not comparable ({o['error']})")
            elif "held" in o:
                lines.append(f"ordering {key}: {o['wins']}/{o['total']} matched-quality points, "
                             f"held={o['held']}")
        return "\n".join(lines)


def run_ablation(presets, train_clips, eval_frames: torch.Tensor, *, base_cfg: CodecConfig = CodecConfig(),
                 train_cfg: TrainConfig = TrainConfig(), lmbda_indices=(0, 1, 2, 3),
                 checkpoint_dir=None, train_missing: bool = True, out_dir=None,
                 gop: GopConfig | None = None, orderings=(("D", "A"), ("D", "F"))) -> AblationReport:
    """Train (or load) one checkpoint per preset and rate point, then compare RD curves.

    ``orderings`` lists (better, worse) pairs whose dominance is reported,
    never asserted.
    """
    presets = list(presets)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if checkpoint_dir is not None and not train_missing:
        missing = [str(checkpoint_dir / f"{p}_l{i}.pt") for p in presets for i in lmbda_indices
                   if not (checkpoint_dir / f"{p}_l{i}.pt").exists()]
        if missing:
            raise MissingCheckpointsError(missing)
    gop = gop or GopConfig(intra_period=len(eval_frames), frames=len(eval_frames))
    table = "mse" if base_cfg.distortion == "mse" else "ms-ssim"
    points: dict[str, list[RDPoint]] = {}
    for preset in presets:
        points[preset] = []
        for idx in lmbda_indices:
            cfg = dataclasses.replace(base_cfg.with_preset(preset), lmbda_index=idx)
            path = checkpoint_dir / f"{preset}_l{idx}.pt" if checkpoint_dir else None
            if path is not None and path.exists():
                model, _ = load_checkpoint(path, cfg)
            else:
                tc = dataclasses.replace(train_cfg, lmbda=cfg.lmbda, distortion=table)
                model = train_multistage(cfg, train_clips, tc).model
                if path is not None:
                    save_checkpoint(path, model)
            res = evaluate_sequence(model, eval_frames, gop, label=f"{preset}@{cfg.lmbda:g}")
            points[preset].append(res.aggregate)
    curves, bd, order_info = {}, {}, {}
    for p, pts in points.items():
        try:
            curves[p] = RDCurve([pt.bpp for pt in pts], [pt.psnr for pt in pts], label=p)
        except ValueError as exc:
            order_info[p] = {"error": str(exc)}
    for p in presets:
        anchor = default_anchor(p)
        if anchor in curves and p in curves:
            try:
                bd[p] = bd_rate(curves[anchor], curves[p])
            except ValueError as exc:
                bd[p] = math.nan
                order_info.setdefault(p, {})["error"] = str(exc)
            order_info.setdefault(p, {})["anchor"] = anchor
    for better, worse in orderings:
        if better not in points or worse not in points:
            continue
        if better not in curves or worse not in curves:
            order_info[f"{better}>{worse}"] = {"error": "no valid RD curve", "held": False}
        else:
            try:
                wins, total = dominance(curves[worse], curves[better])
            except ValueError as exc:
                order_info[f"{better}>{worse}"] = {"error": str(exc), "held": False}
                continue
            order_info[f"{better}>{worse}"] = {"wins": wins, "total": total,
                                               "held": total > 0 and wins * 2 > total}
    report = AblationReport(curves, points, bd, order_info)
    if out_dir is not None:
        report.files = write_ablation_outputs(report, Path(out_dir))
    return report


def write_ablation_outputs(report: AblationReport, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl = out_dir / "ablation.jsonl"
    with open(jsonl, "w") as fh:
        for preset, pts in report.points.items():
            for pt in pts:
                fh.write(json.dumps({"preset": preset, **dataclasses.asdict(pt)}) + "\n")
        for key, info in report.orderings.items():
            fh.write(json.dumps({"ordering": key, **info}) + "\n")
    table = out_dir / "ablation.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["preset", "anchor", "bd_rate_percent", "bpp", "psnr"])
        for preset, pts in report.points.items():
            anchor = report.orderings.get(preset, {}).get("anchor", "")
            for pt in pts:
                writer.writerow([preset, anchor, f"{report.bd_rates.get(preset, math.nan):.4f}",
                                 f"{pt.bpp:.6f}", f"{pt.psnr:.4f}"])
    return [jsonl, table] + plot_rd(report, out_dir)


def plot_rd(report: AblationReport, out_dir: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, curve in report.curves.items():
        ax.plot(curve.rates, curve.qualities, marker="o", label=name)
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)")
    if report.curves:
        ax.legend()
    ax.grid(alpha=0.3)
    rd = out_dir / "rd_curves.svg"
    fig.savefig(rd, format="svg", metadata={"Date": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    names = [f"{p}@{i}" for p, pts in report.points.items() for i in range(len(pts))]
    x = np.arange(len(names))
    bottoms = np.zeros(len(names))
    for key in ("header",) + SUBSTREAMS:
        vals = np.array([pt.breakdown.get(key, 0.0) for pts in report.points.values() for pt in pts])
        ax.bar(x, vals, bottom=bottoms, label=key)
        bottoms += vals
    ax.set_xticks(x, names, rotation=60, fontsize=7)
    ax.set_ylabel("bpp")
    ax.legend(fontsize=7)
    fig.tight_layout()
    stacks = out_dir / "bpp_breakdown.svg"
    fig.savefig(stacks, format="svg", metadata={"Date": None})
    plt.close(fig)
    return [rd, stacks]


__all__ = [
    "AblationReport", "ClosedLoopError", "FrameRecord", "MissingCheckpointsError", "PRESETS", "RDPoint",
    "SequenceResult", "bd_rate", "decode_sequence", "dominance", "encode_sequence", "evaluate_checkpoint",
    "evaluate_sequence", "gop_schedule", "ms_ssim", "psnr", "run_ablation",
]
