"""Rate-distortion loss, the staged training schedule and checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec.bitstream import CompatibilityError
from .codec.entropy import FactorizedPrior
from .codec.model import VideoCodec
from .config import MSE_LAMBDAS, MSSSIM_LAMBDAS, CodecConfig, canonical_text, parse_text
from .metrics import ms_ssim_torch
from .tensor_ops import ContractError

CHECKPOINT_FORMAT = "hybridvc-checkpoint-1"
RATE_TERMS = ("bits_flow", "bits_offset", "bits_frame")


class DivergenceError(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lmbda: float = 2048.0
    distortion: str = "mse"
    stage_steps: tuple[int, int, int, int] = (400, 400, 900, 300)
    lr: float = 1e-4
    finetune_lr: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 1
    patch_size: int = 64
    seed: int = 0
    quant_mode: str = "round"
    prior_lr_scale: float = 10.0
    grad_clip: float = 1.0
    cascade_frames: int = 4          # inter frames chained in stage 4
    log_every: int = 10
    paper_parity: bool = False

    def __post_init__(self):
        if self.distortion not in ("mse", "ms-ssim"):
            raise ContractError(f"distortion {self.distortion!r} not in ('mse', 'ms-ssim')")
        if not self.lmbda > 0:
            raise ContractError("lmbda must be positive")
        if self.cascade_frames < 1:
            raise ContractError("cascade_frames must be >= 1")
        if self.patch_size % 64:
            raise ContractError("patch_size must be a multiple of 64")
        if self.paper_parity:
            table = MSE_LAMBDAS if self.distortion == "mse" else MSSSIM_LAMBDAS
            if self.lmbda not in table:
                raise ContractError(f"lmbda {self.lmbda} not in {table} ({self.distortion})")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        kw.setdefault("batch_size", 4)
        kw.setdefault("patch_size", 256)
        return cls(paper_parity=True, **kw)


def distortion(recon: torch.Tensor, target: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "mse":
        return ((recon - target) ** 2).mean()
    return 1.0 - ms_ssim_torch(recon, target).mean()


def rd_loss(outputs: dict, cfg: TrainConfig, target: torch.Tensor) -> dict:
    """R + lambda * D with rates in bits per pixel.

    Side information of the frame latent counts towards the frame rate.
    Returns every term; ``loss`` equals the sum of the rate terms and
    ``weighted_distortion``.
    """
    missing = [k for k in RATE_TERMS + ("recon",) if k not in outputs]
    if missing:
        raise ContractError(f"rd_loss: outputs lack {missing}")
    pixels = target.shape[0] * target.shape[-2] * target.shape[-1]
    terms = {
        "rate_flow": outputs["bits_flow"] / pixels,
        "rate_offset": outputs["bits_offset"] / pixels,
        "rate_frame": (outputs["bits_frame"] + outputs.get("bits_hyper", 0.0)) / pixels,
    }
    d = distortion(outputs["recon"], target, cfg.distortion)
    terms["distortion"] = d
    terms["weighted_distortion"] = cfg.lmbda * d
    terms["bpp"] = terms["rate_flow"] + terms["rate_offset"] + terms["rate_frame"]
    terms["loss"] = terms["bpp"] + terms["weighted_distortion"]
    return terms


def intra_outputs(out: dict) -> dict:
    zero = out["bits_frame"].new_zeros(())
    return {**out, "bits_flow": zero, "bits_offset": zero}


# -- parameter bookkeeping ---------------------------------------------------

def parameter_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def stage_parameters(model: VideoCodec, stage: int) -> tuple[list, list]:
    """(trainable, frozen) parameter lists for a stage."""
    motion = model.motion_parameters()
    intra = model.intra_parameters()
    rest = model.inter_parameters()
    if stage == 1:
        return motion + intra, rest
    if stage == 2:
        return intra + rest, motion
    return list(model.parameters()), []


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, model: VideoCodec, stage: int = 0, step: int = 0, extra: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config_hash": model.model_hash.hex(),
        "config_text": canonical_text(model.cfg),
        "stage": stage,
        "step": step,
        "extra": extra or {},
        "state_dict": model.state_dict(),
    }, path)


def load_checkpoint(path, cfg: CodecConfig | None = None) -> tuple[VideoCodec, dict]:
    """Rebuild the model stored at ``path``; refuses a checkpoint whose hash differs from ``cfg``."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CompatibilityError(f"{path} is not a codec checkpoint")
    stored = parse_text(blob["config_text"])
    if stored.hash().hex() != blob["config_hash"]:
        raise CompatibilityError(f"{path}: embedded config does not match its hash")
    if cfg is not None:
        if cfg.hash() != stored.hash():
            raise CompatibilityError(
                f"checkpoint config hash {blob['config_hash']} != requested {cfg.hash().hex()}")
        stored = dataclasses.replace(stored, gop=cfg.gop, lmbda_index=cfg.lmbda_index, seed=cfg.seed,
                                     distortion=cfg.distortion)
    model = VideoCodec(stored)
    model.load_state_dict(blob["state_dict"])
    model.invalidate_tables()
    model.eval()
    return model, {k: blob[k] for k in ("stage", "step", "extra", "config_hash")}


# -- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    model: VideoCodec
    log: list[dict] = field(default_factory=list)
    initial_joint_loss: float = math.nan
    final_joint_loss: float = math.nan
    checkpoints: list[Path] = field(default_factory=list)


class _Sampler:
    """Random (frame index, crop) batches from one or more clips."""

    def __init__(self, clips: list[torch.Tensor], patch: int, batch: int, seed: int):
        self.clips = clips
        self.patch = patch
        self.batch = batch
        self.rng = np.random.default_rng(seed)
        for c in clips:
            if c.shape[-1] < patch or c.shape[-2] < patch:
                raise ContractError(f"clip {tuple(c.shape)} is smaller than the {patch}px patch")

    def __call__(self, length: int) -> torch.Tensor:
        """Batch x length x 3 x patch x patch of consecutive frames."""
        out = []
        for _ in range(self.batch):
            clip = self.clips[self.rng.integers(len(self.clips))]
            if len(clip) < length:
                raise ContractError(f"clip has {len(clip)} frames, need {length}")
            t = self.rng.integers(0, len(clip) - length + 1)
            y = self.rng.integers(0, clip.shape[-2] - self.patch + 1)
            x = self.rng.integers(0, clip.shape[-1] - self.patch + 1)
            out.append(clip[t:t + length, :, y:y + self.patch, x:x + self.patch])
        return torch.stack(out)


def _terms_to_floats(terms: dict) -> dict:
    return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in terms.items()}


def stage_step(model: VideoCodec, frames: torch.Tensor, stage: int, cfg: TrainConfig) -> dict:
    """Loss terms for one batch of consecutive frames (B x T x 3 x H x W)."""
    x_prev, x_cur = frames[:, 0], frames[:, 1]
    intra = model.forward_intra(x_prev, cfg.quant_mode)
    intra_terms = rd_loss(intra_outputs(intra), cfg, x_prev)
    ref, feat = intra["recon"].detach(), intra["feature"].detach()
    if stage == 1:
        out = model.forward_inter(x_cur, ref, feat, cfg.quant_mode, motion_only=True)
        zero = out["bits_flow"].new_zeros(())
        motion = {"bits_flow": out["bits_flow"], "bits_offset": zero, "bits_frame": zero,
                  "recon": out["warped"]}
        inter_terms = [rd_loss(motion, cfg, x_cur)]
    else:
        out = model.forward_inter(x_cur, ref, feat, cfg.quant_mode)
        inter_terms = [rd_loss(out, cfg, x_cur)]
        for t in range(2, frames.shape[1] if stage == 4 else 2):
            out = model.forward_inter(frames[:, t], out["recon"], out["feature"], cfg.quant_mode)
            inter_terms.append(rd_loss(out, cfg, frames[:, t]))
    n = len(inter_terms)
    inter = {k: sum(t[k] for t in inter_terms) / n for k in inter_terms[0]}
    result = {f"inter_{k}": v for k, v in inter.items()}
    result.update({f"intra_{k}": v for k, v in intra_terms.items()})
    result["loss"] = inter["loss"] + intra_terms["loss"]
    return result


@torch.no_grad()
def joint_loss(model: VideoCodec, clip: torch.Tensor, cfg: TrainConfig) -> float:
    """Deterministic single-frame joint loss averaged over every consecutive pair of ``clip``."""
    was_training = model.training
    model.train()
    total = 0.0
    for t in range(1, len(clip)):
        total += float(stage_step(model, clip[t - 1:t + 1].unsqueeze(0), 3,
                                  dataclasses.replace(cfg, quant_mode="round"))["loss"])
    model.train(was_training)
    return total / (len(clip) - 1)


def train_stage(model: VideoCodec, sampler: _Sampler, stage: int, steps: int, cfg: TrainConfig,
                log: list, log_file=None, snapshot_dir: Path | None = None) -> None:
    trainable, frozen = stage_parameters(model, stage)
    for p in model.parameters():
        p.requires_grad_(False)
    for p in trainable:
        p.requires_grad_(True)
    frozen_before = parameter_hash(frozen)
    lr = cfg.finetune_lr if stage == 4 else cfg.lr
    priors = {id(p) for m in model.modules() if isinstance(m, FactorizedPrior) for p in m.parameters()}
    groups = [
        {"params": [p for p in trainable if id(p) not in priors], "lr": lr},
        {"params": [p for p in trainable if id(p) in priors], "lr": lr * cfg.prior_lr_scale},
    ]
    opt = torch.optim.AdamW([g for g in groups if g["params"]], weight_decay=cfg.weight_decay)
    model.train()
    length = 2
    if stage == 4:
        # short clips shorten the cascade rather than fail
        length = max(2, min(cfg.cascade_frames + 1, min(len(c) for c in sampler.clips)))
    for step in range(1, steps + 1):
        frames = sampler(length)
        terms = stage_step(model, frames, stage, cfg)
        loss = terms["loss"]
        if not torch.isfinite(loss):
            record = {"stage": stage, "step": step, **_terms_to_floats(terms)}
            if snapshot_dir is not None:
                save_checkpoint(Path(snapshot_dir) / "divergence.pt", model, stage, step, record)
            raise DivergenceError(f"non-finite loss at stage {stage} step {step}: {record}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
        opt.step()
        if step == 1 or step % cfg.log_every == 0 or step == steps:
            record = {"stage": stage, "step": step, **_terms_to_floats(terms)}
            log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
    for p in model.parameters():
        p.requires_grad_(True)
    if parameter_hash(frozen) != frozen_before:
        raise FreezeViolation(f"stage {stage} modified frozen parameters")


def build_model(cfg: CodecConfig, seed: int = 0) -> VideoCodec:
    torch.manual_seed(seed)
    return VideoCodec(cfg)


def train_multistage(codec_cfg: CodecConfig, clips, cfg: TrainConfig = TrainConfig(),
                     out_dir=None, stages=(1, 2, 3, 4), model: VideoCodec | None = None) -> TrainResult:
    """Run the staged schedule on ``clips`` (T x 3 x H x W tensors).

    Stage 1: motion and intra; 2: everything but motion; 3: all jointly;
    4: all, multi-frame cascade (cascade_frames) at the fine-tuning learning rate.
    """
    if isinstance(clips, torch.Tensor):
        clips = [clips]
    torch.manual_seed(cfg.seed)
    model = model if model is not None else build_model(codec_cfg, cfg.seed)
    sampler = _Sampler(list(clips), cfg.patch_size, cfg.batch_size, cfg.seed)
    probe = clips[0][..., :cfg.patch_size, :cfg.patch_size]
    result = TrainResult(model)
    result.initial_joint_loss = joint_loss(model, probe, cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "w")
    try:
        for stage in stages:
            steps = cfg.stage_steps[stage - 1]
            if steps <= 0:
                continue
            train_stage(model, sampler, stage, steps, cfg, result.log, log_file, out_dir)
            if out_dir is not None:
                path = out_dir / f"stage{stage}.pt"
                save_checkpoint(path, model, stage, steps)
                result.checkpoints.append(path)
    finally:
        if log_file is not None:
            log_file.close()
    model.invalidate_tables()
    result.final_joint_loss = joint_loss(model, probe, cfg)
    model.eval()
    return result
