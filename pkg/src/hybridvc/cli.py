"""Command-line entry point.

Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 bitstream integrity or
compatibility, 6 internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from .codec.bitstream import write_sequence
from .codec.rans import DecodeError
from .config import PAPER_PARITY_GOP, CodecConfig, ConfigError, apply_overrides, canonical_text, load_config
from .data import IngestionError, load_sequence, write_frames
from .tensor_ops import ContractError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_BITSTREAM, EXIT_INTERNAL = 0, 2, 3, 4, 5, 6

log = logging.getLogger("hybridvc")


class UsageError(Exception):
    pass


def _steps(text: str) -> tuple[int, int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 4 or any(p < 0 for p in parts):
        raise argparse.ArgumentTypeError("expected four non-negative integers, e.g. 400,400,900,300")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridvc", description="Toy conditional video codec.")
    p.add_argument("--config", type=Path, help="TOML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable), e.g. --set ablation=D")
    p.add_argument("--seed", type=int, help="global seed (overrides config seed)")
    p.add_argument("--device", default="cpu", help="compute device (only cpu is supported)")
    p.add_argument("--paper-parity", action="store_true",
                   help="use the full-scale GOP, patch size and batch size")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("--data", type=Path, required=True, help="sequence (dir, .yuv or .npz) to train on")
    t.add_argument("--out", type=Path, required=True, help="output directory for checkpoints and logs")
    t.add_argument("--stage", default="all", choices=["1", "2", "3", "4", "all"])
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--steps", type=_steps, help="steps per stage, four comma-separated integers")
    t.add_argument("--lr", type=float)

    e = sub.add_parser("encode", help="code a sequence into a bitstream file")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--input", type=Path, required=True)
    e.add_argument("--output", type=Path, required=True)
    e.add_argument("--recon", type=Path, help="also write encoder-side reconstructions here (.pt)")
    e.add_argument("--frames", type=int, help="code at most this many frames")

    d = sub.add_parser("decode", help="decode a bitstream file")
    d.add_argument("--checkpoint", type=Path, required=True)
    d.add_argument("--input", type=Path, required=True)
    d.add_argument("--output", type=Path, required=True, help="directory for PNG frames")
    d.add_argument("--tensor", type=Path, help="also save the exact float reconstructions (.pt)")

    v = sub.add_parser("eval", help="rate and quality of a checkpoint on a sequence")
    v.add_argument("--checkpoint", type=Path, required=True)
    v.add_argument("--input", type=Path, required=True)
    v.add_argument("--out", type=Path, help="write per-frame JSONL records here")

    a = sub.add_parser("ablate", help="train and compare ablation presets")
    a.add_argument("--presets", default="A,D", help="comma-separated preset names")
    a.add_argument("--data", type=Path, required=True, help="training sequence")
    a.add_argument("--eval-data", type=Path, help="evaluation sequence (default: training sequence)")
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--checkpoint-dir", type=Path)
    a.add_argument("--no-train", action="store_true", help="fail instead of training missing checkpoints")
    a.add_argument("--steps", type=_steps, default=(100, 100, 300, 0))
    a.add_argument("--lambdas", default="0,1,2,3", help="lambda indices")

    s = sub.add_parser("synth", help="render a synthetic clip with ground-truth motion")
    s.add_argument("--family", default="translate", choices=["translate", "rotate", "elastic", "occlude"])
    s.add_argument("--out", type=Path, required=True, help=".npz output (frames, flows, valid mask)")
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--png-dir", type=Path, help="also write frames as numbered PNGs")

    sub.add_parser("selftest", help="run the built-in invariant checks")
    return p


def resolve_config(args) -> CodecConfig:
    cfg = load_config(args.config) if args.config else CodecConfig()
    if args.paper_parity:
        cfg = dataclasses.replace(cfg, gop=PAPER_PARITY_GOP)
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _train_config(args, cfg: CodecConfig, steps=None):
    from .training import TrainConfig

    kw = dict(lmbda=cfg.lmbda, distortion=cfg.distortion, seed=cfg.seed)
    if steps:
        kw["stage_steps"] = steps
    if getattr(args, "lr", None):
        kw["lr"] = args.lr
    return TrainConfig.paper(**kw) if args.paper_parity else TrainConfig(**kw)


def cmd_train(args, cfg):
    from .training import load_checkpoint, train_multistage

    frames = load_sequence(args.data)
    tc = _train_config(args, cfg, args.steps)
    model = None
    if args.resume:
        model, _ = load_checkpoint(args.resume, cfg)
    stages = (1, 2, 3, 4) if args.stage == "all" else (int(args.stage),)
    result = train_multistage(cfg, frames, tc, out_dir=args.out, stages=stages, model=model)
    (args.out / "config.toml").write_text(canonical_text(cfg))
    print(json.dumps({"initial_joint_loss": result.initial_joint_loss,
                      "final_joint_loss": result.final_joint_loss,
                      "checkpoints": [str(p) for p in result.checkpoints]}))


def cmd_encode(args, cfg):
    from .evaluation import encode_sequence
    from .training import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint, cfg)
    frames = load_sequence(args.input)
    if args.frames:
        frames = frames[:args.frames]
    streams, infos, recon = encode_sequence(model, frames, cfg.gop, decode_check=False)
    data = write_sequence(streams)
    args.output.write_bytes(data)
    if args.recon:
        torch.save(recon, args.recon)
    h, w = frames.shape[-2:]
    print(json.dumps({"frames": len(frames), "bytes": len(data), "bpp": 8 * len(data) / (len(frames) * h * w)}))


def cmd_decode(args, cfg):
    from .evaluation import decode_sequence
    from .training import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint, cfg)
    recon = decode_sequence(model, args.input.read_bytes())
    write_frames(recon, args.output)
    if args.tensor:
        torch.save(recon, args.tensor)
    print(json.dumps({"frames": len(recon)}))


def cmd_eval(args, cfg):
    from .evaluation import evaluate_checkpoint

    frames = load_sequence(args.input)
    res = evaluate_checkpoint(args.checkpoint, cfg, frames, cfg.gop)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "frames.jsonl", "w") as fh:
            for r in res.frames:
                fh.write(json.dumps(dataclasses.asdict(r)) + "\n")
    print(json.dumps(dataclasses.asdict(res.aggregate)))


def cmd_ablate(args, cfg):
    from .evaluation import run_ablation

    train = load_sequence(args.data)
    evald = load_sequence(args.eval_data) if args.eval_data else train
    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    indices = tuple(int(i) for i in args.lambdas.split(","))
    report = run_ablation(presets, train, evald, base_cfg=cfg, train_cfg=_train_config(args, cfg, args.steps),
                          lmbda_indices=indices, checkpoint_dir=args.checkpoint_dir,
                          train_missing=not args.no_train, out_dir=args.out)
    print(report.table())


def cmd_synth(args, cfg):
    from .synthetic import generate_synthetic_clip, save_clip

    clip = generate_synthetic_clip(args.family, seed=cfg.seed, frames=args.frames,
                                   height=args.size, width=args.size)
    save_clip(clip, args.out)
    if args.png_dir:
        write_frames(clip.tensor(), args.png_dir)
    print(json.dumps({"out": str(args.out), "frames": len(clip), "family": clip.family}))


def cmd_selftest(args, cfg):
    from . import selftest

    if not selftest.run():
        raise RuntimeError("selftest failed")


COMMANDS = {
    "train": cmd_train, "encode": cmd_encode, "decode": cmd_decode, "eval": cmd_eval,
    "ablate": cmd_ablate, "synth": cmd_synth, "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.device != "cpu":
            raise UsageError(f"device {args.device!r} is not supported; use cpu")
        cfg = resolve_config(args)
        torch.manual_seed(cfg.seed)
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DecodeError as exc:  # includes bitstream and compatibility errors
        print(f"bitstream error: {exc}", file=sys.stderr)
        return EXIT_BITSTREAM
    except (IngestionError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
