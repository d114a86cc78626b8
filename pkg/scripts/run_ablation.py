"""Train and compare ablation presets on the elastic-motion synthetic family.

    python scripts/run_ablation.py --presets A,D,F --out runs/ablation
"""
import argparse
from pathlib import Path

import torch

from hybridvc.config import GopConfig
from hybridvc.evaluation import run_ablation
from hybridvc.synthetic import generate_synthetic_clip
from hybridvc.training import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--presets", default="A,D")
    p.add_argument("--family", default="elastic")
    p.add_argument("--steps", default="100,100,300,0", help="steps for stages 1-4, same for every preset")
    p.add_argument("--lambdas", default="0,1,2,3", help="rate-point indices")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--checkpoint-dir", type=Path)
    p.add_argument("--out", type=Path, required=True)
    args = p.parse_args()

    torch.set_num_threads(args.threads)
    train = generate_synthetic_clip(args.family, seed=args.seed, frames=8).tensor()
    evald = generate_synthetic_clip(args.family, seed=args.seed + 1, frames=8).tensor()
    presets = [s.strip() for s in args.presets.split(",") if s.strip()]
    report = run_ablation(
        presets, train, evald,
        train_cfg=TrainConfig(seed=args.seed, stage_steps=tuple(int(s) for s in args.steps.split(","))),
        lmbda_indices=tuple(int(i) for i in args.lambdas.split(",")),
        checkpoint_dir=args.checkpoint_dir, out_dir=args.out, gop=GopConfig(8, 8),
        orderings=tuple((a, b) for a, b in (("D", "A"), ("D", "F"), ("J", "D"))
                        if a in presets and b in presets),
    )
    print(report.table())
    for path in report.files:
        print(path)


if __name__ == "__main__":
    main()
