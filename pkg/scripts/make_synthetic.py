"""Write a synthetic family as OFF meshes, .seg labels and a manifest usable by the CLI."""

import argparse

from sfcn import evaluate as ev
from sfcn.experiments import ExperimentConfig, mixed_manifest, write_dataset

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out_dir")
    p.add_argument("--categories", default="dumbbell", help="comma-separated families")
    p.add_argument("--count", type=int, default=10, help="shapes per family")
    p.add_argument("--faces", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.6)
    p.add_argument("--trials", type=int, default=3)
    args = p.parse_args()
    cats = args.categories.split(",")
    cfg = ExperimentConfig(faces=args.faces, seed=args.seed)
    split = ev.SplitConfig(train_fraction=args.train_fraction, seed=args.seed)
    if len(cats) == 1:
        m = ev.synthetic_manifest(cats[0], args.count, faces=args.faces, seed=args.seed, split=split,
                                  trials=args.trials)
    else:
        m = mixed_manifest(cats, args.count, cfg, split=split, trials=args.trials)
    print(write_dataset(m, args.out_dir))
