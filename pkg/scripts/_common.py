"""Shared flags for the experiment runners."""

import argparse
import logging

from sfcn.experiments import ExperimentConfig


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--category", default="dumbbell", choices=("dumbbell", "table", "glasses"))
    p.add_argument("--faces", type=int, default=1500, help="approximate faces per shape")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=ExperimentConfig.lr)
    p.add_argument("--lam", type=float, default=1.0, help="refinement smoothness weight")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--cache", default=None, help="preprocessing cache directory")
    p.add_argument("--out", default=None, help="write the JSON report here")
    return p


def config(args) -> ExperimentConfig:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    return ExperimentConfig(args.category, args.faces, args.epochs, args.lr, args.seed, args.lam,
                            args.jobs, args.cache)


def emit(report, out) -> None:
    print(report.table())
    if out:
        with open(out, "w") as fh:
            fh.write(report.to_json(include_timings=True) + "\n")
