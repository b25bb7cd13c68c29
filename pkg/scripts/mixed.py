"""Several synthetic families in one dataset, each keeping its own label ids."""

from _common import config, emit, parser
from sfcn import evaluate as ev
from sfcn.experiments import mixed_manifest

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--categories", default="dumbbell,table,glasses")
    p.add_argument("--count", type=int, default=4, help="shapes per family")
    p.add_argument("--trials", type=int, default=1)
    args = p.parse_args()
    cfg = config(args)
    m = mixed_manifest(args.categories.split(","), args.count, cfg, trials=args.trials,
                       split=ev.SplitConfig(train_fraction=0.5, seed=args.seed))
    emit(ev.run_experiment(m, jobs=cfg.jobs, cache_dir=cfg.cache_dir), args.out)
