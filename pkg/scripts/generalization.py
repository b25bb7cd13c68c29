"""Repeated random train/test splits of one synthetic family, with before/after refinement pairs."""

from _common import config, emit, parser
from sfcn.experiments import format_pairs, generalization

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--train", type=int, default=6, help="training shapes per trial")
    p.add_argument("--trials", type=int, default=3)
    args = p.parse_args()
    report = generalization(config(args), count=args.count, n_train=args.train, trials=args.trials)
    emit(report, args.out)
    print(format_pairs(report))
