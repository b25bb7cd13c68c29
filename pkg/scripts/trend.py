"""Accuracy on a fixed held-out set as the training set grows."""

import json

from _common import config, parser
from sfcn.experiments import trend

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--fractions", default="0.25,0.5,0.75", help="training fractions of the whole family")
    args = p.parse_args()
    fractions = tuple(float(f) for f in args.fractions.split(","))
    runs = trend(config(args), count=args.count, test_fraction=args.test_fraction, fractions=fractions)
    rows = []
    for f, report in runs:
        s = report.summary
        rows.append({"fraction": f, "train_shapes": len(report.trials[0]["train_shapes"]),
                     "unrefined": s["test_unrefined_mean"], "refined": s["test_refined_mean"]})
        print(f"{f:5.2f} {rows[-1]['train_shapes']:3d} shapes  before {rows[-1]['unrefined']:.4f}  "
              f"after {rows[-1]['refined']:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)
