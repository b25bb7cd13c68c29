"""Train on a few synthetic shapes and score the same shapes."""

import time

from _common import config, emit, parser
from sfcn.experiments import overfit

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--count", type=int, default=4)
    args = p.parse_args()
    t0 = time.perf_counter()
    report = overfit(config(args), count=args.count)
    emit(report, args.out)
    print(f"wall clock {time.perf_counter() - t0:.0f}s")
