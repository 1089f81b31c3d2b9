"""Wall time of one cross-shape attention layer with and without key subsampling."""

import argparse

from crossshape.experiments import time_csa


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--points", type=int, default=2500)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--keys", type=int, nargs="+", default=[2000, 1500, 1000, 500])
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    full = time_csa(args.points, args.width, None, args.repeats)
    print(f"keys {args.points:>5}: {full * 1e3:8.1f} ms")
    for k in args.keys:
        t = time_csa(args.points, args.width, k, args.repeats)
        print(f"keys {k:>5}: {t * 1e3:8.1f} ms  speedup {full / t:.2f}x")


if __name__ == "__main__":
    main()
