"""Low-data comparison of the K1 model against the self-attention-only variant."""

import argparse

import numpy as np

from crossshape.experiments import compare_variants


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()

    scores = compare_variants(range(args.seeds),
                              progress=lambda s, name, v: print(f"seed {s} {name:>3}: {v:.4f}", flush=True))
    for name in ("k1", "ssa"):
        vals = np.asarray(scores[name])
        print(f"{name:>3}: mean {vals.mean():.4f}  std {vals.std():.4f}")
    gap = np.mean(scores["k1"]) - np.mean(scores["ssa"])
    print(f"mean gap (k1 - ssa): {gap:+.4f}")


if __name__ == "__main__":
    main()
