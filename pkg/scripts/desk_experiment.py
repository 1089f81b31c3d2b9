"""Train the K1 model on the desk-scale collection and report test mIoU."""

import argparse
import time

from crossshape.experiments import desk_config, train_and_test


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--strategy", choices=["direct", "upsample"], default="direct")
    args = ap.parse_args()

    start = time.perf_counter()

    def progress(row: dict) -> None:
        print(f"[{time.perf_counter() - start:7.1f}s] {row['phase']} epoch {row['epoch']:>2} "
              f"loss {row['train_loss']:.4f} val part mIoU {row['val_part_miou']:.4f}", flush=True)

    out = train_and_test(desk_config(args.seed), strategy=args.strategy, progress=progress)
    print(f"phases run: {' '.join(out.training.phases_run)}")
    print(f"best val part mIoU: {out.training.best_val:.4f}")
    print(f"test part mIoU: {out.report.part_miou:.4f}  shape mIoU: {out.report.shape_miou:.4f}")
    print(f"wall time: {out.seconds / 60:.1f} min")


if __name__ == "__main__":
    main()
