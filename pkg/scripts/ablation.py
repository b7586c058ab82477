"""Full network vs the no-TDAM (early fusion) variant on phantom data, several seeds.

    python scripts/ablation.py --seeds 0 1 2 3 4 --out ablation.csv
"""
import argparse
import csv
import time

from deunet.experiments import DESK_NET, desk_train_config, desk_phantom
from deunet.training import train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", nargs="+", default=["full", "no_tdam"])
    ap.add_argument("--out", default="ablation.csv")
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        clips = desk_phantom(seed)
        for variant in args.variants:
            t0 = time.time()
            res = train(clips, variant, desk_train_config(seed), DESK_NET)
            rows.append((seed, variant, res.best_epoch, f"{res.best_dice:.6f}", f"{time.time() - t0:.1f}"))
            print(*rows[-1], flush=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "variant", "best_epoch", "best_val_dice", "seconds"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
