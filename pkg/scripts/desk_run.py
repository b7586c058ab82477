"""Desk-scale end-to-end run: 64x64 phantom, 40 train / 10 val clips, 60 epochs.

Prints one JSON line with the best validation Dice, wall time and a SHA-256
of the history and best weights, so two invocations can be compared bit for bit.

    python scripts/desk_run.py --seed 0 --variant full
"""
import argparse
import hashlib
import json
import time

import numpy as np

from deunet.experiments import DESK_NET, desk_phantom, desk_train_config
from deunet.training import train


def fingerprint(res):
    h = hashlib.sha256()
    for epoch, loss, val in res.history:
        h.update(np.array([epoch, loss, val], dtype=np.float64).tobytes())
    for name in sorted(res.best_state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(res.best_state[name]).tobytes())
    return h.hexdigest()


def desk_run(seed=0, variant="full", epochs=60):
    clips = desk_phantom(seed)
    t0 = time.perf_counter()
    res = train(clips, variant, desk_train_config(seed, max_epochs=epochs), DESK_NET)
    return dict(seed=seed, variant=str(getattr(variant, "value", variant)), epochs_run=len(res.history),
                best_epoch=res.best_epoch, best_val_dice=res.best_dice, seconds=time.perf_counter() - t0,
                sha256=fingerprint(res))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variant", default="full")
    ap.add_argument("--epochs", type=int, default=60)
    args = ap.parse_args()
    print(json.dumps(desk_run(args.seed, args.variant, args.epochs)), flush=True)


if __name__ == "__main__":
    main()
