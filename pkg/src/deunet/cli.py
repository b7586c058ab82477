"""Command line: gen-phantom, train, eval, infer, check.

Exit codes: 0 success, 1 runtime or validation failure (including a failing
``check``), 2 usage errors and missing input files.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys

import numpy as np
from PIL import Image

from . import verify
from .archive import load_archive, save_archive
from .config import RunConfig, load_run_config
from .errors import ConfigurationError, DeUNetError
from .experiments import DESK_PHANTOM
from .metrics import MetricReport
from .network import DeUNet, NetConfig, predict_mask
from .params import atomic_write_bytes, load_checkpoint, save_checkpoint
from .phantom import generate_phantom
from .training import train

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


def _need_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def cmd_gen_phantom(args):
    spec = dataclasses.replace(DESK_PHANTOM, n_clips=args.clips, size=args.size)
    clips = generate_phantom(spec, seed=args.seed)
    save_archive(args.out, clips)
    print(f"wrote {len(clips)} clips ({spec.size}x{spec.size}, T={clips[0].T}) to {args.out}")
    return 0


def cmd_train(args):
    if args.config:
        _need_file(args.config, "config file")
        run = load_run_config(args.config)
    else:
        run = RunConfig()
    if args.data:
        run = dataclasses.replace(run, data=args.data)
    if run.data:
        _need_file(run.data, "data archive")
        clips = load_archive(run.data, run.image_size or None)
    else:
        spec = DESK_PHANTOM if not run.image_size else dataclasses.replace(DESK_PHANTOM, size=run.image_size)
        clips = generate_phantom(dataclasses.replace(spec, r=run.net.r), seed=run.train.seed)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "config.txt"), run.to_text())

    history = io.StringIO()
    w = csv.writer(history, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_dice"])

    def on_epoch(epoch, loss, val_dice):
        w.writerow([epoch, f"{loss:.6f}", f"{val_dice:.6f}"])
        _write_text(os.path.join(args.out, "history.csv"), history.getvalue())
        print(f"epoch {epoch:3d}  loss {loss:.4f}  val_dice {val_dice:.4f}", flush=True)

    res = train(clips, run.variant, run.train, run.net, on_epoch=on_epoch)
    meta = dict(run.net.to_meta(), variant=run.variant.value, image_size=str(clips[0].frames.shape[-1]),
                best_epoch=str(res.best_epoch), best_val_dice=f"{res.best_dice:.6f}")
    save_checkpoint(os.path.join(args.out, "best.ckpt"), res.best_state, meta)
    print(f"best val Dice {res.best_dice:.4f} at epoch {res.best_epoch}; checkpoint in {args.out}")
    return 0


def _load_model(args):
    _need_file(args.checkpoint, "checkpoint")
    _need_file(args.data, "data archive")
    state, meta = load_checkpoint(args.checkpoint)
    if "variant" not in meta:
        raise ConfigurationError("checkpoint metadata lacks the network variant")
    cfg = NetConfig.from_meta(meta)
    if args.config:
        _need_file(args.config, "config file")
        run = load_run_config(args.config)
        if run.net != cfg or run.variant.value != meta["variant"]:
            raise ConfigurationError(f"checkpoint architecture {cfg} / {meta['variant']} does not match "
                                     f"config {run.net} / {run.variant.value}")
    net = DeUNet.from_state(state, cfg, meta["variant"], dtype=np.float64)
    size = args.size or int(meta.get("image_size", 0)) or None
    clips = load_archive(args.data, size)
    if clips and clips[0].T != cfg.T:
        raise ConfigurationError(f"archive clips have T={clips[0].T}, checkpoint expects T={cfg.T}")
    return net, meta, clips


def _predict(net, clips, batch_size=8):
    masks = []
    for start in range(0, len(clips), batch_size):
        batch = clips[start:start + batch_size]
        masks.extend(predict_mask(net.forward(np.stack([c.frames for c in batch]))))
    return masks


def cmd_eval(args):
    net, meta, clips = _load_model(args)
    report = MetricReport(method=meta["variant"])
    for clip, pred in zip(clips, _predict(net, clips)):
        report.add(pred, clip.mask, clip.phase, clip.spacing)
    text = report.to_csv()
    _write_text(args.report, text)
    print(text, end="")
    return 0


def cmd_infer(args):
    net, _, clips = _load_model(args)
    os.makedirs(args.out, exist_ok=True)
    index = io.StringIO()
    w = csv.writer(index, lineterminator="\n")
    w.writerow(["clip", "subject", "timestamp", "phase", "png", "csv"])
    for k, (clip, pred) in enumerate(zip(clips, _predict(net, clips))):
        stem = f"clip{k:04d}_s{clip.subject}_t{clip.timestamp}"
        png = io.BytesIO()
        Image.fromarray(pred).save(png, format="PNG")
        atomic_write_bytes(os.path.join(args.out, stem + ".png"), png.getvalue())
        grid = io.StringIO()
        np.savetxt(grid, pred, fmt="%d", delimiter=",")
        _write_text(os.path.join(args.out, stem + ".csv"), grid.getvalue())
        w.writerow([k, clip.subject, clip.timestamp, clip.phase, stem + ".png", stem + ".csv"])
    _write_text(os.path.join(args.out, "index.csv"), index.getvalue())
    print(f"wrote {len(clips)} masks to {args.out}")
    return 0


def read_mask_png(path):
    """Label mask written by ``infer``."""
    with Image.open(path) as im:
        return np.array(im, dtype=np.uint8)


def cmd_check(args):
    ok = verify.run_all()
    print("ALL PASS" if ok else "SOME CHECKS FAILED")
    return 0 if ok else 1


def build_parser():
    ap = argparse.ArgumentParser(prog="deunet", description="Temporal deformable U-Net for cardiac MRI clips.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="write a synthetic clip archive")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clips", type=int, default=DESK_PHANTOM.n_clips)
    p.add_argument("--size", type=int, default=DESK_PHANTOM.size)
    p.set_defaults(fn=cmd_gen_phantom)

    p = sub.add_parser("train", help="train one fold; writes config.txt, history.csv, best.ckpt")
    p.add_argument("--config")
    p.add_argument("--data", help="archive path (overrides the config's data key)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    for name, fn, help_ in (("eval", cmd_eval, "score a checkpoint, write a per-class/phase report"),
                            ("infer", cmd_infer, "export predicted masks as PNG and CSV")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--config", help="fail unless the checkpoint matches this run config")
        p.add_argument("--size", type=int, default=0, help="resize clips (default: training size)")
        if name == "eval":
            p.add_argument("--report", required=True)
        else:
            p.add_argument("--out", required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("check", help="run every oracle and gradient check")
    p.set_defaults(fn=cmd_check)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        ap.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DeUNetError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
