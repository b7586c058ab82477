"""Dice, Hausdorff distance and average symmetric surface distance per class.

Masks carry labels {0: background, 1: RV, 2: MYO, 3: LV}. Surfaces are
4-connected border pixels computed per 2-D slice; a ``[Z, H, W]`` stack is
scored slice by slice (HD takes the max over slices, ASSD pools all surface
distances). Distances are in ``spacing`` units (mm when known).

Conventions when a class is missing: both masks empty gives Dice 1 and
HD/ASSD 0; exactly one empty gives NaN for HD/ASSD ("undefined"), which
reports exclude from averages and count separately.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError, DimensionError

LABELS = {"RV": 1, "MYO": 2, "LV": 3}
N_LABELS = 4


def validate_mask(mask):
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= N_LABELS):
        raise DataError(f"mask labels must lie in 0..{N_LABELS - 1}")
    return mask


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt, class_id):
    pred, gt = _check_pair(pred, gt)
    a, b = pred == class_id, gt == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def _border(binary):
    # pad with background so the image edge counts as outside
    padded = np.pad(binary, 1, constant_values=False)
    interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(2, 1),
                                      border_value=0)[1:-1, 1:-1]
    return binary & ~interior


def surface_points(mask, class_id, spacing=1.0):
    """Border pixel coordinates of ``class_id`` in a 2-D mask, scaled by ``spacing``."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"surface_points expects a 2-D mask, got {mask.shape}")
    pts = np.argwhere(_border(mask == class_id)).astype(np.float64)
    return pts * np.broadcast_to(np.asarray(spacing, dtype=np.float64), (2,))


def _directed(src_border, dst_border, spacing):
    # distance from every pixel to the nearest destination surface pixel
    dist = ndimage.distance_transform_edt(~dst_border, sampling=spacing)
    return dist[src_border]


def _slice_distances(pred, gt, class_id, spacing):
    a, b = _border(pred == class_id), _border(gt == class_id)
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return "empty", None
    if na == 0 or nb == 0:
        return "undefined", None
    sp = tuple(np.broadcast_to(np.asarray(spacing, dtype=np.float64), (2,)))
    return "ok", (_directed(a, b, sp), _directed(b, a, sp))


def _surface_distances(pred, gt, class_id, spacing):
    pred, gt = _check_pair(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.ndim != 3:
        raise DimensionError(f"expected [H,W] or [Z,H,W] masks, got {pred.shape}")
    parts, undefined = [], 0
    for p, g in zip(pred, gt):
        status, d = _slice_distances(p, g, class_id, spacing)
        if status == "undefined":
            undefined += 1
        elif status == "ok":
            parts.append(d)
    return parts, undefined


def hausdorff(pred, gt, class_id, spacing=1.0):
    """Symmetric Hausdorff distance between class surfaces; NaN when undefined."""
    parts, undefined = _surface_distances(pred, gt, class_id, spacing)
    if undefined:
        return math.nan
    if not parts:
        return 0.0
    return float(max(max(da.max(), db.max()) for da, db in parts))


def assd(pred, gt, class_id, spacing=1.0):
    """Average symmetric surface distance; NaN when undefined."""
    parts, undefined = _surface_distances(pred, gt, class_id, spacing)
    if undefined:
        return math.nan
    if not parts:
        return 0.0
    dists = [v for da, db in parts for v in (da.tolist() + db.tolist())]
    return math.fsum(dists) / len(dists)


PHASES = ("ED", "ES")
METRICS = ("ASSD", "HD", "Dice")
_FNS = {"ASSD": assd, "HD": hausdorff, "Dice": lambda p, g, c, spacing=1.0: dice(p, g, c)}


@dataclass
class MetricReport:
    """Per class x phase scores plus averages over every scored case.

    ``cases`` holds ``(phase, class_name, metric, value)`` rows.
    """
    method: str = "full"
    cases: list = field(default_factory=list)

    def add(self, pred, gt, phase, spacing=1.0):
        for cname, cid in LABELS.items():
            for m in METRICS:
                self.cases.append((phase, cname, m, float(_FNS[m](pred, gt, cid, spacing=spacing))))

    def _values(self, metric, cname=None, phase=None):
        return [v for (ph, c, m, v) in self.cases
                if m == metric and (cname is None or c == cname) and (phase is None or ph == phase)]

    def summary(self, metric, cname=None, phase=None):
        """``(mean, std, n_used, n_undefined)`` over matching cases."""
        vals = self._values(metric, cname, phase)
        good = [v for v in vals if not math.isnan(v)]
        if not good:
            return math.nan, math.nan, 0, len(vals)
        return float(np.mean(good)), float(np.std(good)), len(good), len(vals) - len(good)

    def columns(self):
        return [f"{c}_{ph}" for c in ("LV", "MYO", "RV") for ph in PHASES] + ["Average"]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.columns()
        w.writerow(["method", "metric"] + cols + [f"{c}_std" for c in cols] + ["n_undefined"])
        for m in METRICS:
            means, stds, undef = [], [], 0
            for col in cols:
                if col == "Average":
                    mean, std, _, u = self.summary(m)
                else:
                    cname, ph = col.split("_")
                    mean, std, _, u = self.summary(m, cname, ph)
                means.append(f"{mean:.4f}")
                stds.append(f"{std:.4f}")
                if col == "Average":
                    undef = u
            w.writerow([self.method, m] + means + stds + [undef])
        return buf.getvalue()
