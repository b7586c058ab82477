"""Synthetic short-axis cine phantoms for desk-scale training.

Each subject is a cine loop of ``cycle_frames`` frames: an LV disk inside a
myocardial ring with a right-ventricle crescent hugging the ring. Cavities
contract sinusoidally (end-diastole at frame 0, end-systole at the middle of
the cycle) while the whole heart drifts by a few pixels, so neighbouring
frames are misaligned. Frames get a smooth background texture, a slight
blur and additive Gaussian noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import Clip, make_clip


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    n_clips: int = 50
    clips_per_subject: int = 5
    cycle_frames: int = 10
    r: int = 1
    lv_radius: tuple = (0.10, 0.15)  # fraction of image size
    myo_thickness: tuple = (0.04, 0.06)
    contraction: tuple = (0.15, 0.30)  # relative LV radius loss at end-systole
    drift: float = 2.0  # pixels of in-plane heart motion over the cycle
    noise: float = 0.15
    blur: float = 0.7
    spacing: float = 1.5  # mm per pixel
    boundary: str = "cyclic"


def _ellipse(yy, xx, cy, cx, a, b, theta):
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _subject_params(spec, rng):
    L = spec.size
    lv = rng.uniform(*spec.lv_radius) * L
    return dict(
        centre=np.array([L / 2, L / 2]) + rng.uniform(-0.06, 0.06, 2) * L,
        lv=lv,
        aspect=rng.uniform(0.85, 1.15),
        theta=rng.uniform(0, np.pi),
        thick=rng.uniform(*spec.myo_thickness) * L,
        contraction=rng.uniform(*spec.contraction),
        rv_dir=rng.uniform(0.75, 1.25) * np.pi,  # RV sits on the image-left side, like short-axis views
        rv_scale=rng.uniform(0.9, 1.15),
        phase=rng.uniform(0, 2 * np.pi, 2),
        intensity=dict(bg=rng.uniform(0.1, 0.2), lv=rng.uniform(0.75, 0.95),
                       myo=rng.uniform(0.3, 0.42), rv=rng.uniform(0.65, 0.85)),
    )


def render_frame(spec, p, t, rng):
    """Image and label map of one cine frame ``t`` for subject parameters ``p``."""
    L = spec.size
    yy, xx = np.mgrid[0:L, 0:L].astype(np.float64)
    w = 2 * np.pi * t / spec.cycle_frames
    squeeze = 1.0 - p["contraction"] * (1 - np.cos(w)) / 2
    cy, cx = p["centre"] + spec.drift / 2 * np.array([np.sin(w + p["phase"][0]), np.sin(w + p["phase"][1])])
    a, b = p["lv"] * squeeze, p["lv"] * squeeze * p["aspect"]
    thick = p["thick"] * (1 + 0.4 * (1 - squeeze))  # wall thickens in systole
    lv = _ellipse(yy, xx, cy, cx, a, b, p["theta"])
    outer = _ellipse(yy, xx, cy, cx, a + thick, b + thick, p["theta"])
    r_out = max(a, b) + thick
    ry = cy + np.sin(p["rv_dir"]) * 0.9 * r_out
    rx = cx + np.cos(p["rv_dir"]) * 0.9 * r_out
    rv_sq = 1 - 0.6 * (1 - squeeze)
    rv = _ellipse(yy, xx, ry, rx, 1.3 * r_out * p["rv_scale"] * rv_sq, 0.8 * r_out * p["rv_scale"] * rv_sq,
                  p["rv_dir"] + np.pi / 2)
    gap = _ellipse(yy, xx, cy, cx, a + thick + 1.0, b + thick + 1.0, p["theta"])
    rv &= ~gap

    mask = np.zeros((L, L), dtype=np.uint8)
    mask[rv] = 1
    mask[outer & ~lv] = 2
    mask[lv] = 3

    ints = p["intensity"]
    texture = ndimage.gaussian_filter(rng.standard_normal((L, L)), L / 10) * 0.5
    img = ints["bg"] + texture * 0.1
    img = np.where(mask == 1, ints["rv"], img)
    img = np.where(mask == 2, ints["myo"], img)
    img = np.where(mask == 3, ints["lv"], img)
    if spec.blur:
        img = ndimage.gaussian_filter(img, spec.blur)
    img = img + rng.standard_normal((L, L)) * spec.noise
    return img.astype(np.float32), mask


def clip_timestamps(cycle_frames, count):
    """``count`` spread-out timestamps that always include ED (0) and ES (middle)."""
    ts = sorted({int(round(k * cycle_frames / count)) % cycle_frames for k in range(count)})
    es = cycle_frames // 2
    if es not in ts and len(ts) > 1:
        nearest = min(ts[1:], key=lambda t: (abs(t - es), t))
        ts[ts.index(nearest)] = es
    return sorted(ts)


def generate_phantom(spec=PhantomSpec(), seed=0):
    """List of :class:`Clip` records, ``spec.clips_per_subject`` per subject."""
    rng = np.random.default_rng(seed)
    clips = []
    subject = 0
    while len(clips) < spec.n_clips:
        p = _subject_params(spec, rng)
        rendered = [render_frame(spec, p, t, rng) for t in range(spec.cycle_frames)]
        cine = np.stack([f for f, _ in rendered])
        es = spec.cycle_frames // 2
        for t0 in clip_timestamps(spec.cycle_frames, spec.clips_per_subject):
            if len(clips) == spec.n_clips:
                break
            phase = "ED" if t0 == 0 else "ES" if t0 == es else "other"
            clips.append(Clip(subject, t0, phase, spec.spacing,
                              make_clip(cine, t0, spec.r, spec.boundary), rendered[t0][1]))
        subject += 1
    return clips
