"""Clip records, cine-loop clip extraction and resizing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DataError
from .metrics import validate_mask

PHASE_TAGS = ("other", "ED", "ES")


@dataclass
class Clip:
    """``2r+1`` frames centred on a labelled target frame."""
    subject: int
    timestamp: int
    phase: str
    spacing: float
    frames: np.ndarray  # [T, H, W] float32
    mask: np.ndarray  # [H, W] uint8, labels of the centre frame

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        self.mask = np.ascontiguousarray(validate_mask(self.mask), dtype=np.uint8)
        if self.frames.ndim != 3 or self.frames.shape[0] % 2 == 0:
            raise DataError(f"clip frames must be [T,H,W] with odd T, got {self.frames.shape}")
        if self.mask.shape != self.frames.shape[1:]:
            raise DataError(f"mask shape {self.mask.shape} != frame shape {self.frames.shape[1:]}")
        if self.phase not in PHASE_TAGS:
            raise DataError(f"unknown phase tag {self.phase!r}")
        if not self.spacing > 0:
            raise DataError(f"spacing must be positive, got {self.spacing}")

    @property
    def T(self):
        return self.frames.shape[0]

    def equals(self, other):
        return (self.subject == other.subject and self.timestamp == other.timestamp
                and self.phase == other.phase and np.float32(self.spacing) == np.float32(other.spacing)
                and np.array_equal(self.frames, other.frames) and np.array_equal(self.mask, other.mask))


def clip_indices(t0, r, n_frames, boundary="cyclic"):
    """Frame indices ``t0-r .. t0+r``; cine loops wrap by default, ``clamp`` replicates edges."""
    idx = np.arange(t0 - r, t0 + r + 1)
    if boundary == "cyclic":
        return idx % n_frames
    if boundary == "clamp":
        return np.clip(idx, 0, n_frames - 1)
    raise ConfigurationError(f"unknown clip boundary mode {boundary!r}")


def make_clip(cine, t0, r, boundary="cyclic"):
    """Stack the ``2r+1`` frames around ``t0`` from a ``[F, H, W]`` cine loop."""
    cine = np.asarray(cine)
    return cine[clip_indices(t0, r, cine.shape[0], boundary)]


def resize_clip(clip, size):
    """Resize frames bilinearly and the mask by nearest neighbour to ``size x size``."""
    T, H, W = clip.frames.shape
    if (H, W) == (size, size):
        return clip
    zy, zx = size / H, size / W
    frames = np.stack([ndimage.zoom(f, (zy, zx), order=1, mode="nearest", grid_mode=True) for f in clip.frames])
    mask = ndimage.zoom(clip.mask, (zy, zx), order=0, mode="nearest", grid_mode=True)
    spacing = clip.spacing * H / size
    return Clip(clip.subject, clip.timestamp, clip.phase, spacing, frames, mask)


def subjects_of(clips):
    return sorted({c.subject for c in clips})
