"""Binary clip archive.

Layout, little-endian throughout::

    b"DSEG0001"
    u32 n_subjects, u32 n_clips
    per clip:
        u32 subject, u32 timestamp, u8 phase (0 other, 1 ED, 2 ES), f32 spacing,
        u32 T, u32 H, u32 W, f32[T*H*W] frames, u8[H*W] mask

The declared subject count must equal the number of distinct subject ids and
the payload must end exactly at the last clip.
"""
import math
import struct

import numpy as np

from .data import PHASE_TAGS, Clip, resize_clip
from .errors import DataError, ParseError
from .params import atomic_write_bytes

MAGIC = b"DSEG0001"
_CLIP_HEAD = struct.Struct("<IIBfIII")


def encode_archive(clips):
    out = bytearray(MAGIC)
    out += struct.pack("<II", len({c.subject for c in clips}), len(clips))
    for c in clips:
        T, H, W = c.frames.shape
        out += _CLIP_HEAD.pack(c.subject, c.timestamp, PHASE_TAGS.index(c.phase), c.spacing, T, H, W)
        out += c.frames.astype("<f4").tobytes()
        out += c.mask.astype(np.uint8).tobytes()
    return bytes(out)


def decode_archive(buf):
    """Parse archive bytes into a list of clips, or raise ParseError naming the offending byte offset."""
    buf = memoryview(buf).tobytes() if not isinstance(buf, bytes) else buf
    if len(buf) < 16:
        raise ParseError("file too short for archive header", len(buf))
    if buf[:8] != MAGIC:
        raise ParseError("bad archive magic", 0)
    n_subjects, n_clips = struct.unpack_from("<II", buf, 8)
    pos = 16
    clips = []
    for k in range(n_clips):
        if pos + _CLIP_HEAD.size > len(buf):
            raise ParseError(f"truncated header of clip {k}", pos)
        subject, ts, phase, spacing, T, H, W = _CLIP_HEAD.unpack_from(buf, pos)
        head = pos
        if phase >= len(PHASE_TAGS):
            raise ParseError(f"clip {k}: unknown phase tag {phase}", head + 8)
        if not (math.isfinite(spacing) and spacing > 0):
            raise ParseError(f"clip {k}: invalid spacing {spacing}", head + 9)
        if T % 2 == 0 or H == 0 or W == 0:
            raise ParseError(f"clip {k}: invalid dimensions T={T} H={H} W={W}", head + 13)
        pos += _CLIP_HEAD.size
        n = T * H * W
        if pos + 4 * n + H * W > len(buf):
            raise ParseError(f"clip {k}: payload of {4 * n + H * W} bytes runs past end of file", pos)
        frames = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(T, H, W)
        if not np.all(np.isfinite(frames)):
            raise ParseError(f"clip {k}: non-finite frame values", pos)
        pos += 4 * n
        mask = np.frombuffer(buf, dtype=np.uint8, count=H * W, offset=pos).reshape(H, W)
        if mask.max() > 3:
            bad = int(np.argmax(mask.ravel() > 3))
            raise ParseError(f"clip {k}: mask label {int(mask.ravel()[bad])} outside 0..3", pos + bad)
        pos += H * W
        try:
            clips.append(Clip(subject, ts, PHASE_TAGS[phase], float(spacing), frames.copy(), mask.copy()))
        except DataError as e:
            raise ParseError(f"clip {k}: {e}", head) from None
    if pos != len(buf):
        raise ParseError(f"{len(buf) - pos} trailing bytes after {n_clips} clips", pos)
    if len({c.subject for c in clips}) != n_subjects:
        raise ParseError(f"header declares {n_subjects} subjects, payload has {len({c.subject for c in clips})}", 8)
    return clips


def save_archive(path, clips):
    atomic_write_bytes(path, encode_archive(clips))


def load_archive(path, size=None):
    """Read and validate an archive; optionally resize every clip to ``size x size``."""
    with open(path, "rb") as fh:
        clips = decode_archive(fh.read())
    if size:
        clips = [resize_clip(c, size) for c in clips]
    return clips
