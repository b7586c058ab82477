"""Named parameter collections and the binary checkpoint format.

Checkpoint layout (all integers u32 little-endian)::

    b"DEUNET01"
    repeated per parameter, in ModelParams order:
        name_len, name (UTF-8), rank, dims..., float32 LE data
    0                      # name_len of zero ends the parameter section
    meta_len, metadata     # UTF-8 "key=value" lines, incl. param_crc32
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from collections.abc import Mapping

import numpy as np

from .errors import ConfigurationError, ParseError, StateError
from .tensor import Parameter

MAGIC = b"DEUNET01"


def param_rng(seed, name):
    """Per-parameter generator so shared layers initialize identically across variants."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class ModelParams(Mapping):
    """Ordered ``name -> Parameter`` map with paired gradient buffers."""

    def __init__(self):
        self._items = {}
        self.grads_ready = False

    def add(self, param):
        if param.name in self._items:
            raise ConfigurationError(f"duplicate parameter name {param.name!r}")
        self._items[param.name] = param
        return param

    def __getitem__(self, name):
        return self._items[name]

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def zero_grad(self):
        for p in self._items.values():
            p.zero_grad()
        self.grads_ready = False

    def state(self):
        return {n: p.value.copy() for n, p in self._items.items()}

    def load_state(self, state):
        """Copy values in by name; names and shapes must match exactly."""
        missing = set(self._items) - set(state)
        extra = set(state) - set(self._items)
        if missing or extra:
            raise ConfigurationError(
                f"parameter set mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for n, p in self._items.items():
            v = np.asarray(state[n])
            if v.shape != p.value.shape:
                raise ConfigurationError(f"{n}: checkpoint shape {v.shape} != model shape {p.value.shape}")
            p.value = v.astype(p.value.dtype, copy=True)

    def num_values(self):
        return sum(p.value.size for p in self._items.values())


def _encode_params(state):
    out = bytearray()
    for name, value in state.items():
        raw = name.encode("utf-8")
        value = np.asarray(value)
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", value.ndim)
        out += struct.pack(f"<{value.ndim}I", *value.shape)
        out += np.ascontiguousarray(value, dtype="<f4").tobytes()
    return bytes(out)


def encode_checkpoint(state, meta=None):
    body = _encode_params(state)
    meta = dict(meta or {})
    meta["param_crc32"] = f"{zlib.crc32(body):08x}"
    text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    return MAGIC + body + struct.pack("<I", 0) + struct.pack("<I", len(text)) + text


def decode_checkpoint(buf):
    """Parse checkpoint bytes into ``(state, meta)``; raises ParseError on any defect."""
    if buf[:8] != MAGIC:
        raise ParseError("bad checkpoint magic", 0)
    pos = 8

    def u32(count=1):
        nonlocal pos
        end = pos + 4 * count
        if end > len(buf):
            raise ParseError("truncated checkpoint", pos)
        vals = struct.unpack_from(f"<{count}I", buf, pos)
        pos = end
        return vals

    state = {}
    while True:
        start = pos
        (n,) = u32()
        if n == 0:
            break
        if pos + n > len(buf):
            raise ParseError("truncated parameter name", pos)
        try:
            name = buf[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("parameter name is not UTF-8", pos) from None
        pos += n
        if name in state:
            raise ParseError(f"duplicate parameter {name!r}", start)
        (rank,) = u32()
        if rank > 8:
            raise ParseError(f"implausible rank {rank}", pos - 4)
        dims = u32(rank) if rank else ()
        count = int(np.prod(dims, dtype=np.int64))
        if pos + 4 * count > len(buf):
            raise ParseError(f"truncated data for {name!r}", pos)
        state[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
        pos += 4 * count
    body_end = pos - 4
    (mlen,) = u32()
    if pos + mlen != len(buf):
        raise ParseError("metadata length does not match file size", pos - 4)
    try:
        text = buf[pos:].decode("utf-8")
    except UnicodeDecodeError:
        raise ParseError("metadata is not UTF-8", pos) from None
    meta = {}
    for line in text.splitlines():
        if "=" not in line:
            raise ParseError(f"bad metadata line {line!r}", pos)
        k, v = line.split("=", 1)
        meta[k] = v
    crc = meta.pop("param_crc32", None)
    if crc != f"{zlib.crc32(buf[8:body_end]):08x}":
        raise ParseError("parameter checksum mismatch", 8)
    return state, meta


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params, meta=None):
    state = params.state() if isinstance(params, ModelParams) else params
    atomic_write_bytes(path, encode_checkpoint(state, meta))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def require_grads(params):
    if not params.grads_ready:
        raise StateError("no gradients available: run backward() before stepping the optimizer")


__all__ = ["ModelParams", "Parameter", "param_rng", "save_checkpoint", "load_checkpoint",
           "encode_checkpoint", "decode_checkpoint", "atomic_write_bytes", "MAGIC"]
