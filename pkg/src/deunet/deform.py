"""Bilinear sampling and deformable convolutions.

Offset channel layout is ``[group][s][dy, dx]`` with ``s`` the row-major
kernel tap index, so an offset tensor has ``groups * 2 * S * S`` channels.
For the temporal aggregation conv a group is one frame of the clip; for the
single-frame deformable conv there is one group shared by every input
channel.

Samples falling outside the image read zero. At exact integer coordinates
the bilinear derivative uses the right-hand branch (``floor`` puts the point
on the lower corner).
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import _from_batch, _to_batch

_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def bilinear_sample(feature, y, x):
    """Bilinear interpolation of a 2-D map at a real coordinate, zero outside."""
    feature = np.asarray(feature)
    H, W = feature.shape
    y0, x0 = math.floor(y), math.floor(x)
    ly, lx = y - y0, x - x0
    out = 0.0
    for dy, dx in _CORNERS:
        yy, xx = y0 + dy, x0 + dx
        if 0 <= yy < H and 0 <= xx < W:
            wy = ly if dy else 1.0 - ly
            wx = lx if dx else 1.0 - lx
            out += wy * wx * feature[yy, xx]
    return out


def bilinear_sample_grad(feature, y, x):
    """Gradient of :func:`bilinear_sample` as ``(dfeature, dy, dx)``."""
    feature = np.asarray(feature, dtype=np.float64)
    H, W = feature.shape
    y0, x0 = math.floor(y), math.floor(x)
    ly, lx = y - y0, x - x0
    dfeat = np.zeros_like(feature)
    v = {}
    for dy, dx in _CORNERS:
        yy, xx = y0 + dy, x0 + dx
        inside = 0 <= yy < H and 0 <= xx < W
        v[dy, dx] = feature[yy, xx] if inside else 0.0
        if inside:
            dfeat[yy, xx] = (ly if dy else 1.0 - ly) * (lx if dx else 1.0 - lx)
    gy = (1 - lx) * (v[1, 0] - v[0, 0]) + lx * (v[1, 1] - v[0, 1])
    gx = (1 - ly) * (v[0, 1] - v[0, 0]) + ly * (v[1, 1] - v[1, 0])
    return dfeat, gy, gx


def _sample_columns(x, offsets, S, groups):
    """Gather offset-shifted kernel taps: returns columns ``[B, C, S*S, H, W]``."""
    B, C, H, W = x.shape
    G, Cg, K = groups, C // groups, S * S
    pad = (S - 1) // 2
    off = offsets.reshape(B, G, K, 2, H, W)
    dt = np.result_type(x.dtype, offsets.dtype)
    taps = np.arange(K)
    ky = (taps // S - pad).astype(dt).reshape(1, 1, K, 1, 1)
    kx = (taps % S - pad).astype(dt).reshape(1, 1, K, 1, 1)
    py = np.arange(H, dtype=dt).reshape(1, 1, 1, H, 1) + ky + off[:, :, :, 0]
    px = np.arange(W, dtype=dt).reshape(1, 1, 1, 1, W) + kx + off[:, :, :, 1]
    fy, fx = np.floor(py), np.floor(px)
    ly, lx = py - fy, px - fx
    y0, x0 = fy.astype(np.intp), fx.astype(np.intp)

    xg = x.reshape(B, G, Cg, H * W)
    vals, weights, flat_idx = [], [], []
    for dy, dx in _CORNERS:
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        idx = np.where(valid, yy * W + xx, 0)
        v = np.take_along_axis(xg, idx.reshape(B, G, 1, K * H * W), axis=3)
        v = v.reshape(B, G, Cg, K, H, W) * valid[:, :, None]
        wy = ly if dy else 1.0 - ly
        wx = lx if dx else 1.0 - lx
        vals.append(v)
        weights.append((wy * wx * valid).astype(dt)[:, :, None])
        flat_idx.append(idx)
    cols = sum(w * v for w, v in zip(weights, vals))
    return cols.reshape(B, C, K, H, W), (vals, weights, flat_idx, ly, lx)


def _check_offsets(x, offsets, S, groups):
    B, C, H, W = x.shape
    if S % 2 != 1:
        raise ConfigurationError(f"deformable kernel size must be odd, got {S}")
    if offsets.ndim != 4 or offsets.shape[0] != B:
        raise DimensionError(f"offset batch/rank mismatch: {offsets.shape} vs input {x.shape}")
    if offsets.shape[1] != groups * 2 * S * S:
        raise ConfigurationError(
            f"offset field has {offsets.shape[1]} channels, expected {groups}*2*{S}^2 = {groups * 2 * S * S}")
    if offsets.shape[2:] != (H, W):
        raise DimensionError(f"offset spatial size {offsets.shape[2:]} != input spatial size {(H, W)}")


def _deform_forward(x, offsets, weight, bias, groups):
    B, C, H, W = x.shape
    Cout, Cin, S, _ = weight.shape
    _check_offsets(x, offsets, S, groups)
    cols, samp = _sample_columns(x, offsets, S, groups)
    cols2 = cols.reshape(B, C * S * S, H * W)
    y = np.matmul(weight.reshape(Cout, -1), cols2)
    if bias is not None:
        y += np.asarray(bias).reshape(1, Cout, 1)
    return y.reshape(B, Cout, H, W), (x.shape, weight, cols2, samp, groups, bias is not None)


def _deform_backward(dy, cache):
    (B, C, H, W), weight, cols2, (vals, weights, flat_idx, ly, lx), G, has_bias = cache
    Cout, _, S, _ = weight.shape
    K, Cg = S * S, C // G
    dy2 = dy.reshape(B, Cout, H * W)
    dw = np.tensordot(dy2, cols2, axes=([0, 2], [0, 2])).reshape(weight.shape)
    db = dy2.sum(axis=(0, 2)) if has_bias else None
    dcols = np.matmul(weight.reshape(Cout, -1).T, dy2).reshape(B, G, Cg, K, H, W)

    # input gradient: scatter each corner's share back with one bincount
    base = (np.arange(B * G * Cg) * (H * W)).reshape(B, G, Cg, 1, 1, 1)
    idx_all = np.concatenate([(base + i[:, :, None]).ravel() for i in flat_idx])
    w_all = np.concatenate([(dcols * w).ravel() for w in weights])
    dx = np.bincount(idx_all, weights=w_all, minlength=B * C * H * W).reshape(B, C, H, W).astype(dcols.dtype)

    v00, v01, v10, v11 = vals
    lyb, lxb = ly[:, :, None], lx[:, :, None]
    gy = (1 - lxb) * (v10 - v00) + lxb * (v11 - v01)
    gx = (1 - lyb) * (v01 - v00) + lyb * (v11 - v10)
    doff = np.stack([(dcols * gy).sum(axis=2), (dcols * gx).sum(axis=2)], axis=3)  # [B, G, K, 2, H, W]
    return dx, doff.reshape(B, G * K * 2, H, W), dw, db


def deform_conv2d_forward(x, offsets, weight, bias=None):
    """Deformable conv with one offset set per window, shared across channels.

    ``x`` is ``[Cin, H, W]`` (or batched), ``offsets`` ``[2*S*S, H, W]``,
    ``weight`` ``[Cout, Cin, S, S]``. Output keeps the input spatial size.
    """
    x, squeezed = _to_batch(x)
    offsets, _ = _to_batch(offsets)
    weight = np.asarray(weight)
    if weight.shape[1] != x.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels but weight expects {weight.shape[1]}")
    y, cache = _deform_forward(x, offsets, weight, bias, groups=1)
    return _from_batch(y, squeezed), (cache, squeezed)


def deform_conv2d_backward(dy, cache):
    """Returns ``(dx, doffsets, dweight, dbias)``."""
    cache, squeezed = cache
    dy, _ = _to_batch(dy)
    dx, doff, dw, db = _deform_backward(dy, cache)
    return _from_batch(dx, squeezed), _from_batch(doff, squeezed), dw, db


def deform_conv2d(x, offsets, weight, bias=None):
    return deform_conv2d_forward(x, offsets, weight, bias)[0]


def temporal_deform_agg_conv_forward(clip, offsets, weight):
    """Fuse a ``[T, H, W]`` clip into ``[Cout, H, W]`` with per-frame offsets.

    ``F(k) = sum_t sum_s K[t, s] * C_t(k + k_s + delta[t, k, s])``; ``offsets``
    is ``[T*2*S*S, H, W]`` and ``weight`` is ``[Cout, T, S, S]``.
    """
    clip, squeezed = _to_batch(clip)
    offsets, _ = _to_batch(offsets)
    weight = np.asarray(weight)
    T = clip.shape[1]
    if weight.shape[1] != T:
        raise ConfigurationError(f"kernel has {weight.shape[1]} frames but clip has {T}")
    S = weight.shape[2]
    if offsets.ndim == 4 and offsets.shape[1] != T * 2 * S * S:
        raise ConfigurationError(f"offset field has {offsets.shape[1]} channels, clip needs {T * 2 * S * S}")
    y, cache = _deform_forward(clip, offsets, weight, None, groups=T)
    return _from_batch(y, squeezed), (cache, squeezed)


def temporal_deform_agg_conv_backward(dy, cache):
    """Returns ``(dclip, doffsets, dweight)``."""
    cache, squeezed = cache
    dy, _ = _to_batch(dy)
    dx, doff, dw, _ = _deform_backward(dy, cache)
    return _from_batch(dx, squeezed), _from_batch(doff, squeezed), dw


def temporal_deform_agg_conv(clip, offsets, weight):
    return temporal_deform_agg_conv_forward(clip, offsets, weight)[0]
