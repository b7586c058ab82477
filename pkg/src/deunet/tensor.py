"""Dense tensor primitives with hand-derived backward passes.

Tensors are plain ``numpy.ndarray`` objects. Spatial ops accept either a
single sample ``[C, H, W]`` or a batch ``[B, C, H, W]`` and return the same
rank they were given. Every differentiable op comes as a pair::

    y, cache = op_forward(...)
    grads = op_backward(dy, cache)

plus a convenience ``op(...)`` returning only ``y``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, GradientCheckError


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


def _to_batch(x, rank=4):
    x = np.asarray(x)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise DimensionError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return x, False


def _from_batch(y, squeezed):
    return y[0] if squeezed else y


# ---------------------------------------------------------------- conv2d

def conv2d_forward(x, weight, bias=None, stride=1, padding=0):
    """Zero-padded cross-correlation (no kernel flip)."""
    x, squeezed = _to_batch(x)
    weight = np.asarray(weight)
    B, C, H, W = x.shape
    Cout, Cin, S, S2 = weight.shape
    if Cin != C:
        raise DimensionError(f"input has {C} channels but weight expects {Cin}")
    if S != S2:
        raise DimensionError("only square kernels are supported")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < S or Wp < S:
        raise DimensionError(f"kernel {S} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - S) // stride + 1
    Wo = (Wp - S) // stride + 1

    if padding:
        xp = np.zeros((B, C, Hp, Wp), dtype=x.dtype)
        xp[:, :, padding:padding + H, padding:padding + W] = x
    else:
        xp = x
    if S == 1 and stride == 1:
        cols = xp.reshape(B, C, Ho * Wo)
    else:
        cols = np.empty((B, C, S, S, Ho, Wo), dtype=np.result_type(x, weight))
        for ky in range(S):
            for kx in range(S):
                cols[:, :, ky, kx] = xp[:, :, ky:ky + stride * (Ho - 1) + 1:stride,
                                        kx:kx + stride * (Wo - 1) + 1:stride]
        cols = cols.reshape(B, C * S * S, Ho * Wo)
    w2 = weight.reshape(Cout, C * S * S)
    y = np.matmul(w2, cols)
    if bias is not None:
        y += np.asarray(bias).reshape(1, Cout, 1)
    y = y.reshape(B, Cout, Ho, Wo)
    cache = (cols, weight, x.shape, stride, padding, bias is not None, squeezed)
    return _from_batch(y, squeezed), cache


def conv2d_backward(dy, cache):
    """Returns ``(dx, dweight, dbias)``; ``dbias`` is None when no bias was used."""
    cols, weight, xshape, stride, padding, has_bias, squeezed = cache
    dy, _ = _to_batch(dy)
    B, C, H, W = xshape
    Cout, _, S, _ = weight.shape
    Ho, Wo = dy.shape[2:]
    dy2 = dy.reshape(B, Cout, Ho * Wo)
    dw = np.tensordot(dy2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
    db = dy2.sum(axis=(0, 2)) if has_bias else None
    dcols = np.matmul(weight.reshape(Cout, -1).T, dy2)

    Hp, Wp = H + 2 * padding, W + 2 * padding
    if S == 1 and stride == 1:
        dxp = dcols.reshape(B, C, Hp, Wp)
    else:
        dcols = dcols.reshape(B, C, S, S, Ho, Wo)
        dxp = np.zeros((B, C, Hp, Wp), dtype=dcols.dtype)
        for ky in range(S):
            for kx in range(S):
                dxp[:, :, ky:ky + stride * (Ho - 1) + 1:stride,
                    kx:kx + stride * (Wo - 1) + 1:stride] += dcols[:, :, ky, kx]
    dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
    return _from_batch(dx, squeezed), dw, db


def conv2d(x, weight, bias=None, stride=1, padding=0):
    return conv2d_forward(x, weight, bias, stride, padding)[0]


# ---------------------------------------------------------------- maxpool

def maxpool2d_forward(x, k):
    """Non-overlapping k x k max pooling.

    The cache holds the flat in-window argmax per output cell; ties go to the
    first element in row-major window order.
    """
    x, squeezed = _to_batch(x)
    B, C, H, W = x.shape
    if k < 1 or H % k or W % k:
        raise DimensionError(f"spatial size {H}x{W} not divisible by pool size {k}")
    win = x.reshape(B, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // k, W // k, k * k)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return _from_batch(y, squeezed), (idx, x.shape, k, squeezed)


def maxpool2d_backward(dy, cache):
    idx, xshape, k, squeezed = cache
    dy, _ = _to_batch(dy)
    B, C, H, W = xshape
    dwin = np.zeros((B, C, H // k, W // k, k * k), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    dx = dwin.reshape(B, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(xshape)
    return _from_batch(dx, squeezed)


def maxpool2d(x, k):
    y, (idx, _, _, squeezed) = maxpool2d_forward(x, k)
    return y, _from_batch(idx, squeezed)


# ---------------------------------------------------------------- deconv2d

def deconv2d_forward(x, weight, bias=None, stride=2):
    """Transposed convolution for the non-overlapping case ``stride == k``.

    ``weight`` has layout ``[Cin, Cout, k, k]``.
    """
    x, squeezed = _to_batch(x)
    weight = np.asarray(weight)
    Cin, Cout, k, k2 = weight.shape
    if k != k2 or stride != k:
        raise ConfigurationError(f"deconv2d supports only stride == kernel size (got stride={stride}, k={k})")
    B, C, H, W = x.shape
    if C != Cin:
        raise DimensionError(f"input has {C} channels but weight expects {Cin}")
    y = np.tensordot(x, weight, axes=([1], [0]))  # [B, H, W, Cout, k, k]
    y = y.transpose(0, 3, 1, 4, 2, 5).reshape(B, Cout, H * k, W * k)
    if bias is not None:
        y += np.asarray(bias).reshape(1, Cout, 1, 1)
    return _from_batch(y, squeezed), (x, weight, bias is not None, squeezed)


def deconv2d_backward(dy, cache):
    x, weight, has_bias, squeezed = cache
    dy, _ = _to_batch(dy)
    Cin, Cout, k, _ = weight.shape
    B, _, H, W = x.shape
    dyr = dy.reshape(B, Cout, H, k, W, k)
    dx = np.einsum("bohawc,ioac->bihw", dyr, weight, optimize=True)
    dw = np.einsum("bihw,bohawc->ioac", x, dyr, optimize=True)
    db = dy.sum(axis=(0, 2, 3)) if has_bias else None
    return _from_batch(dx, squeezed), dw, db


def deconv2d(x, weight, bias=None, stride=2):
    return deconv2d_forward(x, weight, bias, stride)[0]


# ---------------------------------------------------------------- matmul / softmax / relu

def matmul_forward(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b), (a, b)


def matmul_backward(dy, cache):
    a, b = cache
    return np.matmul(dy, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), dy)


def matmul(a, b):
    return matmul_forward(a, b)[0]


def softmax_rows_forward(x):
    """Softmax along the last axis, max-subtracted."""
    x = np.asarray(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def softmax_rows_backward(dy, cache):
    y = cache
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def softmax_rows(x):
    return softmax_rows_forward(x)[0]


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, cache):
    return dy * cache


def relu(x):
    return relu_forward(x)[0]


# ---------------------------------------------------------------- gradient checking

def _first_bad(a):
    return tuple(int(k) for k in np.argwhere(~np.isfinite(a))[0])


def check_gradient(f, inputs, eps=1e-5, *, seed=0, max_components=None, wrt=None, refine_kinks=False):
    """Compare an analytic backward pass against central finite differences.

    ``f(*inputs)`` must return ``(output, backward)`` where ``backward(dout)``
    returns one gradient per input (None for inputs without one). The scalar
    probe is ``sum(output * R)`` for a fixed random ``R``. ``max_components``
    caps the number of randomly chosen entries checked per input; ``wrt``
    restricts checking to the given input indices.

    Returns the max relative error, using ``max(|analytic|, |numeric|, 1e-8)``
    as denominator.

    With ``refine_kinks`` a component whose two one-sided slopes disagree by
    more than 1% (a ReLU, pooling or lattice kink inside the step) is
    re-probed at ``eps/10`` and ``eps/100`` (not below 1e-7), and the most
    self-consistent step is used. The choice never looks at the analytic
    value, so a wrong backward pass still shows up.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigurationError(f"eps={eps} outside [1e-7, 1e-4]")
    rng = np.random.default_rng(seed)
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out, backward = f(*inputs)
    out = np.array(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise GradientCheckError(f"non-finite output at component {_first_bad(out)}")
    probe = rng.standard_normal(out.shape)
    analytic = backward(probe)
    if not isinstance(analytic, (tuple, list)):
        analytic = (analytic,)
    indices = range(len(inputs)) if wrt is None else wrt

    def output(args):
        return np.asarray(f(*args)[0], dtype=np.float64)

    def slopes(i, c, h):
        """One-sided slopes ``(right, left)`` of the probe along component ``c`` of input ``i``."""
        args = list(inputs)
        x = inputs[i].copy()
        flat = x.reshape(-1)
        orig = flat[c]
        args[i] = x
        flat[c] = orig + h
        op = output(args)
        flat[c] = orig - h
        om = output(args)
        # difference outputs before projecting: far less cancellation than differencing two sums
        return float(np.sum((op - out) * probe)) / h, float(np.sum((out - om) * probe)) / h

    def inconsistency(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-8)

    worst = 0.0
    for i in indices:
        g = analytic[i]
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != inputs[i].shape:
            raise GradientCheckError(f"input {i}: gradient shape {g.shape} != input shape {inputs[i].shape}")
        if not np.all(np.isfinite(g)):
            raise GradientCheckError(f"non-finite analytic gradient at input {i}, component {_first_bad(g)}")
        size = inputs[i].size
        comps = np.arange(size)
        if max_components is not None and size > max_components:
            comps = rng.choice(size, max_components, replace=False)
        for c in comps:
            a, b = slopes(i, c, eps)
            if refine_kinks and inconsistency(a, b) > 1e-2:
                tries = [(a, b)] + [slopes(i, c, h) for h in (eps / 10, eps / 100) if h >= 1e-7]
                a, b = min(tries, key=lambda ab: inconsistency(*ab))
            num = (a + b) / 2
            ana = g.reshape(-1)[c]
            if not (np.isfinite(num) and np.isfinite(ana)):
                pos = tuple(int(k) for k in np.unravel_index(c, inputs[i].shape))
                raise GradientCheckError(f"non-finite gradient at input {i}, component {pos}: analytic={ana}, numeric={num}")
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
