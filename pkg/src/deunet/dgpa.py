"""Deformable global position attention and the segmentation U-Net hosting it."""
from dataclasses import dataclass

import numpy as np

from . import tensor
from .layers import Conv2d, DeformConv2d, ReLU, _zeros
from .params import ModelParams
from .unet import UNet

N_CLASSES = 4  # background, RV, MYO, LV


def channel_attention_forward(Bm, Cm, Dm):
    """Channel affinity ``P[j, i] = softmax_i(B_i . C_j)`` applied to ``D``.

    Inputs are ``[..., N, M]``; returns ``(P @ D, cache)`` with ``P`` in the cache.
    """
    logits, mm1 = tensor.matmul_forward(Cm, np.swapaxes(Bm, -1, -2))
    P, sm = tensor.softmax_rows_forward(logits)
    A, mm2 = tensor.matmul_forward(P, Dm)
    return A, (mm1, sm, mm2)


def channel_attention_backward(dA, cache):
    """Returns ``(dB, dC, dD)``."""
    mm1, sm, mm2 = cache
    dP, dD = tensor.matmul_backward(dA, mm2)
    dlogits = tensor.softmax_rows_backward(dP, sm)
    dC, dBt = tensor.matmul_backward(dlogits, mm1)
    return np.swapaxes(dBt, -1, -2), dC, dD


@dataclass
class AttentionState:
    """Intermediates of the last forward pass, batched along axis 0."""
    O: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    P: np.ndarray
    alpha: float


class DGPABlock:
    """``Z = alpha * (P @ D) + O`` with ``O`` a deformable 3x3 conv of the input.

    B, C, D are 1x1 projections of ``O`` unless ``literal_reshape`` is set, in
    which case all three are ``O`` itself reshaped to ``[N, H*W]``.
    """

    def __init__(self, params, name, channels, *, S=3, literal_reshape=False, seed=0, dtype=np.float64):
        self.deform = DeformConv2d(params, f"{name}.deform", channels, channels, S, seed=seed, dtype=dtype)
        self.literal_reshape = literal_reshape
        if not literal_reshape:
            self.proj = [Conv2d(params, f"{name}.{k}", channels, channels, 1, seed=seed, dtype=dtype)
                         for k in ("query_b", "key_c", "value_d")]
        self.alpha = _zeros(params, f"{name}.alpha", (), dtype)
        self.state = None

    def forward(self, x):
        O = self.deform.forward(x)
        shape = O.shape
        flat = shape[:-2] + (shape[-2] * shape[-1],)
        if self.literal_reshape:
            Bm = Cm = Dm = O.reshape(flat)
        else:
            Bm, Cm, Dm = (p.forward(O).reshape(flat) for p in self.proj)
        A, self._attn = channel_attention_forward(Bm, Cm, Dm)
        alpha = self.alpha.value
        self._A = A
        self.state = AttentionState(O, Bm, Cm, Dm, self._attn[1], float(alpha))
        return (alpha * A).reshape(shape) + O

    def backward(self, dZ):
        shape = dZ.shape
        dZf = dZ.reshape(self._A.shape)
        self.alpha.grad += np.sum(dZf * self._A)
        dB, dC, dD = channel_attention_backward(self.alpha.value * dZf, self._attn)
        if self.literal_reshape:
            dO = dZ + (dB + dC + dD).reshape(shape)
        else:
            dO = dZ.copy()
            for p, g in zip(self.proj, (dB, dC, dD)):
                dO += p.backward(g.reshape(shape))
        return self.deform.backward(dO)


class SegBottleneck:
    """3x3 conv + ReLU, then a DGPA block or (ablation) a plain 3x3 conv + ReLU."""

    def __init__(self, params, name, cin, cout, *, use_dgpa=True, S=3, literal_reshape=False, seed=0,
                 dtype=np.float64):
        self.layers = [Conv2d(params, f"{name}.conv", cin, cout, 3, seed=seed, dtype=dtype), ReLU()]
        if use_dgpa:
            self.dgpa = DGPABlock(params, f"{name}.dgpa", cout, S=S, literal_reshape=literal_reshape,
                                  seed=seed, dtype=dtype)
            self.layers.append(self.dgpa)
        else:
            self.dgpa = None
            self.layers += [Conv2d(params, f"{name}.plain", cout, cout, 3, seed=seed, dtype=dtype), ReLU()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class DGPAUNet(UNet):
    """Deformable-encoder U-Net with a DGPA bottleneck producing 4-class logits."""

    def __init__(self, params, cin, *, depth=2, base_channels=16, S=3, use_dgpa=True, literal_reshape=False,
                 seed=0, dtype=np.float64, name="seg_unet"):
        bottleneck_in = base_channels * 2 ** (depth - 1) if depth else cin
        bottleneck = SegBottleneck(params, f"{name}.bottleneck", bottleneck_in, base_channels * 2 ** depth,
                                   use_dgpa=use_dgpa, S=S, literal_reshape=literal_reshape,
                                   seed=seed, dtype=dtype)
        super().__init__(params, name, cin, N_CLASSES, depth=depth, base=base_channels,
                         bottleneck=bottleneck, seed=seed, dtype=dtype, deformable_encoder=True, S=S)


def _dtype_of(params):
    return next(iter(params.values())).value.dtype if len(params) else np.float64


def dgpa_block(I, params=None, *, name="dgpa", S=3, literal_reshape=False, seed=0):
    """Functional form of :class:`DGPABlock` over ``params`` (created if absent)."""
    params = ModelParams() if params is None else params
    I = np.asarray(I)
    block = DGPABlock(params, name, I.shape[-3], S=S, literal_reshape=literal_reshape, seed=seed,
                      dtype=_dtype_of(params))
    return block.forward(I)


def dgpa_unet_forward(fused, params=None, *, depth=2, base_channels=16, S=3, seed=0):
    params = ModelParams() if params is None else params
    fused = np.asarray(fused)
    net = DGPAUNet(params, fused.shape[-3], depth=depth, base_channels=base_channels, S=S, seed=seed,
                   dtype=_dtype_of(params))
    return net.forward(fused)
