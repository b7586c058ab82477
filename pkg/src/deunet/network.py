"""Full network: offset net -> temporal deformable aggregation -> DGPA U-Net."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import deform, tensor
from .dgpa import N_CLASSES, DGPAUNet
from .errors import ConfigurationError, StateError
from .layers import _he
from .offset_net import OffsetNet, OffsetNetConfig
from .params import ModelParams


class NetVariant(str, Enum):
    full = "full"
    no_tdam = "no_tdam"  # early fusion instead of TDAM
    no_dgpa = "no_dgpa"  # plain conv bottleneck instead of DGPA

    @property
    def has_tdam(self):
        return self is not NetVariant.no_tdam

    @property
    def has_dgpa(self):
        return self is not NetVariant.no_dgpa


@dataclass(frozen=True)
class NetConfig:
    r: int = 1
    S: int = 3
    tdam_channels: int = 8
    offset_depth: int = 2
    offset_base_channels: int = 16
    depth: int = 2
    base_channels: int = 16
    literal_reshape: bool = False

    def __post_init__(self):
        if self.r < 0:
            raise ConfigurationError(f"temporal radius must be >= 0, got {self.r}")
        if self.S < 1 or self.S % 2 == 0:
            raise ConfigurationError(f"kernel size S must be odd, got {self.S}")
        for f in ("tdam_channels", "offset_base_channels", "base_channels"):
            if getattr(self, f) < 1:
                raise ConfigurationError(f"{f} must be positive")

    @property
    def T(self):
        return 2 * self.r + 1

    @property
    def size_divisor(self):
        return 2 ** max(self.depth, self.offset_depth)

    def to_meta(self):
        return {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_meta(cls, meta):
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in meta:
                v = meta[f.name]
                kwargs[f.name] = v in ("True", "true", "1") if f.type in (bool, "bool") else int(v)
        return cls(**kwargs)


class DeUNet:
    """The assembled network with hand-chained backward.

    ``forward`` takes a clip ``[T, H, W]`` or a batch ``[B, T, H, W]`` and
    returns 4-class logits of matching rank.
    """

    def __init__(self, cfg=None, variant=NetVariant.full, *, seed=0, dtype=np.float64, params=None):
        self.cfg = cfg = cfg or NetConfig()
        self.variant = NetVariant(variant)
        self.dtype = np.dtype(dtype)
        self.params = ModelParams() if params is None else params
        if self.variant.has_tdam:
            self.offset_net = OffsetNet(self.params, OffsetNetConfig(cfg.offset_depth, cfg.offset_base_channels,
                                                                     cfg.T, cfg.S), seed=seed, dtype=dtype)
        else:
            self.offset_net = None
        self.tdam_weight = _he(self.params, "tdam.weight", (cfg.tdam_channels, cfg.T, cfg.S, cfg.S),
                               cfg.T * cfg.S * cfg.S, seed, dtype)
        self.seg_unet = DGPAUNet(self.params, cfg.tdam_channels, depth=cfg.depth, base_channels=cfg.base_channels,
                                 S=cfg.S, use_dgpa=self.variant.has_dgpa, literal_reshape=cfg.literal_reshape,
                                 seed=seed, dtype=dtype)
        self._cache = None

    @classmethod
    def from_state(cls, state, cfg, variant, dtype=np.float32):
        """Rebuild a network from a checkpoint state dict; names and shapes must match."""
        net = cls(cfg, variant, dtype=dtype)
        net.params.load_state(state)
        return net

    def forward(self, clip):
        clip = np.asarray(clip, dtype=self.dtype)
        if clip.ndim not in (3, 4):
            raise ConfigurationError(f"clip must be [T,H,W] or [B,T,H,W], got {clip.shape}")
        squeezed = clip.ndim == 3
        if squeezed:
            clip = clip[None]
        if clip.shape[1] != self.cfg.T:
            raise ConfigurationError(f"clip has {clip.shape[1]} frames, network built for T={self.cfg.T}")
        H, W = clip.shape[2:]
        d = self.cfg.size_divisor
        if H % d or W % d:
            raise ConfigurationError(f"spatial size {H}x{W} not divisible by {d}")
        w = self.tdam_weight.value
        if self.variant.has_tdam:
            offsets = self.offset_net.forward(clip)
            fused, cache = deform.temporal_deform_agg_conv_forward(clip, offsets, w)
        else:
            fused, cache = tensor.conv2d_forward(clip, w, None, 1, (self.cfg.S - 1) // 2)
        logits = self.seg_unet.forward(fused)
        self._cache = cache
        return logits[0] if squeezed else logits

    __call__ = forward

    def backward(self, dlogits):
        """Accumulate parameter gradients from ``dL/dlogits`` of the last forward."""
        if self._cache is None:
            raise StateError("backward() called before forward()")
        dlogits = np.asarray(dlogits, dtype=self.dtype)
        if dlogits.ndim == 3:
            dlogits = dlogits[None]
        dfused = self.seg_unet.backward(dlogits)
        if self.variant.has_tdam:
            _, doff, dw = deform.temporal_deform_agg_conv_backward(dfused, self._cache)
            self.offset_net.backward(doff)
        else:
            _, dw, _ = tensor.conv2d_backward(dfused, self._cache)
        self.tdam_weight.grad += dw
        self._cache = None
        self.params.grads_ready = True

    def meta(self):
        m = self.cfg.to_meta()
        m["variant"] = self.variant.value
        return m


def predict_mask(logits):
    """Per-pixel argmax over the class axis; ties go to the lower class index."""
    logits = np.asarray(logits)
    if logits.shape[-3] != N_CLASSES:
        raise ConfigurationError(f"expected {N_CLASSES} class channels, got {logits.shape[-3]}")
    return np.argmax(logits, axis=-3).astype(np.uint8)
