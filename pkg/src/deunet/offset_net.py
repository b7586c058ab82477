"""U-Net that jointly predicts every TDAM sampling offset from the raw clip."""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .layers import ConvBlock
from .params import ModelParams
from .unet import UNet


@dataclass(frozen=True)
class OffsetNetConfig:
    depth: int = 2
    base_channels: int = 16
    T: int = 3
    S: int = 3

    def __post_init__(self):
        if self.T < 1 or self.T % 2 == 0:
            raise ConfigurationError(f"clip length T must be odd and positive, got {self.T}")
        if self.S < 1 or self.S % 2 == 0:
            raise ConfigurationError(f"kernel size S must be odd, got {self.S}")

    @property
    def out_channels(self):
        return self.T * 2 * self.S * self.S


class OffsetNet(UNet):
    """Maps ``[T, H, W]`` frames to a ``[T*2*S*S, H, W]`` offset field.

    The 1x1 head starts at zero, so a fresh network predicts zero offsets and
    TDAM starts out as plain early fusion.
    """

    def __init__(self, params, cfg, *, seed=0, dtype=np.float64, name="offset_net"):
        c = cfg.base_channels
        bottleneck_in = c * 2 ** (cfg.depth - 1) if cfg.depth else cfg.T
        bottleneck = ConvBlock(params, f"{name}.bottleneck", bottleneck_in, c * 2 ** cfg.depth,
                               seed=seed, dtype=dtype)
        super().__init__(params, name, cfg.T, cfg.out_channels, depth=cfg.depth, base=c,
                         bottleneck=bottleneck, seed=seed, dtype=dtype, zero_head=True)
        self.cfg = cfg

    def forward(self, clip):
        if clip.shape[-3] != self.cfg.T:
            raise ConfigurationError(f"clip has {clip.shape[-3]} frames, offset net expects {self.cfg.T}")
        return super().forward(clip)


def predict_offsets(clip, params=None, cfg=None, *, seed=0):
    """Functional form: build (or bind to) an offset net over ``params`` and run it."""
    cfg = cfg or OffsetNetConfig(T=np.shape(clip)[-3])
    if params is None:
        params = ModelParams()
    dtype = next(iter(params.values())).value.dtype if len(params) else np.float64
    return OffsetNet(params, cfg, seed=seed, dtype=dtype).forward(np.asarray(clip, dtype=dtype))
