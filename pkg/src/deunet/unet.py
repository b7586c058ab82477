"""U-Net skeleton shared by the offset predictor and the segmentation network."""
import numpy as np

from .errors import ConfigurationError
from .layers import Conv2d, ConvBlock, Deconv2d, MaxPool2d


class UNet:
    """Encoder (conv blocks + 2x maxpool), bottleneck, decoder (2x deconv + skip concat), 1x1 head.

    ``bottleneck`` is any object with ``forward``/``backward`` mapping
    ``base * 2**(depth-1)`` channels (``cin`` when depth is 0) to
    ``base * 2**depth``.
    """

    def __init__(self, params, name, cin, cout, *, depth, base, bottleneck, seed, dtype,
                 deformable_encoder=False, zero_head=False, S=3):
        if depth < 0 or base < 1:
            raise ConfigurationError(f"invalid U-Net depth={depth} base={base}")
        self.depth = depth
        self.encoders, self.pools, self.ups, self.decoders = [], [], [], []
        ch = cin
        for level in range(depth):
            out = base * 2 ** level
            self.encoders.append(ConvBlock(params, f"{name}.enc{level}", ch, out, seed=seed, dtype=dtype,
                                           deformable=deformable_encoder, S=S))
            self.pools.append(MaxPool2d(2))
            ch = out
        self.bottleneck = bottleneck
        for level in reversed(range(depth)):
            out = base * 2 ** level
            self.ups.append(Deconv2d(params, f"{name}.up{level}", 2 * out, out, 2, seed=seed, dtype=dtype))
            self.decoders.append(ConvBlock(params, f"{name}.dec{level}", 2 * out, out, seed=seed, dtype=dtype))
        self.head = Conv2d(params, f"{name}.head", base, cout, 1, seed=seed, dtype=dtype, zero_init=zero_head)

    def forward(self, x):
        H, W = x.shape[-2:]
        if H % 2 ** self.depth or W % 2 ** self.depth:
            raise ConfigurationError(f"spatial size {H}x{W} not divisible by 2^{self.depth}")
        skips = []
        for enc, pool in zip(self.encoders, self.pools):
            x = enc.forward(x)
            skips.append(x)
            x = pool.forward(x)
        x = self.bottleneck.forward(x)
        self._split = []
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            u = up.forward(x)
            self._split.append(u.shape[-3])
            x = dec.forward(np.concatenate([u, skip], axis=-3))
        return self.head.forward(x)

    def backward(self, dy):
        dy = self.head.backward(dy)
        dskips = []
        for up, dec, n in zip(reversed(self.ups), reversed(self.decoders), reversed(self._split)):
            dcat = dec.backward(dy)
            dskips.append(dcat[..., n:, :, :])
            dy = up.backward(dcat[..., :n, :, :])
        dy = self.bottleneck.backward(dy)
        # dskips is ordered shallow -> deep after the reversed walk above
        for enc, pool, dskip in zip(reversed(self.encoders), reversed(self.pools), reversed(dskips)):
            dy = enc.backward(pool.backward(dy) + dskip)
        return dy
