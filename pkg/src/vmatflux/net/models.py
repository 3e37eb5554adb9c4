"""Network topologies: conv-block encoder/decoder plus U-Net baselines.

All three architectures share the same contract: a 5D tensor in, a 5D
tensor out at the same spatial shape, built from the layers in this
package so every parameter has an exact analytic gradient. The primary
model halves resolution with strided conv blocks and adds skip features
back in; the U-Nets pool and concatenate instead. The 2D baseline folds
the gantry axis into channels (depth stays 1) so each angle is denoised
independently of its neighbours.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ShapeError
from .blocks import ConvNeXtBlock, DoubleConv
from .layers import Layer, MaxPool, PointwiseConv, Sequential, TransposedFullConv

ARCHS = ("MedNeXt3D", "UNet3D", "UNet2D")
_ACTIVATIONS = ("gelu", "relu", "identity")


@dataclass(frozen=True)
class NetConfig:
    arch: str = "MedNeXt3D"
    base_channels: int = 8
    n_scales: int = 5
    blocks_per_stage: int = 1
    expansion: int = 4
    kernel: tuple[int, int, int] = (3, 3, 3)
    pad_multiple: int = 16
    in_channels: int = 1
    norm_enabled: bool = True
    activation: str = "gelu"
    check_finite: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; pick from {ARCHS}")
        if self.n_scales < 2:
            raise ValueError(f"n_scales must be at least 2, got {self.n_scales}")
        if self.expansion < 1:
            raise ValueError(f"expansion must be at least 1, got {self.expansion}")
        for name in ("base_channels", "blocks_per_stage", "pad_multiple",
                     "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if len(self.kernel) != 3 or any(k < 1 or k % 2 == 0
                                        for k in self.kernel):
            raise ValueError(f"kernel must be three odd sizes, got {self.kernel}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; "
                             f"pick from {_ACTIVATIONS}")
        if self.arch == "UNet2D" and self.kernel[0] != 1:
            raise ValueError("UNet2D works on depth-1 tensors and needs a "
                             f"kernel like (1, 3, 3), got {self.kernel}")

    @property
    def out_channels(self) -> int:
        # the 2D baseline maps angle-channels to angle-channels
        return self.in_channels if self.arch == "UNet2D" else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NetConfig":
        data = dict(data)
        data["kernel"] = tuple(data["kernel"])
        return cls(**data)


def _check_input(x: np.ndarray, config: NetConfig):
    if x.ndim != 5:
        raise ShapeError(f"expected a 5D tensor, got shape {x.shape}")
    if x.shape[1] != config.in_channels:
        raise ShapeError(f"expected {config.in_channels} input channels, "
                         f"got {x.shape[1]}")
    factor = 1 << (config.n_scales - 1)
    for axis, k in zip((2, 3, 4), config.kernel):
        if k > 1 and x.shape[axis] % factor:
            raise ShapeError(
                f"spatial dims {x.shape[2:]} must be multiples of {factor} "
                f"on the strided axes for n_scales={config.n_scales}")


class MedNext(Layer):
    """Encoder/decoder of inverted-bottleneck blocks with additive skips."""

    def __init__(self, config: NetConfig, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.config = config
        n = config.n_scales
        kw = dict(kernel=config.kernel, expansion=config.expansion,
                  norm_enabled=config.norm_enabled,
                  activation=config.activation, dtype=dtype)

        def stack(channels):
            return Sequential([(f"b{i}", ConvNeXtBlock(rng, channels, "same",
                                                       **kw))
                               for i in range(config.blocks_per_stage)])

        widths = [config.base_channels << s for s in range(n)]
        self.stem = self._child("stem", PointwiseConv(rng, config.in_channels,
                                                      widths[0], dtype=dtype))
        self.enc = [self._child(f"enc{s}", stack(widths[s])) for s in range(n)]
        self.downs = [self._child(f"down{s}",
                                  ConvNeXtBlock(rng, widths[s], "down", **kw))
                      for s in range(n - 1)]
        self.ups = [self._child(f"up{s}",
                                ConvNeXtBlock(rng, widths[s + 1], "up", **kw))
                    for s in range(n - 1)]
        self.dec = [self._child(f"dec{s}", stack(widths[s]))
                    for s in range(n - 1)]
        self.head = self._child("head", PointwiseConv(rng, widths[0],
                                                      config.out_channels,
                                                      dtype=dtype))

    def forward(self, x):
        _check_input(x, self.config)
        n = self.config.n_scales
        h = self.stem.forward(x)
        skips = []
        for s in range(n):
            h = self.enc[s].forward(h)
            if s < n - 1:
                skips.append(h)
                h = self.downs[s].forward(h)
        for s in range(n - 2, -1, -1):
            h = self.ups[s].forward(h)
            h = h + skips[s]
            h = self.dec[s].forward(h)
        return self.head.forward(h)

    def backward(self, gy):
        n = self.config.n_scales
        g = self.head.backward(gy)
        skip_grads = [None] * (n - 1)
        for s in range(n - 1):
            g = self.dec[s].backward(g)
            skip_grads[s] = g
            g = self.ups[s].backward(g)
        for s in range(n - 1, -1, -1):
            if s < n - 1:
                g = self.downs[s].backward(g)
                g = g + skip_grads[s]
            g = self.enc[s].backward(g)
        return self.stem.backward(g)


class UNet(Layer):
    """Double-conv U-Net with max pooling and concatenated skips."""

    def __init__(self, config: NetConfig, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.config = config
        n = config.n_scales
        pool = tuple(1 if k == 1 else 2 for k in config.kernel)
        act = "identity" if config.activation == "identity" else "relu"
        widths = [config.base_channels << s for s in range(n)]
        self.widths = widths

        def double(c_in, c_out):
            return DoubleConv(rng, c_in, c_out, config.kernel,
                              norm_enabled=config.norm_enabled,
                              activation=act, dtype=dtype)

        self.enc = [self._child(f"enc{s}",
                                double(config.in_channels if s == 0
                                       else widths[s - 1], widths[s]))
                    for s in range(n)]
        self.pools = [self._child(f"pool{s}", MaxPool(pool))
                      for s in range(n - 1)]
        self.ups = [self._child(f"up{s}",
                                TransposedFullConv(rng, widths[s + 1],
                                                   widths[s], kernel=pool,
                                                   dtype=dtype))
                    for s in range(n - 1)]
        self.dec = [self._child(f"dec{s}", double(2 * widths[s], widths[s]))
                    for s in range(n - 1)]
        self.head = self._child("head", PointwiseConv(rng, widths[0],
                                                      config.out_channels,
                                                      dtype=dtype))

    def forward(self, x):
        _check_input(x, self.config)
        n = self.config.n_scales
        h = self.enc[0].forward(x)
        skips = [h]
        for s in range(1, n):
            h = self.pools[s - 1].forward(h)
            h = self.enc[s].forward(h)
            if s < n - 1:
                skips.append(h)
        for s in range(n - 2, -1, -1):
            h = self.ups[s].forward(h)
            h = np.concatenate([skips[s], h], axis=1)
            h = self.dec[s].forward(h)
        return self.head.forward(h)

    def backward(self, gy):
        n = self.config.n_scales
        g = self.head.backward(gy)
        skip_grads = [None] * (n - 1)
        for s in range(n - 1):
            g = self.dec[s].backward(g)
            skip_grads[s] = g[:, :self.widths[s]]
            g = self.ups[s].backward(g[:, self.widths[s]:])
        for s in range(n - 1, 0, -1):
            g = self.enc[s].backward(g)
            g = self.pools[s - 1].backward(g)
            g = g + skip_grads[s - 1]
        return self.enc[0].backward(g)


def build_model(config: NetConfig, seed: int = 0,
                dtype=np.float32) -> Layer:
    """Construct a freshly initialized model for the given config."""
    rng = np.random.default_rng(seed)
    if config.arch == "MedNeXt3D":
        return MedNext(config, rng, dtype)
    return UNet(config, rng, dtype)
