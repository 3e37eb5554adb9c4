"""Composite blocks: the inverted-bottleneck conv block and U-Net stages."""

from __future__ import annotations

import numpy as np

from .layers import (
    ChannelNorm,
    DepthwiseConv,
    FullConv,
    Identity,
    Layer,
    PointwiseConv,
    Relu,
    Sequential,
    TransposedDepthwiseConv,
    TransposedPointwiseConv,
    make_activation,
)


class ConvNeXtBlock(Layer):
    """Depthwise conv -> norm -> expand -> activation -> compress, residual.

    mode "same" keeps the shape and uses an identity residual. "down"
    halves the strided spatial dims and doubles channels, with a strided
    pointwise residual; "up" is the exact transpose, halving channels.
    The compression conv starts at zero so a fresh block is its residual
    map, which keeps deep stacks stable early in training.
    """

    def __init__(self, rng, channels: int, mode: str = "same",
                 kernel=(3, 3, 3), expansion: int = 4,
                 norm_enabled: bool = True, activation: str = "gelu",
                 pad_mode: str = "zeros", dtype=np.float32):
        super().__init__()
        kernel = tuple(kernel)
        stride = tuple(1 if k == 1 else 2 for k in kernel)
        if mode == "same":
            c_out = channels
            dw = DepthwiseConv(rng, channels, kernel, pad_mode=pad_mode,
                               dtype=dtype)
            residual = None
        elif mode == "down":
            c_out = channels * 2
            dw = DepthwiseConv(rng, channels, kernel, stride=stride,
                               pad_mode=pad_mode, dtype=dtype)
            residual = PointwiseConv(rng, channels, c_out, stride=stride,
                                     dtype=dtype)
        elif mode == "up":
            if channels % 2:
                raise ValueError(f"up block needs even channels, got {channels}")
            c_out = channels // 2
            dw = TransposedDepthwiseConv(rng, channels, kernel, stride=stride,
                                         dtype=dtype)
            residual = TransposedPointwiseConv(rng, channels, c_out,
                                               stride=stride, dtype=dtype)
        else:
            raise ValueError(f"unknown block mode {mode!r}")
        self.mode = mode
        self.out_channels = c_out
        self.dw = self._child("dw", dw)
        self.norm = self._child("norm", ChannelNorm(channels, dtype)
                                if norm_enabled else Identity())
        self.expand = self._child("expand",
                                  PointwiseConv(rng, channels,
                                                expansion * channels,
                                                dtype=dtype))
        self.act = self._child("act", make_activation(activation))
        self.compress = self._child("compress",
                                    PointwiseConv(rng, expansion * channels,
                                                  c_out, zero_init=True,
                                                  dtype=dtype))
        self.residual = (None if residual is None
                         else self._child("residual", residual))

    def forward(self, x):
        main = self.dw.forward(x)
        main = self.norm.forward(main)
        main = self.expand.forward(main)
        main = self.act.forward(main)
        main = self.compress.forward(main)
        res = x if self.residual is None else self.residual.forward(x)
        return self._checked(main + res)

    def backward(self, gy):
        g = self.compress.backward(gy)
        g = self.act.backward(g)
        g = self.expand.backward(g)
        g = self.norm.backward(g)
        gx = self.dw.backward(g)
        return gx + (gy if self.residual is None
                     else self.residual.backward(gy))


class DoubleConv(Sequential):
    """(full conv -> norm -> activation) twice; the classic U-Net stage.

    The U-Net keeps ReLU regardless of the block activation choice,
    except in identity mode where all nonlinearities are stripped.
    """

    def __init__(self, rng, c_in: int, c_out: int, kernel=(3, 3, 3),
                 norm_enabled: bool = True, activation: str = "relu",
                 dtype=np.float32):
        def stage(tag, ci):
            return [
                (f"conv{tag}", FullConv(rng, ci, c_out, kernel, dtype=dtype)),
                (f"norm{tag}", ChannelNorm(c_out, dtype) if norm_enabled
                 else Identity()),
                (f"act{tag}", Identity() if activation == "identity"
                 else Relu()),
            ]

        super().__init__(stage(1, c_in) + stage(2, c_out))
        self.out_channels = c_out
