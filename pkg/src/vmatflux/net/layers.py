"""Array layers with cached forwards and exact analytic backwards.

Tensors are (batch, channels, depth, height, width); 2D variants are
expressed with size-1 depth axes and kernels like (1, 3, 3). Every layer
owns parameter arrays in `params` and accumulates gradients of matching
shapes into `grads`: forward() caches what its backward() needs,
backward(gy) returns the input gradient, and the trainer zeroes grads
between steps. Transposed convolutions are implemented literally as the
adjoints of their strided counterparts, so the up/down paths are exact
mirrors of each other.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from ..errors import ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with values beyond 2 std redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


class Layer:
    """Base for everything with parameters and a backward pass."""

    nan_checks = False  # class-wide debug switch, see nan_check_mode()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._children: list[tuple[str, Layer]] = []
        self._cache = None

    def _register(self, name: str, array: np.ndarray) -> np.ndarray:
        self.params[name] = array
        self.grads[name] = np.zeros_like(array)
        return array

    def _child(self, name: str, layer: Layer):
        self._children.append((name, layer))
        return layer

    def named_params(self, prefix: str = ""):
        for key, value in self.params.items():
            yield prefix + key, value
        for name, child in self._children:
            yield from child.named_params(f"{prefix}{name}.")

    def named_grads(self, prefix: str = ""):
        for key, value in self.grads.items():
            yield prefix + key, value
        for name, child in self._children:
            yield from child.named_grads(f"{prefix}{name}.")

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0
        for _, child in self._children:
            child.zero_grads()

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(
                f"{type(self).__name__}.backward called before forward")
        return self._cache

    def _checked(self, y: np.ndarray) -> np.ndarray:
        if Layer.nan_checks and not np.isfinite(y).all():
            raise FloatingPointError(
                f"non-finite values leaving {type(self).__name__}")
        return y


def nan_check_mode(enabled: bool):
    """Toggle finite-value assertions after every layer forward."""
    Layer.nan_checks = bool(enabled)


class Sequential(Layer):
    def __init__(self, named_layers: list[tuple[str, Layer]]):
        super().__init__()
        self.layers = [layer for _, layer in named_layers]
        for name, layer in named_layers:
            self._child(name, layer)

    def forward(self, x):
        for layer in self.layers:
            x = layer._checked(layer.forward(x))
        return x

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy


class Identity(Layer):
    def forward(self, x):
        return x

    def backward(self, gy):
        return gy


class Relu(Layer):
    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, np.zeros((), x.dtype))

    def backward(self, gy):
        mask = self._need_cache()
        return np.where(mask, gy, np.zeros((), gy.dtype))


class Gelu(Layer):
    """Exact erf formulation: x * Phi(x)."""

    def forward(self, x):
        cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
        self._cache = (x, cdf)
        return x * cdf

    def backward(self, gy):
        x, cdf = self._need_cache()
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return gy * (cdf + x * pdf)


def make_activation(name: str) -> Layer:
    table = {"gelu": Gelu, "relu": Relu, "identity": Identity}
    if name not in table:
        raise ValueError(f"unknown activation {name!r}; pick from {sorted(table)}")
    return table[name]()


class PointwiseConv(Layer):
    """1x1x1 convolution; stride is pure spatial subsampling."""

    def __init__(self, rng, c_in: int, c_out: int, stride=(1, 1, 1),
                 zero_init: bool = False, dtype=np.float32):
        super().__init__()
        self.stride = tuple(stride)
        weight = (np.zeros((c_out, c_in), dtype) if zero_init
                  else trunc_normal(rng, (c_out, c_in), dtype=dtype))
        self.w = self._register("weight", weight)
        self.b = self._register("bias", np.zeros(c_out, dtype))

    def forward(self, x):
        sd, sh, sw = self.stride
        xs = x if self.stride == (1, 1, 1) else x[:, :, ::sd, ::sh, ::sw]
        self._cache = (x.shape, xs)
        y = np.einsum("oc,bcdhw->bodhw", self.w, xs, optimize=True)
        return y + self.b.reshape(1, -1, 1, 1, 1)

    def backward(self, gy):
        x_shape, xs = self._need_cache()
        self.grads["weight"] += np.einsum("bodhw,bcdhw->oc", gy, xs,
                                          optimize=True)
        self.grads["bias"] += gy.sum(axis=(0, 2, 3, 4))
        gxs = np.einsum("oc,bodhw->bcdhw", self.w, gy, optimize=True)
        if self.stride == (1, 1, 1):
            return gxs
        sd, sh, sw = self.stride
        gx = np.zeros(x_shape, dtype=gy.dtype)
        gx[:, :, ::sd, ::sh, ::sw] = gxs
        return gx


class TransposedPointwiseConv(Layer):
    """Adjoint of the strided 1x1x1 conv: zero-stuffed channel projection."""

    def __init__(self, rng, c_in: int, c_out: int, stride=(2, 2, 2),
                 dtype=np.float32):
        super().__init__()
        self.stride = tuple(stride)
        self.w = self._register("weight", trunc_normal(rng, (c_out, c_in),
                                                       dtype=dtype))
        self.b = self._register("bias", np.zeros(c_out, dtype))

    def forward(self, x):
        b, _, d, h, w = x.shape
        sd, sh, sw = self.stride
        self._cache = x
        y = np.zeros((b, self.w.shape[0], d * sd, h * sh, w * sw), x.dtype)
        y[:, :, ::sd, ::sh, ::sw] = np.einsum("oc,bcdhw->bodhw", self.w, x,
                                              optimize=True)
        return y + self.b.reshape(1, -1, 1, 1, 1)

    def backward(self, gy):
        x = self._need_cache()
        sd, sh, sw = self.stride
        gys = gy[:, :, ::sd, ::sh, ::sw]
        self.grads["weight"] += np.einsum("bodhw,bcdhw->oc", gys, x,
                                          optimize=True)
        self.grads["bias"] += gy.sum(axis=(0, 2, 3, 4))
        return np.einsum("oc,bodhw->bcdhw", self.w, gys, optimize=True)


def _conv_out_len(n: int, k: int, s: int) -> int:
    return (n + 2 * (k // 2) - k) // s + 1


class DepthwiseConv(Layer):
    """Per-channel convolution, padding k//2 per axis, optional stride.

    pad_mode "zeros" pads every axis with zeros; "circular_depth" wraps
    the depth axis (gantry is cyclic) and zero-pads height/width.
    """

    def __init__(self, rng, channels: int, kernel=(3, 3, 3), stride=(1, 1, 1),
                 pad_mode: str = "zeros", dtype=np.float32):
        super().__init__()
        if pad_mode not in ("zeros", "circular_depth"):
            raise ValueError(f"unknown pad_mode {pad_mode!r}")
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.pad_mode = pad_mode
        self.w = self._register("weight",
                                trunc_normal(rng, (channels, *kernel),
                                             dtype=dtype))
        self.b = self._register("bias", np.zeros(channels, dtype))

    def _pad(self, x):
        kd, kh, kw = self.kernel
        pd, ph, pw = kd // 2, kh // 2, kw // 2
        if self.pad_mode == "circular_depth" and pd:
            x = np.concatenate([x[:, :, -pd:], x, x[:, :, :pd]], axis=2)
            pd = 0
        return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))

    def _offset_slices(self, out_shape):
        kd, kh, kw = self.kernel
        sd, sh, sw = self.stride
        _, _, do, ho, wo = out_shape
        for dz in range(kd):
            for dy in range(kh):
                for dx in range(kw):
                    yield (dz, dy, dx), (
                        slice(None), slice(None),
                        slice(dz, dz + sd * (do - 1) + 1, sd),
                        slice(dy, dy + sh * (ho - 1) + 1, sh),
                        slice(dx, dx + sw * (wo - 1) + 1, sw))

    def forward(self, x):
        b, c, d, h, w = x.shape
        out_shape = (b, c,
                     _conv_out_len(d, self.kernel[0], self.stride[0]),
                     _conv_out_len(h, self.kernel[1], self.stride[1]),
                     _conv_out_len(w, self.kernel[2], self.stride[2]))
        xp = self._pad(x)
        self._cache = (x.shape, xp, out_shape)
        y = np.zeros(out_shape, x.dtype)
        for (dz, dy, dx), sl in self._offset_slices(out_shape):
            y += self.w[:, dz, dy, dx].reshape(1, -1, 1, 1, 1) * xp[sl]
        return y + self.b.reshape(1, -1, 1, 1, 1)

    def backward(self, gy):
        x_shape, xp, out_shape = self._need_cache()
        gxp = np.zeros_like(xp)
        for (dz, dy, dx), sl in self._offset_slices(out_shape):
            self.grads["weight"][:, dz, dy, dx] += (gy * xp[sl]).sum(
                axis=(0, 2, 3, 4))
            gxp[sl] += self.w[:, dz, dy, dx].reshape(1, -1, 1, 1, 1) * gy
        self.grads["bias"] += gy.sum(axis=(0, 2, 3, 4))
        return self._unpad_grad(gxp, x_shape)

    def _unpad_grad(self, gxp, x_shape):
        _, _, d, h, w = x_shape
        kd, kh, kw = self.kernel
        pd, ph, pw = kd // 2, kh // 2, kw // 2
        if self.pad_mode == "circular_depth" and pd:
            g = gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w].copy()
            g[:, :, -pd:] += gxp[:, :, :pd, ph:ph + h, pw:pw + w]
            g[:, :, :pd] += gxp[:, :, pd + d:, ph:ph + h, pw:pw + w]
            return g
        return gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w]


class TransposedDepthwiseConv(Layer):
    """Adjoint of the strided depthwise conv; multiplies dims by the stride."""

    def __init__(self, rng, channels: int, kernel=(3, 3, 3), stride=(2, 2, 2),
                 dtype=np.float32):
        super().__init__()
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.w = self._register("weight",
                                trunc_normal(rng, (channels, *kernel),
                                             dtype=dtype))
        self.b = self._register("bias", np.zeros(channels, dtype))

    def _scatter_slices(self, in_shape):
        kd, kh, kw = self.kernel
        sd, sh, sw = self.stride
        _, _, d, h, w = in_shape
        for dz in range(kd):
            for dy in range(kh):
                for dx in range(kw):
                    yield (dz, dy, dx), (
                        slice(None), slice(None),
                        slice(dz, dz + sd * (d - 1) + 1, sd),
                        slice(dy, dy + sh * (h - 1) + 1, sh),
                        slice(dx, dx + sw * (w - 1) + 1, sw))

    def forward(self, x):
        b, c, d, h, w = x.shape
        kd, kh, kw = self.kernel
        sd, sh, sw = self.stride
        pd, ph, pw = kd // 2, kh // 2, kw // 2
        yp = np.zeros((b, c, d * sd + 2 * pd, h * sh + 2 * ph, w * sw + 2 * pw),
                      x.dtype)
        for (dz, dy, dx), sl in self._scatter_slices(x.shape):
            yp[sl] += self.w[:, dz, dy, dx].reshape(1, -1, 1, 1, 1) * x
        self._cache = x
        y = yp[:, :, pd:pd + d * sd, ph:ph + h * sh, pw:pw + w * sw].copy()
        return y + self.b.reshape(1, -1, 1, 1, 1)

    def backward(self, gy):
        x = self._need_cache()
        kd, kh, kw = self.kernel
        pd, ph, pw = kd // 2, kh // 2, kw // 2
        gyp = np.pad(gy, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
        gx = np.zeros_like(x)
        for (dz, dy, dx), sl in self._scatter_slices(x.shape):
            gys = gyp[sl]
            self.grads["weight"][:, dz, dy, dx] += (gys * x).sum(
                axis=(0, 2, 3, 4))
            gx += self.w[:, dz, dy, dx].reshape(1, -1, 1, 1, 1) * gys
        self.grads["bias"] += gy.sum(axis=(0, 2, 3, 4))
        return gx


class ChannelNorm(Layer):
    """Group norm with one group per channel: per-(batch, channel) stats."""

    EPS = 1e-5

    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.gamma = self._register("gamma", np.ones(channels, dtype))
        self.beta = self._register("beta", np.zeros(channels, dtype))

    def forward(self, x):
        mu = x.mean(axis=(2, 3, 4), keepdims=True)
        var = x.var(axis=(2, 3, 4), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.EPS)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return (self.gamma.reshape(1, -1, 1, 1, 1) * xhat
                + self.beta.reshape(1, -1, 1, 1, 1))

    def backward(self, gy):
        xhat, inv = self._need_cache()
        self.grads["gamma"] += (gy * xhat).sum(axis=(0, 2, 3, 4))
        self.grads["beta"] += gy.sum(axis=(0, 2, 3, 4))
        g = gy * self.gamma.reshape(1, -1, 1, 1, 1)
        m1 = g.mean(axis=(2, 3, 4), keepdims=True)
        m2 = (g * xhat).mean(axis=(2, 3, 4), keepdims=True)
        return inv * (g - m1 - xhat * m2)


class FullConv(Layer):
    """Dense cross-channel convolution, stride 1, zero padding k//2."""

    def __init__(self, rng, c_in: int, c_out: int, kernel=(3, 3, 3),
                 dtype=np.float32):
        super().__init__()
        self.kernel = tuple(kernel)
        self.w = self._register("weight",
                                trunc_normal(rng, (c_out, c_in, *kernel),
                                             dtype=dtype))
        self.b = self._register("bias", np.zeros(c_out, dtype))

    def _offsets(self, d, h, w):
        kd, kh, kw = self.kernel
        for dz in range(kd):
            for dy in range(kh):
                for dx in range(kw):
                    yield (dz, dy, dx), (slice(None), slice(None),
                                         slice(dz, dz + d), slice(dy, dy + h),
                                         slice(dx, dx + w))

    def forward(self, x):
        b, _, d, h, w = x.shape
        kd, kh, kw = self.kernel
        xp = np.pad(x, ((0, 0), (0, 0), (kd // 2, kd // 2),
                        (kh // 2, kh // 2), (kw // 2, kw // 2)))
        self._cache = (x.shape, xp)
        y = np.zeros((b, self.w.shape[0], d, h, w), x.dtype)
        for (dz, dy, dx), sl in self._offsets(d, h, w):
            y += np.einsum("oc,bcdhw->bodhw", self.w[:, :, dz, dy, dx], xp[sl],
                           optimize=True)
        return y + self.b.reshape(1, -1, 1, 1, 1)

    def backward(self, gy):
        x_shape, xp = self._need_cache()
        _, _, d, h, w = x_shape
        kd, kh, kw = self.kernel
        gxp = np.zeros_like(xp)
        for (dz, dy, dx), sl in self._offsets(d, h, w):
            self.grads["weight"][:, :, dz, dy, dx] += np.einsum(
                "bodhw,bcdhw->oc", gy, xp[sl], optimize=True)
            gxp[sl] += np.einsum("oc,bodhw->bcdhw", self.w[:, :, dz, dy, dx],
                                 gy, optimize=True)
        self.grads["bias"] += gy.sum(axis=(0, 2, 3, 4))
        return gxp[:, :, kd // 2:kd // 2 + d, kh // 2:kh // 2 + h,
                   kw // 2:kw // 2 + w]


class TransposedFullConv(Layer):
    """Up-convolution with kernel == stride: disjoint output blocks."""

    def __init__(self, rng, c_in: int, c_out: int, kernel=(2, 2, 2),
                 dtype=np.float32):
        super().__init__()
        self.kernel = tuple(kernel)
        self.w = self._register("weight",
                                trunc_normal(rng, (c_out, c_in, *kernel),
                                             dtype=dtype))
        self.b = self._register("bias", np.zeros(c_out, dtype))

    def forward(self, x):
        b, _, d, h, w = x.shape
        kd, kh, kw = self.kernel
        self._cache = x
        y = np.empty((b, self.w.shape[0], d * kd, h * kh, w * kw), x.dtype)
        for dz in range(kd):
            for dy in range(kh):
                for dx in range(kw):
                    y[:, :, dz::kd, dy::kh, dx::kw] = np.einsum(
                        "oc,bcdhw->bodhw", self.w[:, :, dz, dy, dx], x,
                        optimize=True)
        return y + self.b.reshape(1, -1, 1, 1, 1)

    def backward(self, gy):
        x = self._need_cache()
        kd, kh, kw = self.kernel
        gx = np.zeros_like(x)
        for dz in range(kd):
            for dy in range(kh):
                for dx in range(kw):
                    gys = gy[:, :, dz::kd, dy::kh, dx::kw]
                    self.grads["weight"][:, :, dz, dy, dx] += np.einsum(
                        "bodhw,bcdhw->oc", gys, x, optimize=True)
                    gx += np.einsum("oc,bodhw->bcdhw",
                                    self.w[:, :, dz, dy, dx], gys,
                                    optimize=True)
        self.grads["bias"] += gy.sum(axis=(0, 2, 3, 4))
        return gx


class MaxPool(Layer):
    """Non-overlapping max pooling with argmax-routed gradients."""

    def __init__(self, kernel=(2, 2, 2)):
        super().__init__()
        self.kernel = tuple(kernel)

    def forward(self, x):
        b, c, d, h, w = x.shape
        kd, kh, kw = self.kernel
        if d % kd or h % kh or w % kw:
            raise ShapeError(f"dims {(d, h, w)} not divisible by "
                             f"pool {self.kernel}")
        windows = (x.reshape(b, c, d // kd, kd, h // kh, kh, w // kw, kw)
                   .transpose(0, 1, 2, 4, 6, 3, 5, 7)
                   .reshape(b, c, d // kd, h // kh, w // kw, kd * kh * kw))
        idx = windows.argmax(axis=-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(self, gy):
        idx, x_shape = self._need_cache()
        b, c, d, h, w = x_shape
        kd, kh, kw = self.kernel
        flat = np.zeros((b, c, d // kd, h // kh, w // kw, kd * kh * kw),
                        gy.dtype)
        np.put_along_axis(flat, idx[..., None], gy[..., None], axis=-1)
        return (flat.reshape(b, c, d // kd, h // kh, w // kw, kd, kh, kw)
                .transpose(0, 1, 2, 5, 3, 6, 4, 7)
                .reshape(x_shape))


def circular_pad_gantry(x: np.ndarray, target_depth: int) -> np.ndarray:
    """Grow the depth axis to target_depth by wrapping slices cyclically.

    Splits the padding evenly: the front pad holds the last slices and
    the back pad the first ones (depth 180 -> 192 prepends slices
    174..179 and appends slices 0..5).
    """
    d = x.shape[2]
    if target_depth < d:
        raise ShapeError(f"target depth {target_depth} below input depth {d}")
    total = target_depth - d
    if total % 2:
        raise ValueError(f"padding total must be even, got {total}")
    half = total // 2
    if half == 0:
        return x
    if half > d:
        raise ShapeError(f"padding {half} per side exceeds depth {d}; "
                         "wrapping more than once is not supported")
    return np.concatenate([x[:, :, d - half:], x, x[:, :, :half]], axis=2)


def circular_pad_gantry_backward(gy: np.ndarray, source_depth: int) -> np.ndarray:
    """Adjoint of circular_pad_gantry: fold pad-slice grads onto sources."""
    half = (gy.shape[2] - source_depth) // 2
    if half == 0:
        return gy
    g = gy[:, :, half:half + source_depth].copy()
    g[:, :, source_depth - half:] += gy[:, :, :half]
    g[:, :, :half] += gy[:, :, half + source_depth:]
    return g


def crop_gantry(x: np.ndarray, target_depth: int) -> np.ndarray:
    """Center-crop the depth axis down to target_depth."""
    d = x.shape[2]
    if target_depth > d:
        raise ShapeError(f"target depth {target_depth} above input depth {d}")
    total = d - target_depth
    if total % 2:
        raise ValueError(f"crop total must be even, got {total}")
    half = total // 2
    return x if half == 0 else x[:, :, half:half + target_depth]


def crop_gantry_backward(gy: np.ndarray, source_depth: int) -> np.ndarray:
    """Adjoint of crop_gantry: embed at the center, zeros elsewhere."""
    d = gy.shape[2]
    if d == source_depth:
        return gy
    half = (source_depth - d) // 2
    shape = list(gy.shape)
    shape[2] = source_depth
    g = np.zeros(shape, gy.dtype)
    g[:, :, half:half + d] = gy
    return g
