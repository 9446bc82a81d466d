"""Layers for training weak binary networks.

Binary conv/fc layers keep real-valued shadow weights, refresh per-filter
scales and packed sign bits from them on every step, and run their forward
through the bit-packed XNOR kernels so training and inference share one
code path. Gradients reach the shadow weights straight through; activation
binarization backpropagates with the |x| <= 1 straight-through mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import bitcore
from ..errors import ShapeError, StaleWeightsError


@dataclass
class ForwardContext:
    """Per-call forward switches.

    ``train`` enables dropout and batch-stat updates; ``bn_batch_stats``
    forces batchnorm to use batch statistics without updating running ones
    (used by the random-network robustness protocol); ``surrogate`` replaces
    every activation binarization/quantization by clipped identity so the
    straight-through gradient can be checked against finite differences.
    """

    train: bool = False
    surrogate: bool = False
    bn_batch_stats: bool = False
    rng: np.random.Generator | None = None
    debug: bool = False


class Param:
    """A trainable array with an optional gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = None

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


def sign_binarize(x: np.ndarray) -> np.ndarray:
    """Elementwise deterministic binarization, Sign(0) = +1."""
    arr = np.asarray(x)
    if arr.size and not np.isfinite(arr).all():
        raise ValueError("non-finite input to binarization")
    dtype = arr.dtype if arr.dtype.kind == "f" else np.float32
    return np.where(arr >= 0, 1, -1).astype(dtype)


def ste_backward(upstream_grad: np.ndarray, x_at_forward: np.ndarray) -> np.ndarray:
    """Straight-through gradient: pass upstream where |x| <= 1, else zero."""
    up = np.asarray(upstream_grad)
    x = np.asarray(x_at_forward)
    if up.shape != x.shape:
        raise ShapeError(f"gradient shape {up.shape} != activation shape {x.shape}")
    return up * (np.abs(x) <= 1.0)


def quantize_k_bit(x: np.ndarray, k: int) -> np.ndarray:
    """Uniform k-bit quantization of clip(x, -1, 1), round-half-up; idempotent."""
    if not 2 <= int(k) <= 8:
        raise ValueError(f"k must be in 2..8, got {k}")
    arr = np.asarray(x)
    dtype = arr.dtype if arr.dtype.kind == "f" else np.float32
    levels = (1 << int(k)) - 1
    t = (np.clip(arr, -1.0, 1.0) + 1.0) / 2.0 * levels
    q = np.floor(t + 0.5)
    return (q / levels * 2.0 - 1.0).astype(dtype)


def _init_weights(shape, fan_in, rng, dtype, scheme):
    if scheme == "kaiming":
        bound = float(np.sqrt(6.0 / fan_in))
        return rng.uniform(-bound, bound, shape).astype(dtype)
    if scheme == "normal":
        return rng.standard_normal(shape).astype(dtype)
    if scheme == "zeros":
        return np.zeros(shape, dtype)
    raise ValueError(f"unknown init scheme {scheme!r}")


class Layer:
    kind = "layer"
    index = -1
    in_shape: tuple[int, ...] = ()

    def params(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, ctx: ForwardContext):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def mark_updated(self) -> None:
        pass


class _WeightedLayer(Layer):
    """Shared machinery for fc/conv: precision flags, scales, refresh."""

    def __init__(self, weight_bits, act_bits, dtype):
        if weight_bits != 32 and weight_bits != 1 and not 2 <= weight_bits <= 8:
            raise ValueError(f"weight_bits must be 1, 2..8 or 32, got {weight_bits}")
        if act_bits != 32 and act_bits != 1 and not 2 <= act_bits <= 8:
            raise ValueError(f"act_bits must be 1, 2..8 or 32, got {act_bits}")
        self.weight_bits = int(weight_bits)
        self.act_bits = int(act_bits)
        self.dtype = dtype
        self.scale = None
        self.scale_frozen = False
        self._packed_rows = None
        self.packed_weights = None
        self._version = 0
        self._refreshed = -1

    # -- shadow-weight refresh -------------------------------------------

    @property
    def fan_in(self) -> int:
        return int(self.w.value[0].size)

    def mark_updated(self) -> None:
        self._version += 1

    def is_stale(self) -> bool:
        return self.weight_bits == 1 and self._refreshed != self._version

    def refresh(self) -> None:
        """Recompute per-filter scales and packed sign bits from shadows."""
        if self.weight_bits == 1:
            w2 = self.w.value.reshape(self.w.value.shape[0], -1)
            if not self.scale_frozen:
                self.scale = np.abs(w2).mean(axis=1, dtype=np.float64).astype(self.dtype)
            bits = (w2 >= 0).astype(np.uint8)
            self._packed_rows = bitcore._pack_rows(bits)
            self.packed_weights = bitcore.pack(sign_binarize(self.w.value))
        self._refreshed = self._version

    def effective_weight(self) -> np.ndarray:
        if self.weight_bits == 32:
            return self.w.value
        if self.weight_bits == 1:
            shape = (-1,) + (1,) * (self.w.value.ndim - 1)
            return sign_binarize(self.w.value) * self.scale.reshape(shape)
        return quantize_k_bit(self.w.value, self.weight_bits)

    # -- input precision transform ---------------------------------------

    def _transform_input(self, x, ctx):
        if self.act_bits == 32:
            return x
        if ctx.surrogate:
            return np.clip(x, -1.0, 1.0)
        if self.act_bits == 1:
            return sign_binarize(x)
        return quantize_k_bit(x, self.act_bits)

    def _transform_grad(self, dxq, xin):
        if self.act_bits == 32:
            return dxq
        return dxq * (np.abs(xin) <= 1.0)

    def _use_packed(self, ctx) -> bool:
        return self.weight_bits == 1 and self.act_bits == 1 and not ctx.surrogate

    @property
    def pad_value(self) -> float:
        # binarized inputs pad with logical -1; float paths use zero padding
        return -1.0 if self.act_bits == 1 else 0.0


class Linear(_WeightedLayer):
    kind = "fc"

    def __init__(
        self,
        in_features,
        out_features,
        *,
        weight_bits=32,
        act_bits=32,
        bias=True,
        rng=None,
        dtype=np.float32,
        init="kaiming",
    ):
        super().__init__(weight_bits, act_bits, dtype)
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.w = Param(_init_weights((out_features, in_features), in_features, rng, dtype, init))
        self.b = Param(np.zeros(out_features, dtype)) if bias else None
        self.refresh()

    def params(self):
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out

    def buffers(self):
        return {"scale": self.scale} if self.weight_bits == 1 else {}

    def out_shape(self, in_shape):
        return (self.out_features,)

    def binary_matmul(self, xq: np.ndarray) -> np.ndarray:
        """Packed XNOR product for exactly-binary xq; scale applied in float."""
        bits = (xq >= 0).astype(np.uint8)
        ints = bitcore._xnor_gemm_words(
            bitcore._pack_rows(bits), self._packed_rows, self.in_features
        )
        y = ints.astype(self.dtype) * self.scale
        if self.b is not None:
            y = y + self.b.value
        return y

    def forward(self, x, ctx):
        self._orig_shape = x.shape
        xin = x.reshape(x.shape[0], -1)
        xq = self._transform_input(xin, ctx)
        self._xin, self._xq = xin, xq
        if self._use_packed(ctx):
            if self.is_stale():
                self.refresh()
            return self.binary_matmul(xq)
        w_eff = self.effective_weight()
        y = xq @ w_eff.T
        if self.b is not None:
            y = y + self.b.value
        return y

    def backward(self, dy):
        w_eff = self.effective_weight()
        self.w.add_grad(dy.T @ self._xq)
        if self.b is not None:
            self.b.add_grad(dy.sum(axis=0))
        dxq = dy @ w_eff
        return self._transform_grad(dxq, self._xin).reshape(self._orig_shape)


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, pad_value: float):
    """[B, C, H, W] -> patch matrix [B*H'*W', C*k*k] plus output dims."""
    b, c, h, w = x.shape
    ho = bitcore._conv_out_size(h, k, stride, padding)
    wo = bitcore._conv_out_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=pad_value)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B, C, H', W', k, k]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols, b, c, h, w, k, stride, padding, ho, wo, dtype):
    """Scatter-add patch gradients back to the (unpadded) input."""
    hp, wp = h + 2 * padding, w + 2 * padding
    dx = np.zeros((b, c, hp, wp), dtype=dtype)
    d6 = dcols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d6[:, :, i, j]
    if padding:
        dx = dx[:, :, padding : padding + h, padding : padding + w]
    return dx


class Conv2d(_WeightedLayer):
    kind = "conv"

    def __init__(
        self,
        in_channels,
        out_channels,
        kernel,
        *,
        stride=1,
        padding=0,
        weight_bits=32,
        act_bits=32,
        bias=True,
        rng=None,
        dtype=np.float32,
        init="kaiming",
    ):
        super().__init__(weight_bits, act_bits, dtype)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        fan_in = in_channels * kernel * kernel
        self.w = Param(
            _init_weights((out_channels, in_channels, kernel, kernel), fan_in, rng, dtype, init)
        )
        self.b = Param(np.zeros(out_channels, dtype)) if bias else None
        self.refresh()

    def params(self):
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out

    def buffers(self):
        return {"scale": self.scale} if self.weight_bits == 1 else {}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        ho = bitcore._conv_out_size(h, self.kernel, self.stride, self.padding)
        wo = bitcore._conv_out_size(w, self.kernel, self.stride, self.padding)
        return (self.out_channels, ho, wo)

    def binary_conv(self, xq: np.ndarray) -> np.ndarray:
        """Packed XNOR convolution over exactly-binary xq [B, C, H, W]."""
        b = xq.shape[0]
        k, fan_in = self.kernel, self.fan_in
        bits = (xq >= 0).astype(np.uint8)
        cols, ho, wo = _im2col(bits, k, self.stride, self.padding, pad_value=0)
        ints = bitcore._xnor_gemm_words(bitcore._pack_rows(cols), self._packed_rows, fan_in)
        y = ints.astype(self.dtype).reshape(b, ho, wo, self.out_channels)
        y = y.transpose(0, 3, 1, 2) * self.scale[None, :, None, None]
        if self.b is not None:
            y = y + self.b.value[None, :, None, None]
        return y

    def forward(self, x, ctx):
        xq = self._transform_input(x, ctx)
        self._xin, self._xq = x, xq
        self._bhw = x.shape
        if self._use_packed(ctx):
            if self.is_stale():
                self.refresh()
            return self.binary_conv(xq)
        w_eff = self.effective_weight().reshape(self.out_channels, -1)
        cols, ho, wo = _im2col(xq, self.kernel, self.stride, self.padding, self.pad_value)
        y = (cols @ w_eff.T).reshape(x.shape[0], ho, wo, self.out_channels)
        y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
        if self.b is not None:
            y = y + self.b.value[None, :, None, None]
        return y

    def backward(self, dy):
        b, c, h, w = self._bhw
        _, f, ho, wo = dy.shape
        k = self.kernel
        dy_cols = dy.transpose(0, 2, 3, 1).reshape(b * ho * wo, f)
        cols, _, _ = _im2col(self._xq, k, self.stride, self.padding, self.pad_value)
        w_eff = self.effective_weight().reshape(f, -1)
        self.w.add_grad((dy_cols.T @ cols).reshape(self.w.value.shape))
        if self.b is not None:
            self.b.add_grad(dy.sum(axis=(0, 2, 3)))
        dcols = dy_cols @ w_eff
        dxq = _col2im(dcols, b, c, h, w, k, self.stride, self.padding, ho, wo, dy.dtype)
        return self._transform_grad(dxq, self._xin)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, num_features, *, eps=1e-4, momentum=0.1, dtype=np.float32):
        self.num_features = int(num_features)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.dtype = dtype
        self.gamma = Param(np.ones(num_features, dtype))
        self.beta = Param(np.zeros(num_features, dtype))
        self.running_mean = np.zeros(num_features, dtype)
        self.running_var = np.ones(num_features, dtype)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def _bshape(self, ndim):
        return (1, self.num_features) + (1,) * (ndim - 2)

    def forward(self, x, ctx):
        axes = tuple(i for i in range(x.ndim) if i != 1)
        use_batch = ctx.train or ctx.bn_batch_stats
        if use_batch:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if ctx.train:
                n = x.size // self.num_features
                unbiased = var * n / (n - 1) if n > 1 else var
                m = self.momentum
                self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(self.dtype)
                self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        bs = self._bshape(x.ndim)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bs)) * inv.reshape(bs)
        self._xhat, self._inv, self._axes = xhat, inv, axes
        self._batch_stats = use_batch
        self._n = x.size // self.num_features
        return self.gamma.value.reshape(bs) * xhat + self.beta.value.reshape(bs)

    def backward(self, dy):
        bs = self._bshape(dy.ndim)
        xhat, inv, axes = self._xhat, self._inv, self._axes
        self.gamma.add_grad((dy * xhat).sum(axis=axes))
        self.beta.add_grad(dy.sum(axis=axes))
        dxhat = dy * self.gamma.value.reshape(bs)
        if not self._batch_stats:
            return dxhat * inv.reshape(bs)
        n = self._n
        s1 = dxhat.sum(axis=axes).reshape(bs)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bs)
        return (inv.reshape(bs) / n) * (n * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class BinaryAct(Layer):
    """Standalone activation binarization with the straight-through gradient."""

    kind = "binact"

    def forward(self, x, ctx):
        self._xin = x
        if ctx.surrogate:
            return np.clip(x, -1.0, 1.0)
        return sign_binarize(x)

    def backward(self, dy):
        return dy * (np.abs(self._xin) <= 1.0)


class QuantAct(Layer):
    kind = "quantact"

    def __init__(self, bits):
        if not 2 <= int(bits) <= 8:
            raise ValueError(f"quantact bits must be 2..8, got {bits}")
        self.bits = int(bits)

    def forward(self, x, ctx):
        self._xin = x
        if ctx.surrogate:
            return np.clip(x, -1.0, 1.0)
        return quantize_k_bit(x, self.bits)

    def backward(self, dy):
        return dy * (np.abs(self._xin) <= 1.0)


class _Pool(Layer):
    def __init__(self, kernel, stride=None, padding=0):
        self.kernel = int(kernel)
        self.stride = int(stride) if stride is not None else int(kernel)
        self.padding = int(padding)

    def _out_hw(self, h, w):
        # floor semantics: ragged tail windows are dropped
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"pool kernel {self.kernel} exceeds padded input {h}x{w}")
        return ho, wo

    def out_shape(self, in_shape):
        c, h, w = in_shape
        ho, wo = self._out_hw(h, w)
        return (c, ho, wo)

    def _windows(self, x, pad_value):
        k, s, p = self.kernel, self.stride, self.padding
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=pad_value)
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
        return win[:, :, ::s, ::s]  # [B, C, H', W', k, k]


class MaxPool(_Pool):
    kind = "maxpool"

    def forward(self, x, ctx):
        self._in_hw = x.shape[2:]
        win = self._windows(x, pad_value=-np.inf)
        b, c, ho, wo = win.shape[:4]
        flat = win.reshape(b, c, ho, wo, -1)
        self._arg = flat.argmax(axis=-1)
        self._dims = (b, c, ho, wo)
        return flat.max(axis=-1)

    def backward(self, dy):
        b, c, ho, wo = self._dims
        h, w = self._in_hw
        k, s, p = self.kernel, self.stride, self.padding
        dx = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                sel = self._arg == (i * k + j)
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += dy * sel
        if p:
            dx = dx[:, :, p : p + h, p : p + w]
        return dx


class AvgPool(_Pool):
    kind = "avgpool"

    def forward(self, x, ctx):
        self._in_hw = x.shape[2:]
        win = self._windows(x, pad_value=0.0)
        self._dims = win.shape[:4]
        # divisor includes padding, matching the zero-pad convention
        return win.mean(axis=(-2, -1))

    def backward(self, dy):
        b, c, ho, wo = self._dims
        h, w = self._in_hw
        k, s, p = self.kernel, self.stride, self.padding
        share = dy / (k * k)
        dx = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += share
        if p:
            dx = dx[:, :, p : p + h, p : p + w]
        return dx


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout p must be in [0, 1), got {p}")
        self.p = float(p)

    def forward(self, x, ctx):
        if not ctx.train or self.p == 0.0:
            self._scaled_mask = None
            return x
        if ctx.rng is None:
            raise ValueError("dropout in training mode needs an rng for determinism")
        keep = (ctx.rng.random(x.shape) >= self.p).astype(x.dtype)
        self._scaled_mask = keep / (1.0 - self.p)
        return x * self._scaled_mask

    def backward(self, dy):
        if self._scaled_mask is None:
            return dy
        return dy * self._scaled_mask


def binarize_forward(x: np.ndarray) -> np.ndarray:
    """Public alias of the deterministic binarization used everywhere."""
    return sign_binarize(x)


def scaled_binary_forward(layer: _WeightedLayer, x_binary: bitcore.PackedBitTensor) -> np.ndarray:
    """Run a refreshed binary layer on packed +/-1 activations.

    Raises StaleWeightsError when the layer's shadow weights changed after
    the last refresh (step-counter check).
    """
    if layer.weight_bits != 1:
        raise ValueError("scaled_binary_forward requires a weight-binarized layer")
    if layer.is_stale():
        raise StaleWeightsError(
            f"layer weights updated at version {layer._version} but packed form "
            f"is from version {layer._refreshed}; call refresh()"
        )
    xb = bitcore.unpack(x_binary, layer.dtype)
    if isinstance(layer, Linear):
        squeeze = xb.ndim == 1
        xb = xb.reshape(1, -1) if squeeze else xb.reshape(xb.shape[0], -1)
        y = layer.binary_matmul(xb)
        return y[0] if squeeze else y
    if isinstance(layer, Conv2d):
        squeeze = xb.ndim == 3
        xb = xb[None] if squeeze else xb
        y = layer.binary_conv(xb)
        return y[0] if squeeze else y
    raise TypeError(f"unsupported layer type {type(layer).__name__}")
