"""Numpy layers with hand-written backward passes.

Activations flow through the network in channel-major ``(C, N, H, W)``
layout so that every convolution is a single GEMM over the whole batch
without per-layer transposes. Layers are dtype-agnostic: they compute in
whatever float type their parameters and inputs carry, which is what lets
the gradient checks run on a float64 shadow of a float32 model.
"""

from __future__ import annotations

import numpy as np


class StaleCacheError(RuntimeError):
    """Raised when ``backward`` is called without a matching ``forward``."""


class Layer:
    """Base layer. Subclasses fill ``params`` and write ``grads`` in backward."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, shape):
        return shape

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StaleCacheError(f"{self.kind}: backward called without a forward pass")
        cache, self._cache = self._cache, None
        return cache

    def astype(self, dtype):
        for name in self.params:
            self.params[name] = self.params[name].astype(dtype)
        return self


def _pad(x, pad, value=0.0):
    if pad == 0:
        return x
    c, n, h, w = x.shape
    out = np.full((c, n, h + 2 * pad, w + 2 * pad), value, dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _out_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


class Conv2D(Layer):
    """2-D convolution (cross-correlation) lowered to one GEMM per call."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0, rng=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.params["W"] = (rng.standard_normal((out_channels, in_channels, kernel, kernel))
                            * np.sqrt(2.0 / fan_in)).astype(np.float32)
        self.params["b"] = np.zeros(out_channels, dtype=np.float32)

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ValueError(f"conv expects {self.in_channels} channels, got {c}")
        return (self.out_channels,
                _out_size(h, self.kernel, self.stride, self.pad),
                _out_size(w, self.kernel, self.stride, self.pad))

    def forward(self, x, train=False, rng=None):
        C, N, H, W = x.shape
        if C != self.in_channels:
            raise ValueError(f"conv expects {self.in_channels} channels, got {C}")
        k, s = self.kernel, self.stride
        Ho, Wo = _out_size(H, k, s, self.pad), _out_size(W, k, s, self.pad)
        xp = _pad(x, self.pad)
        cols = np.empty((C, k, k, N, Ho, Wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
        cols = cols.reshape(C * k * k, N * Ho * Wo)
        Wm = self.params["W"].reshape(self.out_channels, -1)
        out = Wm @ cols
        out += self.params["b"][:, None]
        self._cache = (cols, xp.shape, (N, Ho, Wo))
        return out.reshape(self.out_channels, N, Ho, Wo)

    def backward(self, dy):
        cols, xp_shape, (N, Ho, Wo) = self._take_cache()
        k, s, C = self.kernel, self.stride, self.in_channels
        dy2 = dy.reshape(self.out_channels, -1)
        self.grads["W"] = (dy2 @ cols.T).reshape(self.params["W"].shape)
        self.grads["b"] = dy2.sum(axis=1)
        Wm = self.params["W"].reshape(self.out_channels, -1)
        dcols = (Wm.T @ dy2).reshape(C, k, k, N, Ho, Wo)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, i, j]
        p = self.pad
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        mask = x > 0
        self._cache = mask
        return np.maximum(x, 0, dtype=x.dtype)

    def backward(self, dy):
        return dy * self._take_cache()


class MaxPool2D(Layer):
    """Max pooling; the first maximum in scan order receives the gradient."""

    kind = "maxpool"

    def __init__(self, kernel, stride=None, pad=0):
        super().__init__()
        self.kernel = kernel
        self.stride = stride or kernel
        self.pad = pad

    def output_shape(self, shape):
        c, h, w = shape
        return (c, _out_size(h, self.kernel, self.stride, self.pad),
                _out_size(w, self.kernel, self.stride, self.pad))

    def forward(self, x, train=False, rng=None):
        C, N, H, W = x.shape
        k, s = self.kernel, self.stride
        Ho, Wo = _out_size(H, k, s, self.pad), _out_size(W, k, s, self.pad)
        if s == k and self.pad == 0 and H == Ho * k and W == Wo * k:
            # non-overlapping windows: one argmax over a reshaped view
            win = x.reshape(C, N, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5)
            win = win.reshape(C, N, Ho, Wo, k * k)
            idx = win.argmax(axis=-1)
            out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
            self._cache = (idx, None, x.shape)
            return out
        xp = _pad(x, self.pad, value=-np.inf)
        out = xp[:, :, 0:s * Ho:s, 0:s * Wo:s].copy()
        idx = np.zeros(out.shape, dtype=np.int8)
        for o in range(1, k * k):
            i, j = divmod(o, k)
            win = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
            better = win > out
            np.copyto(out, win, where=better)
            np.copyto(idx, o, where=better)
        self._cache = (idx, xp.shape, x.shape)
        return out

    def backward(self, dy):
        idx, xp_shape, x_shape = self._take_cache()
        k, s = self.kernel, self.stride
        C, N, Ho, Wo = dy.shape
        if xp_shape is None:
            g = np.zeros((C, N, Ho, Wo, k * k), dtype=dy.dtype)
            np.put_along_axis(g, idx[..., None], dy[..., None], axis=-1)
            g = g.reshape(C, N, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5)
            return g.reshape(x_shape)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for o in range(k * k):
            i, j = divmod(o, k)
            dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += np.where(idx == o, dy, 0)
        p = self.pad
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp


class GlobalAvgPool(Layer):
    """(C, N, H, W) -> (N, C)."""

    kind = "gap"

    def output_shape(self, shape):
        return (shape[0],)

    def forward(self, x, train=False, rng=None):
        self._cache = x.shape
        return x.mean(axis=(2, 3)).T

    def backward(self, dy):
        C, N, H, W = self._take_cache()
        g = dy.T / (H * W)
        return np.broadcast_to(g[:, :, None, None], (C, N, H, W)).copy()


class Dropout(Layer):
    """Inverted dropout; exact identity outside training."""

    kind = "dropout"

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._cache = False
            return x
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        self._cache = keep
        return x * keep

    def backward(self, dy):
        keep = self._take_cache()
        if keep is False:
            return dy
        return dy * keep


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = (rng.standard_normal((in_features, out_features))
                            * np.sqrt(2.0 / in_features)).astype(np.float32)
        self.params["b"] = np.zeros(out_features, dtype=np.float32)

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ValueError(f"dense expects ({self.in_features},), got {shape}")
        return (self.out_features,)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"dense expects (N, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        x = self._take_cache()
        self.grads["W"] = x.T @ dy
        self.grads["b"] = dy.sum(axis=0)
        return dy @ self.params["W"].T


class Inception(Layer):
    """Four parallel branches concatenated on channels.

    1x1 conv, 3x3 conv, 5x5 conv and 3x3/s1 max-pool followed by a 1x1
    projection, each followed by ReLU. Spatial size is preserved.
    """

    kind = "inception"

    def __init__(self, in_channels, widths=(4, 8, 4, 4), rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        c1, c3, c5, cp = widths
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.branches = [
            [Conv2D(in_channels, c1, 1, rng=rng), ReLU()],
            [Conv2D(in_channels, c3, 3, pad=1, rng=rng), ReLU()],
            [Conv2D(in_channels, c5, 5, pad=2, rng=rng), ReLU()],
            [MaxPool2D(3, 1, pad=1), Conv2D(in_channels, cp, 1, rng=rng), ReLU()],
        ]
        self._bind_params()

    def _bind_params(self):
        self.params = {}
        for b, branch in enumerate(self.branches):
            for li, layer in enumerate(branch):
                for name, value in layer.params.items():
                    self.params[f"b{b}.{li}.{name}"] = value

    def _push_params(self):
        for b, branch in enumerate(self.branches):
            for li, layer in enumerate(branch):
                for name in layer.params:
                    layer.params[name] = self.params[f"b{b}.{li}.{name}"]

    def astype(self, dtype):
        super().astype(dtype)
        self._push_params()
        return self

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ValueError(f"inception expects {self.in_channels} channels, got {c}")
        return (sum(self.widths), h, w)

    def forward(self, x, train=False, rng=None):
        self._push_params()
        outs = []
        for branch in self.branches:
            h = x
            for layer in branch:
                h = layer.forward(h, train, rng)
            outs.append(h)
        self._cache = True
        return np.concatenate(outs, axis=0)

    def backward(self, dy):
        self._take_cache()
        dx = None
        start = 0
        for b, (branch, width) in enumerate(zip(self.branches, self.widths)):
            g = dy[start:start + width]
            start += width
            for layer in reversed(branch):
                g = layer.backward(g)
            dx = g if dx is None else dx + g
        self.grads = {}
        for b, branch in enumerate(self.branches):
            for li, layer in enumerate(branch):
                for name, value in layer.grads.items():
                    self.grads[f"b{b}.{li}.{name}"] = value
        return dx
