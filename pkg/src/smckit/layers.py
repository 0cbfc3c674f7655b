"""Layer kinds for small feedforward networks.

Every layer implements four passes:

* ``forward(x, p)`` -> ``(y, cache)``
* ``backward(dy, p, cache)`` -> ``(dx, grads)``
* ``rforward(rx, p, v, cache)`` -> ``ry``, the directional derivative of the
  output when the input moves along ``rx`` and the parameters along ``v``
* ``rbackward(dy, rdy, p, v, cache, rx)`` -> ``(rdx, rgrads)``, the directional
  derivative of the backward pass

The last two are Pearlmutter's R-operator; chaining them through a network
gives exact Hessian-vector products. ``rx``, ``rdy`` and ``v`` may be ``None``
for "identically zero", which lets frozen prefixes skip work entirely.

Images are NCHW float64 arrays, dense activations are (N, F).
"""

from __future__ import annotations

import math
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from smckit.errors import DimensionMismatch, InvalidInput

Params = dict[str, np.ndarray]

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2x2", "flatten", "concat_channels")


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


class Layer:
    kind: str = ""
    has_params = False

    def __init__(self, name: str):
        if not name:
            raise InvalidInput("layer name must be non-empty")
        self.name = name

    def spec(self) -> dict[str, Any]:
        return {"kind": self.kind, "name": self.name}

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def init_params(self, rng) -> Params:
        return {}

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.spec().items() if k != "kind")
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    """``y = x @ W.T + b`` with ``W`` of shape (out_features, in_features)."""

    kind = "dense"
    has_params = True

    def __init__(self, name: str, in_features: int, out_features: int):
        super().__init__(name)
        if in_features < 1 or out_features < 1:
            raise InvalidInput(f"{name}: feature counts must be positive")
        self.in_features = int(in_features)
        self.out_features = int(out_features)

    def spec(self):
        return {**super().spec(), "in_features": self.in_features, "out_features": self.out_features}

    def param_shapes(self):
        return {"W": (self.out_features, self.in_features), "b": (self.out_features,)}

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise DimensionMismatch(f"{self.name}: expected input ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def init_params(self, rng):
        bound = 1.0 / math.sqrt(self.in_features)
        w = rng.child(self.name, "W").uniform(self.out_features * self.in_features)
        b = rng.child(self.name, "b").uniform(self.out_features)
        return {
            "W": (w * 2 - 1).reshape(self.out_features, self.in_features) * math.sqrt(6.0) * bound,
            "b": (b * 2 - 1) * bound,
        }

    def forward(self, x, p):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionMismatch(f"{self.name}: expected (N, {self.in_features}), got {x.shape}")
        return x @ p["W"].T + p["b"], x

    def backward(self, dy, p, x):
        return dy @ p["W"], {"W": dy.T @ x, "b": dy.sum(axis=0)}

    def rforward(self, rx, p, v, x):
        ry = None if rx is None else rx @ p["W"].T
        if v is not None:
            ry = _add(ry, x @ v["W"].T + v["b"])
        return ry

    def rbackward(self, dy, rdy, p, v, x, rx):
        rdx = None if rdy is None else rdy @ p["W"]
        if v is not None:
            rdx = _add(rdx, dy @ v["W"])
        rdw = None if rdy is None else rdy.T @ x
        if rx is not None:
            rdw = _add(rdw, dy.T @ rx)
        if rdw is None:
            rdw = np.zeros_like(p["W"])
        rdb = np.zeros_like(p["b"]) if rdy is None else rdy.sum(axis=0)
        return rdx, {"W": rdw, "b": rdb}


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N*Ho*Wo, C*k*k) patch matrix for a stride-1 convolution."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # N, C, Ho, Wo, k, k
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def _col2im(cols: np.ndarray, x_shape: tuple[int, ...], k: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + ho, j : j + wo] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


class Conv2d(Layer):
    """Stride-1 square-kernel convolution with zero padding."""

    kind = "conv2d"
    has_params = True

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int = 3, padding: int | None = None):
        super().__init__(name)
        if in_channels < 1 or out_channels < 1 or kernel < 1:
            raise InvalidInput(f"{name}: channel counts and kernel must be positive")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.padding = self.kernel // 2 if padding is None else int(padding)

    def spec(self):
        return {
            **super().spec(),
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "padding": self.padding,
        }

    def param_shapes(self):
        k = self.kernel
        return {"W": (self.out_channels, self.in_channels, k, k), "b": (self.out_channels,)}

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise DimensionMismatch(f"{self.name}: expected ({self.in_channels}, H, W), got {in_shape}")
        _, h, w = in_shape
        ho = h + 2 * self.padding - self.kernel + 1
        wo = w + 2 * self.padding - self.kernel + 1
        if ho < 1 or wo < 1:
            raise DimensionMismatch(f"{self.name}: input {in_shape} too small for kernel")
        return (self.out_channels, ho, wo)

    def init_params(self, rng):
        fan_in = self.in_channels * self.kernel**2
        bound = 1.0 / math.sqrt(fan_in)
        shape = self.param_shapes()["W"]
        w = rng.child(self.name, "W").uniform(int(np.prod(shape)))
        b = rng.child(self.name, "b").uniform(self.out_channels)
        return {"W": (w * 2 - 1).reshape(shape) * math.sqrt(6.0) * bound, "b": (b * 2 - 1) * bound}

    def _conv(self, cols, w, n, ho, wo, b=None):
        y = cols @ w.reshape(self.out_channels, -1).T
        if b is not None:
            y = y + b
        return y.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def forward(self, x, p):
        if x.ndim != 4:
            raise DimensionMismatch(f"{self.name}: expected NCHW input, got {x.shape}")
        oc, ho, wo = self.out_shape(x.shape[1:])
        cols = _im2col(x, self.kernel, self.padding)
        cache = {"cols": cols, "x_shape": x.shape, "ho": ho, "wo": wo}
        return self._conv(cols, p["W"], x.shape[0], ho, wo, p["b"]), cache

    def _flat_dy(self, dy):
        return dy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)

    def backward(self, dy, p, cache):
        dyr = self._flat_dy(dy)
        wm = p["W"].reshape(self.out_channels, -1)
        dx = _col2im(dyr @ wm, cache["x_shape"], self.kernel, self.padding)
        return dx, {"W": (dyr.T @ cache["cols"]).reshape(p["W"].shape), "b": dyr.sum(axis=0)}

    def rforward(self, rx, p, v, cache):
        n, ho, wo = cache["x_shape"][0], cache["ho"], cache["wo"]
        ry = None
        if rx is not None:
            cache["rcols"] = _im2col(rx, self.kernel, self.padding)
            ry = self._conv(cache["rcols"], p["W"], n, ho, wo)
        if v is not None:
            ry = _add(ry, self._conv(cache["cols"], v["W"], n, ho, wo, v["b"]))
        return ry

    def rbackward(self, dy, rdy, p, v, cache, rx):
        dyr = self._flat_dy(dy)
        rdyr = None if rdy is None else self._flat_dy(rdy)
        rdcols = None if rdyr is None else rdyr @ p["W"].reshape(self.out_channels, -1)
        if v is not None:
            rdcols = _add(rdcols, dyr @ v["W"].reshape(self.out_channels, -1))
        rdx = None if rdcols is None else _col2im(rdcols, cache["x_shape"], self.kernel, self.padding)
        rdw = None if rdyr is None else rdyr.T @ cache["cols"]
        if rx is not None:
            rdw = _add(rdw, dyr.T @ cache["rcols"])
        rdw = np.zeros_like(p["W"]) if rdw is None else rdw.reshape(p["W"].shape)
        rdb = np.zeros_like(p["b"]) if rdyr is None else rdyr.sum(axis=0)
        return rdx, {"W": rdw, "b": rdb}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, p):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, p, mask):
        return dy * mask, {}

    def rforward(self, rx, p, v, mask):
        return None if rx is None else rx * mask

    def rbackward(self, dy, rdy, p, v, mask, rx):
        return (None if rdy is None else rdy * mask), {}


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise DimensionMismatch(f"{self.name}: needs (C, H, W) with even H and W, got {in_shape}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def forward(self, x, p):
        if x.ndim != 4:
            raise DimensionMismatch(f"{self.name}: expected NCHW input, got {x.shape}")
        self.out_shape(x.shape[1:])
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    @staticmethod
    def _gather(t, idx):
        n, c, h, w = t.shape
        win = t.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    @staticmethod
    def _scatter(dy, idx, shape):
        n, c, h, w = shape
        win = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(win, idx[..., None], dy[..., None], axis=-1)
        return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)

    def backward(self, dy, p, cache):
        idx, shape = cache
        return self._scatter(dy, idx, shape), {}

    def rforward(self, rx, p, v, cache):
        return None if rx is None else self._gather(rx, cache[0])

    def rbackward(self, dy, rdy, p, v, cache, rx):
        idx, shape = cache
        return (None if rdy is None else self._scatter(rdy, idx, shape)), {}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, p):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, p, shape):
        return dy.reshape(shape), {}

    def rforward(self, rx, p, v, shape):
        return None if rx is None else rx.reshape(rx.shape[0], -1)

    def rbackward(self, dy, rdy, p, v, shape, rx):
        return (None if rdy is None else rdy.reshape(shape)), {}


class ConcatChannels(Layer):
    """Joins two tensors along axis 1 (channels for images, features for vectors).

    Unlike the sequential kinds it takes a pair of inputs and returns a pair of
    input gradients.
    """

    kind = "concat_channels"

    def forward(self, xs, p=None):
        a, b = xs
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise DimensionMismatch(f"{self.name}: cannot concatenate {a.shape} and {b.shape}")
        return np.concatenate([a, b], axis=1), a.shape[1]

    def backward(self, dy, p, split):
        return (dy[:, :split], dy[:, split:]), {}

    def rforward(self, rxs, p, v, split):
        ra, rb = rxs
        if ra is None and rb is None:
            return None
        return (ra, rb)  # materialised by the caller, which knows the shapes

    def rbackward(self, dy, rdy, p, v, split, rx):
        if rdy is None:
            return (None, None), {}
        return (rdy[:, :split], rdy[:, split:]), {}


_KINDS: dict[str, type[Layer]] = {
    "dense": Dense,
    "conv2d": Conv2d,
    "relu": ReLU,
    "maxpool2x2": MaxPool2x2,
    "flatten": Flatten,
    "concat_channels": ConcatChannels,
}


def layer_from_spec(spec: dict[str, Any]) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in _KINDS:
        raise InvalidInput(f"unknown layer kind {kind!r}")
    return _KINDS[kind](**spec)
