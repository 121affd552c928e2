"""Channels-last layers with hand-written backward passes.

Every layer caches what its backward pass needs during ``forward`` and
writes parameter gradients into ``self.grads`` (accumulating, so call
``zero_grad`` between steps).  Arrays are float64 throughout.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NoForwardState, ShapeMismatch


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def spec(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, train: bool = True):
        return self.forward(x, train)

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _take_cache(self):
        if self._cache is None:
            raise NoForwardState(f"{self.kind}: backward called without a forward pass")
        return self._cache

    def _add_grad(self, name, value):
        if name in self.grads:
            self.grads[name] += value
        else:
            self.grads[name] = value.copy()


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Layer):
    """2-D convolution on (N, H, W, C) input; weights stored as (kh, kw, C, F)."""

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, rng=None, bias=True):
        super().__init__()
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        sh, sw = (stride, stride) if np.isscalar(stride) else stride
        if padding is None:
            padding = (kh // 2, kw // 2)
        ph, pw = (padding, padding) if np.isscalar(padding) else padding
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride, self.padding = (int(kh), int(kw)), (int(sh), int(sw)), (int(ph), int(pw))
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = kh * kw * in_ch
        self.params["weight"] = he_uniform(rng, (kh, kw, in_ch, out_ch), fan_in)
        if bias:
            self.params["bias"] = np.zeros(out_ch)
        self.zero_grad()

    def spec(self):
        return {
            "kind": self.kind,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
        }

    def output_size(self, h, w):
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[-1] != self.in_ch:
            raise ShapeMismatch(f"{self.kind} expects (N, H, W, {self.in_ch}), got {x.shape}")
        n, h, w, c = x.shape
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        ho, wo = self.output_size(h, w)
        if ho <= 0 or wo <= 0:
            raise ShapeMismatch(f"input {h}x{w} too small for kernel {kh}x{kw}")
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
        # (N, ho, wo, C, kh, kw) -> rows ordered (kh, kw, C) to match the weight layout
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
        wm = self.params["weight"].reshape(kh * kw * c, self.out_ch)
        out = cols @ wm
        if "bias" in self.params:
            out += self.params["bias"]
        self._cache = (cols, x.shape, xp.shape, ho, wo)
        return out.reshape(n, ho, wo, self.out_ch)

    def backward(self, g):
        cols, xshape, xpshape, ho, wo = self._take_cache()
        n, h, w, c = xshape
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        gm = g.reshape(n * ho * wo, self.out_ch)
        self._add_grad("weight", (cols.T @ gm).reshape(self.params["weight"].shape))
        if "bias" in self.params:
            self._add_grad("bias", gm.sum(axis=0))
        dcols = (gm @ self.params["weight"].reshape(kh * kw * c, self.out_ch).T).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros(xpshape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += dcols[:, :, :, i, j]
        return dxp[:, ph : ph + h, pw : pw + w]


class Conv1d(Conv2d):
    """1-D convolution over (N, T, C) sequences."""

    kind = "conv1d"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, rng=None, bias=True):
        if padding is None:
            padding = kernel // 2
        super().__init__(in_ch, out_ch, (1, kernel), (1, stride), (0, padding), rng=rng, bias=bias)

    def spec(self):
        return {
            "kind": self.kind,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "kernel": self.kernel[1],
            "stride": self.stride[1],
            "padding": self.padding[1],
        }

    def output_length(self, t):
        return self.output_size(1, t)[1]

    def forward(self, x, train=True):
        if x.ndim != 3:
            raise ShapeMismatch(f"conv1d expects (N, T, C), got {x.shape}")
        return super().forward(x[:, None], train)[:, 0]

    def backward(self, g):
        return super().backward(g[:, None])[:, 0]


class BatchNorm(Layer):
    """Normalizes over every axis except the trailing channel axis.

    Train mode uses batch statistics and updates running estimates with
    ``running = (1 - momentum) * running + momentum * batch``; eval mode is a
    fixed affine map.  Backward is available after either mode.
    """

    kind = "batchnorm"

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = int(channels), float(momentum), float(eps)
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.zero_grad()

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=True):
        if x.shape[-1] != self.channels:
            raise ShapeMismatch(f"batchnorm expects {self.channels} channels, got {x.shape}")
        axes = tuple(range(x.ndim - 1))
        if train:
            m = x.size // self.channels
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            unbiased = var * m / max(m - 1, 1)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, train, axes)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, g):
        xhat, inv, train, axes = self._take_cache()
        self._add_grad("gamma", (g * xhat).sum(axis=axes))
        self._add_grad("beta", g.sum(axis=axes))
        dxhat = g * self.params["gamma"]
        if not train:
            return dxhat * inv
        m = g.size // self.channels
        return (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=True):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, g):
        return g * self._take_cache()


class Linear(Layer):
    """Fully connected layer, ``y = x @ W + b`` with W of shape (in, out)."""

    kind = "fc"

    def __init__(self, in_features, out_features, rng=None, zero_init=False):
        super().__init__()
        self.in_features, self.out_features = int(in_features), int(out_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        if zero_init:
            self.params["weight"] = np.zeros((in_features, out_features))
        else:
            self.params["weight"] = he_uniform(rng, (in_features, out_features), in_features)
        self.params["bias"] = np.zeros(out_features)
        self.zero_grad()

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}

    def forward(self, x, train=True):
        if x.shape[-1] != self.in_features:
            raise ShapeMismatch(f"fc expects {self.in_features} features, got {x.shape}")
        self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, g):
        x = self._take_cache()
        self._add_grad("weight", x.reshape(-1, self.in_features).T @ g.reshape(-1, self.out_features))
        self._add_grad("bias", g.reshape(-1, self.out_features).sum(axis=0))
        return g @ self.params["weight"].T


class GlobalAvgPool(Layer):
    """Mean over all axes between batch and channels."""

    kind = "gap"

    def forward(self, x, train=True):
        self._cache = x.shape
        return x.mean(axis=tuple(range(1, x.ndim - 1)))

    def backward(self, g):
        shape = self._take_cache()
        count = int(np.prod(shape[1:-1]))
        expand = g.reshape((shape[0],) + (1,) * (len(shape) - 2) + (shape[-1],))
        return np.broadcast_to(expand / count, shape).copy()


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)

    def spec(self):
        return {"kind": self.kind, "layers": [layer.spec() for layer in self.layers]}

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_layers(self, prefix="") -> Iterator[tuple[str, Layer]]:
        for i, layer in enumerate(self.layers):
            name = f"{prefix}{i}"
            if isinstance(layer, Sequential):
                yield from layer.named_layers(name + ".")
            else:
                yield name, layer


def conv_bn_relu(in_ch, out_ch, kernel=3, stride=1, rng=None, dims=2) -> list[Layer]:
    conv = Conv2d if dims == 2 else Conv1d
    return [conv(in_ch, out_ch, kernel, stride, rng=rng, bias=False), BatchNorm(out_ch), ReLU()]
