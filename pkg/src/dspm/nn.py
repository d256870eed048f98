"""Tiny layer toolkit over diffcore: parameter registry, conv blocks.

Modules discover children and parameters from attribute insertion order, so
checkpoint tensor names are stable across runs.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc


class Module:
    """Base with recursive parameter/state collection and a training flag."""

    def __init__(self):
        self.training = True

    def _entries(self):
        for name, v in self.__dict__.items():
            if name.startswith("_") or name == "training":
                continue
            yield name, v

    def children(self):
        for name, v in self._entries():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, u in enumerate(v):
                    if isinstance(u, Module):
                        yield f"{name}.{i}", u

    def set_training(self, flag):
        self.training = flag
        for _, c in self.children():
            c.set_training(flag)

    def named_params(self, prefix=""):
        out = {}
        for name, v in self._entries():
            if isinstance(v, dc.Array) and v.requires_grad:
                out[prefix + name] = v
        for name, c in self.children():
            out.update(c.named_params(prefix + name + "."))
        return out

    def named_state(self, prefix=""):
        out = {}
        for name, v in self._entries():
            if isinstance(v, np.ndarray):
                out[prefix + name] = v
        for name, c in self.children():
            out.update(c.named_state(prefix + name + "."))
        return out

    def load_tensors(self, tensors, prefix=""):
        """Copy checkpoint values into parameters and state buffers."""
        params = self.named_params(prefix)
        state = self.named_state(prefix)
        for name, arr in params.items():
            if name not in tensors:
                raise KeyError(f"checkpoint is missing parameter {name}")
            if tensors[name].shape != arr.data.shape:
                raise ValueError(f"shape mismatch for {name}: {tensors[name].shape} vs {arr.data.shape}")
            arr.data[...] = tensors[name]
        for name, buf in state.items():
            if name in tensors:
                buf[...] = tensors[name]


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, bias=True, weight_scale=1.0,
                 spatial_zero_mean=False):
        super().__init__()
        std = weight_scale * math.sqrt(2.0 / (cin * k * k))
        w = rng.standard_normal((cout, cin, k, k)) * std
        if spatial_zero_mean and k > 1:
            # derivative-style taps: no response to per-channel-constant
            # patches, which is the right prior for matching features
            w -= w.mean(axis=(2, 3), keepdims=True)
        self.weight = dc.Array(w.astype(np.float32), requires_grad=True)
        self.bias = dc.Array(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None
        self._stride = stride
        self._cout = cout

    def __call__(self, x):
        y = dc.conv2d(x, self.weight, stride=self._stride)
        if self.bias is not None:
            bshape = (1, self._cout, 1, 1) if y.data.ndim == 4 else (self._cout, 1, 1)
            y = dc.add(y, dc.reshape(self.bias, bshape))
        return y


class Conv3d(Module):
    def __init__(self, cin, cout, k, rng, bias=True, weight_scale=1.0):
        super().__init__()
        k = k if isinstance(k, tuple) else (k, k, k)
        std = weight_scale * math.sqrt(2.0 / (cin * k[0] * k[1] * k[2]))
        self.weight = dc.Array((rng.standard_normal((cout, cin) + k) * std).astype(np.float32),
                               requires_grad=True)
        self.bias = dc.Array(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None
        self._cout = cout

    def __call__(self, x):
        y = dc.conv3d(x, self.weight)
        if self.bias is not None:
            bshape = (1, self._cout, 1, 1, 1) if y.data.ndim == 5 else (self._cout, 1, 1, 1)
            y = dc.add(y, dc.reshape(self.bias, bshape))
        return y


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.gamma = dc.Array(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = dc.Array(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self._momentum = momentum
        self._eps = eps

    def __call__(self, x):
        return dc.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=self.training, momentum=self._momentum, eps=self._eps)


class CBL(Module):
    """Conv + batch norm + leaky ReLU (slope 0.1)."""

    def __init__(self, cin, cout, k, rng, stride=1, spatial_zero_mean=False):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, bias=False,
                           spatial_zero_mean=spatial_zero_mean)
        self.bn = BatchNorm(cout)

    def __call__(self, x):
        return dc.leaky_relu(self.bn(self.conv(x)), slope=0.1)


class ChannelStandardize(Module):
    """Per-image, per-channel standardization with a learnable affine.

    Unlike batch norm this uses each image's own spatial statistics in both
    training and inference, so features stay exactly zero mean per view,
    the regime dot-product matching needs.
    """

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.gamma = dc.Array(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = dc.Array(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self._eps = eps

    def __call__(self, x):
        nd = x.data.ndim
        axes = (nd - 2, nd - 1)
        bshape = (1,) * (nd - 3) + (x.data.shape[-3], 1, 1)
        m = dc.reduce_mean(x, axis=axes, keepdims=True)
        centered = dc.sub(x, m)
        var = dc.reduce_mean(dc.mul(centered, centered), axis=axes, keepdims=True)
        inv = dc.div(1.0, dc.exp(dc.mul(dc.log(dc.add(var, self._eps)), 0.5)))
        out = dc.mul(centered, inv)
        return dc.add(dc.mul(out, dc.reshape(self.gamma, bshape)), dc.reshape(self.beta, bshape))


class CS(Module):
    """Conv + per-image channel standardization, no activation."""

    def __init__(self, cin, cout, k, rng, stride=1, spatial_zero_mean=False):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, bias=False,
                           spatial_zero_mean=spatial_zero_mean)
        self.norm = ChannelStandardize(cout)

    def __call__(self, x):
        return self.norm(self.conv(x))
