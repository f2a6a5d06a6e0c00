"""Layer primitives: linear, layer norm, dropout, RevIN / z-score, attention, conv hidden layers.

All normalizers use the population (biased) variance.  Layers hold their
learnable tensors as attributes flagged ``param=True``; :class:`Module`
discovers them in attribute-insertion order so parameter order is stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ConfigError, DimensionError
from .tensor import Tensor

STD_FLOOR = 1e-5
LN_EPS = 1e-5

CONV_VARIANTS = ("None", "Conv3", "Conv5", "Stack3", "Stack5", "Inception", "ModernTCN")
MODERN_TCN_WIDTH = 16


def param(data, name=None) -> Tensor:
    return Tensor(data, param=True, name=name)


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal parameter container."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.param:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor) and item.param:
                        yield f"{prefix}{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


# linear ----------------------------------------------------------------------

class LinearLayer(Module):
    """y = x W^T + b over the last axis; W is (out, in)."""

    def __init__(self, n_in, n_out, rng=None, init="uniform", bias=True):
        if init == "zero" or rng is None:
            w = np.zeros((n_out, n_in))
        else:
            w = uniform_init(rng, (n_out, n_in), n_in)
        self.W = param(w)
        self.b = param(np.zeros(n_out)) if bias else None
        self.n_in = n_in
        self.n_out = n_out

    def __call__(self, x):
        return linear_forward(self, x)


def linear_forward(layer: LinearLayer, x) -> Tensor:
    x = tt.as_tensor(x)
    if x.shape[-1] != layer.n_in:
        raise DimensionError(f"linear layer expects last extent {layer.n_in}, got input shape {x.shape}")
    if x.ndim == 1:
        y = tt.reshape(tt.matmul(tt.reshape(x, (1, layer.n_in)), layer.W.T), (layer.n_out,))
    else:
        y = tt.matmul(x, layer.W.T)
    return y if layer.b is None else y + layer.b


# normalization -------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    x = tt.as_tensor(x)
    centered = x - tt.mean(x, axis=-1, keepdims=True)
    var = tt.mean(centered * centered, axis=-1, keepdims=True)
    return centered / tt.sqrt(var + eps) * gamma + beta


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta)


def dropout_forward(rate: float, training: bool, x, rng=None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = tt.as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


@dataclass
class RevINState:
    mean: np.ndarray
    std: np.ndarray
    gamma: Tensor | None = None
    beta: Tensor | None = None

    @property
    def channels(self):
        return self.mean.shape[-2]


def _window_stats(data):
    if data.shape[-1] < 2:
        raise DimensionError(f"normalization needs a window of length >= 2, got shape {data.shape}")
    mean = data.mean(axis=-1, keepdims=True)
    std = np.sqrt(((data - mean) ** 2).mean(axis=-1, keepdims=True))
    return mean, np.maximum(std, STD_FLOOR)


def revin_normalize(x, gamma=None, beta=None):
    """Per-instance, per-channel normalization over the last (time) axis.

    ``x`` is (..., M, L).  Statistics are treated as constants for
    differentiation.  ``gamma``/``beta`` are optional per-channel affine tensors.
    """
    x = tt.as_tensor(x)
    mean, std = _window_stats(x.data)
    x0 = (x - mean) / std
    if gamma is not None:
        x0 = x0 * tt.reshape(gamma, (-1, 1)) + tt.reshape(beta, (-1, 1))
    return x0, RevINState(mean, std, gamma, beta)


def revin_denormalize(y, state: RevINState) -> Tensor:
    y = tt.as_tensor(y)
    if y.ndim < 2 or y.shape[-2] != state.channels:
        raise DimensionError(f"denormalize got shape {y.shape} for a state with {state.channels} channels")
    if state.gamma is not None:
        y = (y - tt.reshape(state.beta, (-1, 1))) / tt.reshape(state.gamma, (-1, 1))
    return y * state.std + state.mean


class RevIN(Module):
    def __init__(self, channels, affine=True):
        self.affine = affine
        if affine:
            self.gamma = param(np.ones(channels))
            self.beta = param(np.zeros(channels))

    def normalize(self, x):
        if self.affine:
            return revin_normalize(x, self.gamma, self.beta)
        return revin_normalize(x)

    def denormalize(self, y, state):
        return revin_denormalize(y, state)


def zscore_normalize(x) -> Tensor:
    """Per-channel z-score over the window (no learnable affine, not inverted)."""
    x = tt.as_tensor(x)
    mean, std = _window_stats(x.data)
    return (x - mean) / std


# attention -------------------------------------------------------------------------

def attention_single_head(q, k, v, return_weights=False):
    """softmax(Q K^T / sqrt(d)) V for (n, d) inputs (leading batch axes allowed)."""
    q, k, v = tt.as_tensor(q), tt.as_tensor(k), tt.as_tensor(v)
    if not (q.shape[-1] == k.shape[-1] == v.shape[-1]) or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes disagree: Q {q.shape}, K {k.shape}, V {v.shape}")
    scaled = q * (1.0 / math.sqrt(q.shape[-1]))
    weights = tt.softmax(tt.matmul(scaled, k.T), axis=-1)
    out = tt.matmul(weights, v)
    return (out, weights) if return_weights else out


class AttentionBlock(Module):
    """Single-head self-attention with Q/K/V projections (baseline for scaling only)."""

    def __init__(self, d, rng):
        self.q = LinearLayer(d, d, rng, bias=False)
        self.k = LinearLayer(d, d, rng, bias=False)
        self.v = LinearLayer(d, d, rng, bias=False)

    def __call__(self, x):
        return attention_single_head(self.q(x), self.k(x), self.v(x))


# convolutional hidden layers ----------------------------------------------------------

class HiddenConv(Module):
    """Residual convolutional pre-layer: y = x + variant(x), convolving along tokens.

    Input is (..., S, d); every variant preserves that shape.  Depthwise
    kernels act per feature; Inception and ModernTCN add pointwise layers.
    """

    def __init__(self, tag, d, rng=None, init="uniform"):
        if tag not in CONV_VARIANTS:
            raise ConfigError(f"unknown conv variant {tag!r}; expected one of {CONV_VARIANTS}")
        self.tag = tag
        self.d = d
        zero = init == "zero" or rng is None

        def kernel(k):
            return param(np.zeros((d, k)) if zero else uniform_init(rng, (d, k), k))

        def pointwise(n_in, n_out):
            return LinearLayer(n_in, n_out, None if zero else rng)

        if tag in ("Conv3", "Conv5"):
            self.kernels = [kernel(int(tag[-1]))]
        elif tag == "Stack3":
            self.kernels = [kernel(3), kernel(3)]
        elif tag == "Stack5":
            self.kernels = [kernel(5), kernel(3)]
        elif tag == "Inception":
            self.k5 = kernel(5)
            self.k3 = kernel(3)
            self.reduce = pointwise(2 * d, d)
        elif tag == "ModernTCN":
            self.dw = kernel(3)
            self.expand = pointwise(d, MODERN_TCN_WIDTH)
            self.contract = pointwise(MODERN_TCN_WIDTH, d)

    def __call__(self, x):
        return hidden_conv_forward(self, x)

    def branch(self, x):
        """The variant's contribution, without the residual."""
        tag = self.tag
        xt = tt.swapaxes(x, -1, -2)
        if tag in ("Conv3", "Conv5", "Stack3", "Stack5"):
            for k in self.kernels:
                xt = tt.conv1d_depthwise_same(xt, k)
            return tt.swapaxes(xt, -1, -2)
        if tag == "Inception":
            both = tt.concat([tt.conv1d_depthwise_same(xt, self.k5), tt.conv1d_depthwise_same(xt, self.k3)], axis=-2)
            return self.reduce(tt.swapaxes(both, -1, -2))
        h = tt.swapaxes(tt.conv1d_depthwise_same(xt, self.dw), -1, -2)
        return self.contract(tt.gelu(self.expand(h)))


def hidden_conv_forward(variant: HiddenConv, x) -> Tensor:
    x = tt.as_tensor(x)
    if variant is None or variant.tag == "None":
        return x
    if x.shape[-1] != variant.d:
        raise DimensionError(f"conv variant built for width {variant.d}, got input shape {x.shape}")
    return x + variant.branch(x)
