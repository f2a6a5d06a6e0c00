"""Diagonal state-space block: recurrent and convolutional modes, plus selective parameters.

Continuous parameters (A, B) are discretized with a zero-order hold:
``Abar = exp(delta * A)``, ``Bbar = (exp(delta * A) - 1) / A * B``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ConfigError, DimensionError
from .layers import CONV_VARIANTS, HiddenConv, LayerNorm, LinearLayer, Module, param
from .tensor import Tensor

ZERO_A = 1e-15


@dataclass
class DiscretizedSSM:
    abar: np.ndarray
    bbar: np.ndarray

    @property
    def state_size(self):
        return self.abar.shape[-1]


def discretize(a_diag, b, delta: float) -> DiscretizedSSM:
    """Zero-order hold for a diagonal A; the A -> 0 limit gives Bbar = delta * B."""
    if not delta > 0:
        raise ConfigError(f"discretization step must be positive, got {delta}")
    a = np.asarray(tt.as_tensor(a_diag).data, dtype=np.float64).reshape(-1)
    b = np.asarray(tt.as_tensor(b).data, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"A has {a.size} entries but B has {b.size}")
    abar = np.exp(delta * a)
    small = np.abs(a) <= ZERO_A
    safe_a = np.where(small, 1.0, a)
    bbar = np.where(small, delta * b, np.expm1(delta * a) / safe_a * b)
    return DiscretizedSSM(abar, bbar)


def _scan(x, step):
    """Shared recurrence h_t = abar_t * h_{t-1} + bbar_t * x_t, y_t = <c_t, h_t>.

    ``x`` is (..., S, d) and ``step(t)`` returns (abar_t, bbar_t, c_t), each
    broadcastable to (..., d, N).
    """
    h = None
    outs = []
    for t in range(x.shape[-2]):
        abar, bbar, c = step(t)
        u = bbar * _col(x[..., t, :])
        h = u if h is None else abar * h + u
        outs.append(tt.tsum(h * c, axis=-1))
    return tt.stack(outs, axis=-2)


def _col(x):
    return tt.reshape(x, x.shape + (1,))


def ssm_recurrent_forward(disc: DiscretizedSSM, c, x) -> Tensor:
    """Run the LTI recurrence on a 1-D sequence x (S,) with h_0 = 0."""
    x = tt.as_tensor(x)
    c = tt.reshape(tt.as_tensor(c), (1, disc.state_size))
    abar, bbar = Tensor._wrap(disc.abar), Tensor._wrap(disc.bbar)
    y = _scan(tt.reshape(x, (x.shape[-1], 1)), lambda t: (abar, bbar, c))
    return tt.reshape(y, (x.shape[-1],))


def ssm_conv_kernel(disc: DiscretizedSSM, c, length: int) -> Tensor:
    """Taps K_j = sum_i C_i Abar_i^j Bbar_i for j < length."""
    if length < 1:
        raise ConfigError("kernel length must be >= 1")
    c = np.asarray(tt.as_tensor(c).data).reshape(-1)
    powers = disc.abar[None, :] ** np.arange(length)[:, None]
    return Tensor(powers @ (c * disc.bbar))


def ssm_conv_forward(disc: DiscretizedSSM, c, x) -> Tensor:
    """Causal convolution of x with the SSM kernel (independent of the recurrence)."""
    x = np.asarray(tt.as_tensor(x).data).reshape(-1)
    k = ssm_conv_kernel(disc, c, x.size).data
    return Tensor(np.convolve(x, k)[: x.size])


class SSMBlock(Module):
    """Pre-norm residual SSM block over (..., S, d); each feature channel runs the same SISO SSM."""

    def __init__(self, d, state_size=16, selective=True, conv_variant="None", rng=None, init="uniform", delta=0.1):
        if state_size < 1:
            raise ConfigError("state size must be >= 1")
        if conv_variant not in CONV_VARIANTS:
            raise ConfigError(f"unknown conv variant {conv_variant!r}")
        self.d = d
        self.N = state_size
        self.selective = selective
        zero = init == "zero" or rng is None
        a_init = 0.5 * np.arange(1, state_size + 1)
        self.A_raw = param(np.log(np.expm1(a_init)))
        self.B = param(np.ones((state_size, 1)) if zero else rng.uniform(0.5, 1.5, (state_size, 1)))
        self.C = param(np.zeros((1, state_size)) if zero else rng.normal(0, 1 / math.sqrt(state_size), (1, state_size)))
        self.delta_raw = param(math.log(math.expm1(delta)))
        if selective:
            self.s_B = LinearLayer(d, state_size, None if zero else rng)
            self.s_C = LinearLayer(d, state_size, None if zero else rng)
            self.s_delta = LinearLayer(d, 1, None if zero else rng)
        self.norm = LayerNorm(d)
        self.conv = HiddenConv(conv_variant, d, None if zero else rng, init="zero" if zero else "uniform")

    def a_diag(self) -> Tensor:
        return -tt.softplus(self.A_raw)

    def discretized(self) -> DiscretizedSSM:
        return discretize(self.a_diag().data, self.B.data, float(tt.softplus(self.delta_raw).data))

    def __call__(self, x, aux=None):
        x = tt.as_tensor(x)
        return x + self.sequence(self.conv(self.norm(x)))

    def sequence(self, x) -> Tensor:
        x = tt.as_tensor(x)
        if x.shape[-1] != self.d:
            raise DimensionError(f"SSM block width {self.d} does not match input shape {x.shape}")
        a = self.a_diag()
        if not self.selective:
            delta = tt.softplus(self.delta_raw)
            abar = tt.exp(delta * a)
            bbar = tt.expm1(delta * a) / a * tt.reshape(self.B, (self.N,))
            c = tt.reshape(self.C, (self.N,))
            return _scan(x, lambda t: (abar, bbar, c))

        def step(t):
            b_t, c_t, delta_t = selective_params(self, x[..., t, :])
            da = delta_t * a
            abar = tt.exp(da)
            bbar = tt.expm1(da) / a * b_t
            return _unsqueeze(abar), _unsqueeze(bbar), _unsqueeze(c_t)

        return _scan(x, step)


def _unsqueeze(v):
    return tt.reshape(v, v.shape[:-1] + (1, v.shape[-1]))


def selective_params(block: SSMBlock, x_t):
    """Input-dependent (B_t, C_t, delta_t); delta_t has a trailing axis of 1 to broadcast over states."""
    x_t = tt.as_tensor(x_t)
    b_t = block.s_B(x_t)
    c_t = block.s_C(x_t)
    delta_t = tt.softplus(block.delta_raw + block.s_delta(x_t))
    return b_t, c_t, delta_t
