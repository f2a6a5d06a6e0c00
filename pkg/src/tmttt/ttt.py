"""Test-time-training sequence block.

The hidden state is a small model ``f`` (linear, or a d -> 4d -> d GELU MLP)
whose weights are updated by one gradient step per token on the
reconstruction loss ``||f(view(x_t); W) - x_t||^2``.  The output at token t is
``f(x_t; W_t)`` with ``W_t`` already updated on ``x_t``.

The inner gradient is written out analytically with tape operations, so the
outer optimizer can differentiate through every inner step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ConfigError, DimensionError
from .layers import CONV_VARIANTS, HiddenConv, LayerNorm, Module, param, uniform_init
from .tensor import Tensor

F_KINDS = ("Linear", "MLP")
VIEW_MODES = ("identity", "learned_projection")


@dataclass
class TTTConfig:
    d: int
    f_kind: str = "Linear"
    eta: float = 0.1
    eta_learnable: bool = False
    view_mode: str = "identity"
    conv_variant: str = "None"
    detach_inner: bool = False
    inner_steps: int = 1
    width_scaled_eta: bool = True

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError(f"token width must be >= 1, got {self.d}")
        if self.f_kind not in F_KINDS:
            raise ConfigError(f"f_kind must be one of {F_KINDS}, got {self.f_kind!r}")
        if self.view_mode not in VIEW_MODES:
            raise ConfigError(f"view_mode must be one of {VIEW_MODES}, got {self.view_mode!r}")
        if self.conv_variant not in CONV_VARIANTS:
            raise ConfigError(f"unknown conv variant {self.conv_variant!r}")
        if self.eta < 0 or (self.eta_learnable and self.eta <= 0):
            raise ConfigError(f"inner learning rate must be >= 0 (> 0 when learnable), got {self.eta}")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")

    @property
    def mlp_hidden(self):
        return 4 * self.d


@dataclass
class TTTFastState:
    """Fast weights: (W, b) for Linear, (W1, b1, W2, b2) for MLP; may carry batch axes."""

    weights: tuple
    kind: str = "Linear"

    @property
    def width(self):
        return self.weights[0].shape[-1]


def _col(x):
    return tt.reshape(x, x.shape + (1,))


def _row(x):
    return tt.reshape(x, x.shape[:-1] + (1, x.shape[-1]))


def _apply(w, x):
    """Batched matrix-vector product: (..., m, n) with (..., n) -> (..., m)."""
    y = tt.matmul(w, _col(x))
    return tt.reshape(y, y.shape[:-1])


def fast_forward(state: TTTFastState, x) -> Tensor:
    """f(x; W)."""
    x = tt.as_tensor(x)
    if x.shape[-1] != state.width:
        raise DimensionError(f"fast weights expect width {state.width}, got input shape {x.shape}")
    if state.kind == "Linear":
        w, b = state.weights
        return _apply(w, x) + b
    w1, b1, w2, b2 = state.weights
    return _apply(w2, tt.gelu(_apply(w1, x) + b1)) + b2


def make_view(x, theta_k=None) -> Tensor:
    x = tt.as_tensor(x)
    return x if theta_k is None else _apply(theta_k, x)


def inner_loss(state: TTTFastState, x, theta_k=None) -> Tensor:
    """Squared reconstruction error of x from its view; one value per leading index."""
    x = tt.as_tensor(x)
    if x.shape[-1] != state.width:
        raise DimensionError(f"fast weights expect width {state.width}, got input shape {x.shape}")
    r = fast_forward(state, make_view(x, theta_k)) - x
    return tt.tsum(r * r, axis=-1)


def _loss_and_grad(state: TTTFastState, x, theta_k, want_loss):
    x = tt.as_tensor(x)
    if x.shape[-1] != state.width:
        raise DimensionError(f"fast weights expect width {state.width}, got input shape {x.shape}")
    xv = make_view(x, theta_k)
    if state.kind == "Linear":
        w, b = state.weights
        r = _apply(w, xv) + b - x
        g = 2.0 * r
        grads = (tt.matmul(_col(g), _row(xv)), g)
    else:
        w1, b1, w2, b2 = state.weights
        h = _apply(w1, xv) + b1
        a = tt.gelu(h)
        r = _apply(w2, a) + b2 - x
        g = 2.0 * r
        gh = _apply(tt.swapaxes(w2, -1, -2), g) * tt.gelu_prime(h)
        grads = (tt.matmul(_col(gh), _row(xv)), gh, tt.matmul(_col(g), _row(a)), g)
    loss = tt.tsum(r * r, axis=-1) if want_loss else None
    return loss, grads


def inner_grad(state: TTTFastState, x, theta_k=None) -> tuple:
    """Analytic gradient of :func:`inner_loss` w.r.t. each fast weight."""
    return _loss_and_grad(state, x, theta_k, False)[1]


def inner_step(state: TTTFastState, x, eta, theta_k=None, detach=False, loss_out=None) -> TTTFastState:
    """One gradient-descent step W <- W - eta * grad on the reconstruction loss.

    When ``loss_out`` is a list, the pre-step loss is appended to it.
    """
    if not isinstance(eta, Tensor) and eta < 0:
        raise ConfigError(f"inner learning rate must be >= 0, got {eta}")
    loss, grads = _loss_and_grad(state, x, theta_k, loss_out is not None)
    if loss_out is not None:
        loss_out.append(loss)
    if detach:
        grads = tuple(tt.detach(g) for g in grads)
    new = tuple(w - eta * g for w, g in zip(state.weights, grads))
    return TTTFastState(new, state.kind)


class TTTBlock(Module):
    """Pre-norm residual block: Y = X + scan(conv(layer_norm(X)))."""

    def __init__(self, cfg: TTTConfig, rng=None, init="uniform"):
        self.cfg = cfg
        d = cfg.d
        zero = init == "zero" or rng is None

        def fast(shape, fan_in):
            return param(np.zeros(shape) if zero else uniform_init(rng, shape, fan_in))

        if cfg.f_kind == "Linear":
            self.W0 = fast((d, d), d)
            self.b0 = param(np.zeros(d))
        else:
            hid = cfg.mlp_hidden
            self.W1 = fast((hid, d), d)
            self.b1 = param(np.zeros(hid))
            self.W2 = fast((d, hid), hid)
            self.b2 = param(np.zeros(d))
        if cfg.view_mode == "learned_projection":
            self.theta_K = param(np.eye(d))
        else:
            self.theta_K = None
        if cfg.eta_learnable:
            # softplus keeps the step positive
            self.eta_raw = param(math.log(math.expm1(cfg.eta)))
        self.norm = LayerNorm(d)
        self.conv = HiddenConv(cfg.conv_variant, d, None if zero else rng, init="zero" if zero else "uniform")

    def initial_state(self) -> TTTFastState:
        if self.cfg.f_kind == "Linear":
            return TTTFastState((self.W0, self.b0), "Linear")
        return TTTFastState((self.W1, self.b1, self.W2, self.b2), "MLP")

    def eta(self):
        """Step size actually used by the scan.

        With ``width_scaled_eta`` the configured rate is divided by d: a
        layer-normed token has squared norm about d, so a plain step of 0.1
        would overshoot for any d > 5.
        """
        eta = tt.softplus(self.eta_raw) if self.cfg.eta_learnable else self.cfg.eta
        return eta * (1.0 / self.cfg.d) if self.cfg.width_scaled_eta else eta

    def __call__(self, x, aux=None):
        return ttt_block_forward(self, self.cfg, x, aux)


def ttt_sequence_forward(block: TTTBlock, cfg: TTTConfig, X, aux=None) -> Tensor:
    """Left-to-right scan over the token axis (-2) of X (..., S, d).

    ``aux``, if given, receives the mean pre-update inner loss of every token.
    """
    X = tt.as_tensor(X)
    if X.shape[-1] != cfg.d:
        raise DimensionError(f"block width {cfg.d} does not match input shape {X.shape}")
    state = block.initial_state()
    eta = block.eta()
    losses = [] if aux is not None else None
    outs = []
    for t in range(X.shape[-2]):
        x_t = X[..., t, :]
        for _ in range(cfg.inner_steps):
            state = inner_step(state, x_t, eta, block.theta_K, cfg.detach_inner, losses)
        outs.append(fast_forward(state, x_t))
    if aux is not None:
        aux.extend(tt.mean(l) for l in losses)
    return tt.stack(outs, axis=-2)


def ttt_block_forward(block: TTTBlock, cfg: TTTConfig, X, aux=None) -> Tensor:
    X = tt.as_tensor(X)
    h = block.conv(block.norm(X))
    return X + ttt_sequence_forward(block, cfg, h, aux)
