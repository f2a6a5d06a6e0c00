"""Finite-difference checks of every differentiable building block, small enough to run in seconds."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as tt
from .layers import (
    CONV_VARIANTS,
    AttentionBlock,
    HiddenConv,
    LayerNorm,
    LinearLayer,
    RevIN,
)
from .model import TimeMachine, TimeMachineConfig
from .ssm import SSMBlock
from .ttt import TTTBlock, TTTConfig

TOLERANCE = 1e-4


def _case(module, x, rng, call=None) -> tuple[Callable, list]:
    """Scalar read-out with random weights so no gradient vanishes by symmetry."""
    call = call or module
    w = rng.uniform(-1, 1, np.shape(call(x).data))
    def f():
        y = call(x)
        return tt.tsum(y * w) + 0.5 * tt.mean(y * y)
    return f, module.parameters()


def _perturb(module, rng, scale=0.3):
    """Move every parameter off its (often degenerate) initial value."""
    for p in module.parameters():
        p.data = p.data + rng.uniform(-scale, scale, p.shape)
    return module


def oracle_cases(seed=0) -> dict:
    rng = np.random.default_rng(seed)
    x8 = rng.uniform(-1, 1, (5, 4))
    cases = {}
    cases["linear"] = _case(LinearLayer(4, 3, rng), x8, rng)
    cases["layer_norm"] = _case(_perturb(LayerNorm(4), rng), x8, rng)
    rev = _perturb(RevIN(5), rng)
    cases["revin"] = _case(rev, rng.uniform(-1, 1, (5, 6)), rng,
                           call=lambda x: rev.denormalize(tt.tanh(rev.normalize(x)[0]), rev.normalize(x)[1]))
    att = AttentionBlock(4, rng)
    cases["attention"] = _case(att, x8, rng)
    for tag in CONV_VARIANTS[1:]:
        cases[f"conv_{tag}"] = _case(HiddenConv(tag, 4, rng), rng.uniform(-1, 1, (7, 4)), rng)
    seq = rng.uniform(-1, 1, (6, 4))
    cases["ttt_linear_scan"] = _case(_perturb(TTTBlock(TTTConfig(4, eta=0.5), rng), rng), seq, rng)
    cases["ttt_mlp_scan"] = _case(_perturb(TTTBlock(TTTConfig(3, f_kind="MLP", eta=0.5), rng), rng), seq[:, :3], rng)
    cases["ttt_learned_eta_view_conv"] = _case(
        _perturb(TTTBlock(TTTConfig(4, eta=0.5, eta_learnable=True, view_mode="learned_projection",
                                    conv_variant="Conv3", inner_steps=2), rng), rng, 0.1), seq, rng)
    cases["ssm_selective"] = _case(_perturb(SSMBlock(4, 3, True, rng=rng), rng, 0.1), seq, rng)
    cases["ssm_lti"] = _case(_perturb(SSMBlock(4, 3, False, rng=rng), rng, 0.1), seq, rng)
    for mode in ("mixing", "independence"):
        cfg = TimeMachineConfig(M=2, L=8, T=4, n1=8, n2=4, mode=mode, dropout=0.0)
        model = _perturb(TimeMachine(cfg, seed=seed), rng, 0.05)
        cases[f"model_{mode}"] = _case(model, rng.uniform(-1, 1, (2, 8)), rng)
    return cases


def run_oracles(seed=0, eps=1e-5, names=None) -> dict:
    """Name -> max relative error for each case (``names`` filters by prefix)."""
    out = {}
    for name, (f, params) in oracle_cases(seed).items():
        if names and not any(name.startswith(n) for n in names):
            continue
        out[name] = tt.grad_check(f, params, eps)
    return out
