"""The two-level TimeMachine forecaster with TTT (or SSM) sequence blocks.

Data flow for an input window x of shape (..., M, L)::

    x0, st = RevIN(x)
    u1 = Dropout(E1(x0))                        (..., M, n1)
    u2 = Dropout(E2(u1))                        (..., M, n2)
    level 2: P1(block1(u2) + block2(u2) + u2)   (..., M, n1)
    level 1: block3(u1) + block4(u1)            (..., M, n1)
    y = RevIN^-1(P2(concat(level1 + u1, level2)))   (..., M, T)

In mixing mode every block scans the M channel tokens.  In independence mode
each channel is its own length-1 sequence, and block 4 instead scans the n1
positions of a channel after a 1 -> 16 up-projection.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tt
from .config import dump_kv, from_kv, parse_kv, to_kv
from .errors import ConfigError, DataError, ModeError
from .layers import CONV_VARIANTS, LinearLayer, Module, RevIN, dropout_forward
from .ssm import SSMBlock
from .tensor import Tensor
from .ttt import TTTBlock, TTTConfig

MODES = ("mixing", "independence")
BLOCK_KINDS = ("TTT", "SSM")


@dataclass
class TimeMachineConfig:
    M: int
    L: int
    T: int
    n1: int = 64
    n2: int = 32
    mode: str = "mixing"
    block_kind: str = "TTT"
    conv_variant: str = "None"
    dropout: float = 0.1
    ci_width: int = 16
    f_kind: str = "Linear"
    eta: float = 0.1
    eta_learnable: bool = False
    view_mode: str = "identity"
    inner_steps: int = 1
    detach_inner: bool = False
    width_scaled_eta: bool = True
    ssm_state: int = 16
    ssm_selective: bool = True
    revin_affine: bool = True

    def __post_init__(self):
        if self.M < 1 or self.T < 1:
            raise ConfigError(f"need M >= 1 and T >= 1, got M={self.M}, T={self.T}")
        if self.L < 2:
            raise ConfigError(f"look-back must be >= 2, got {self.L}")
        if not self.n1 > self.n2 >= 1:
            raise ConfigError(f"embedding widths need n1 > n2 >= 1, got n1={self.n1}, n2={self.n2}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.block_kind not in BLOCK_KINDS:
            raise ConfigError(f"block_kind must be one of {BLOCK_KINDS}, got {self.block_kind!r}")
        if self.conv_variant not in CONV_VARIANTS:
            raise ConfigError(f"unknown conv variant {self.conv_variant!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.ci_width < 1:
            raise ConfigError("ci_width must be >= 1")

    def ttt_config(self, d) -> TTTConfig:
        return TTTConfig(
            d=d,
            f_kind=self.f_kind,
            eta=self.eta,
            eta_learnable=self.eta_learnable,
            view_mode=self.view_mode,
            conv_variant=self.conv_variant,
            detach_inner=self.detach_inner,
            inner_steps=self.inner_steps,
            width_scaled_eta=self.width_scaled_eta,
        )


class TimeMachine(Module):
    def __init__(self, cfg: TimeMachineConfig, seed: int = 0, block_init: str = "uniform"):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.revin = RevIN(cfg.M, cfg.revin_affine)
        self.E1 = LinearLayer(cfg.L, cfg.n1, rng)
        self.E2 = LinearLayer(cfg.n1, cfg.n2, rng)
        self.block1 = self._block(cfg.n2, rng, block_init)
        self.block2 = self._block(cfg.n2, rng, block_init)
        self.block3 = self._block(cfg.n1, rng, block_init)
        block4_width = cfg.n1 if cfg.mode == "mixing" else cfg.ci_width
        self.block4 = self._block(block4_width, rng, block_init)
        self.P1 = LinearLayer(cfg.n2, cfg.n1, rng)
        self.P2 = LinearLayer(2 * cfg.n1, cfg.T, rng)
        if cfg.mode == "independence":
            self.ci_up = LinearLayer(1, cfg.ci_width, rng)
            self.ci_down = LinearLayer(cfg.ci_width, 1, rng)

    def _block(self, d, rng, init):
        cfg = self.cfg
        if cfg.block_kind == "TTT":
            return TTTBlock(cfg.ttt_config(d), rng, init)
        return SSMBlock(d, cfg.ssm_state, cfg.ssm_selective, cfg.conv_variant, rng, init)

    def __call__(self, x, training=False, rng=None, aux=None):
        return model_forward(self, x, training, rng, aux)


def embed_two_level(model: TimeMachine, x0, training=False, rng=None):
    rate = model.cfg.dropout
    u1 = dropout_forward(rate, training, model.E1(x0), rng)
    u2 = dropout_forward(rate, training, model.E2(u1), rng)
    return u1, u2


def _per_channel(block, u, aux):
    """Run a block on each channel as its own one-token sequence."""
    seq = tt.reshape(u, u.shape[:-1] + (1, u.shape[-1]))
    out = block(seq, aux)
    return tt.reshape(out, u.shape)


def level2_forward(model: TimeMachine, u2, aux=None) -> Tensor:
    if model.cfg.mode == "mixing":
        v2 = model.block1(u2, aux) + model.block2(u2, aux) + u2
    else:
        v2 = _per_channel(model.block1, u2, aux) + _per_channel(model.block2, u2, aux) + u2
    return model.P1(v2)


def channel_independence_wrap(model: TimeMachine, block, u, aux=None, mode=None) -> Tensor:
    """Transpose each channel into n1 width-1 tokens, lift to 16, run block, project back."""
    mode = mode or model.cfg.mode
    if mode != "independence":
        raise ModeError(f"channel-independence wrap called in {mode!r} mode")
    u = tt.as_tensor(u)
    n1 = u.shape[-1]
    tokens = tt.swapaxes(tt.reshape(u, u.shape[:-1] + (1, n1)), -1, -2)
    lifted = model.ci_up(tokens)
    lowered = model.ci_down(block(lifted, aux))
    return tt.reshape(tt.swapaxes(lowered, -1, -2), u.shape)


def level1_forward(model: TimeMachine, u1, mode=None, aux=None) -> Tensor:
    mode = mode or model.cfg.mode
    if mode == "mixing":
        return model.block3(u1, aux) + model.block4(u1, aux)
    return _per_channel(model.block3, u1, aux) + channel_independence_wrap(model, model.block4, u1, aux, mode)


def model_forward(model: TimeMachine, x, training=False, rng=None, aux=None) -> Tensor:
    x = tt.as_tensor(x)
    cfg = model.cfg
    if x.ndim < 2 or x.shape[-2:] != (cfg.M, cfg.L):
        raise ConfigError(f"model expects (..., {cfg.M}, {cfg.L}) input, got {x.shape}")
    x0, state = model.revin.normalize(x)
    u1, u2 = embed_two_level(model, x0, training, rng)
    high = level1_forward(model, u1, aux=aux) + u1
    low = level2_forward(model, u2, aux)
    y = model.P2(tt.concat([high, low], axis=-1))
    return model.revin.denormalize(y, state)


def self_loss(model: TimeMachine, x) -> Tensor:
    """Mean pre-update TTT reconstruction loss over all blocks and tokens of the look-back."""
    if model.cfg.block_kind != "TTT":
        raise ConfigError("the self-supervised loss needs TTT blocks")
    aux: list = []
    model_forward(model, x, aux=aux)
    return tt.mean(tt.stack(aux))


# checkpoints ------------------------------------------------------------------

MANIFEST = "manifest.txt"
_HEADER = "# tmttt checkpoint v1\n"


def save_checkpoint(model: TimeMachine, directory) -> Path:
    """Write a text manifest plus one raw little-endian float64 file per tensor."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    lines = [_HEADER, dump_kv(to_kv(model.cfg, "config."))]
    for name, p in model.named_parameters():
        fname = f"tensors/{name}.f64"
        (directory / fname).write_bytes(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        shape = "x".join(str(s) for s in p.shape) or "scalar"
        lines.append(f"tensor.{name}={shape}:{fname}\n")
    (directory / MANIFEST).write_text("".join(lines))
    return directory


def load_checkpoint(directory) -> TimeMachine:
    directory = Path(directory)
    try:
        values = parse_kv((directory / MANIFEST).read_text(), str(directory / MANIFEST))
    except OSError as exc:
        raise DataError(f"cannot read checkpoint manifest in {directory}: {exc}") from exc
    cfg = from_kv(TimeMachineConfig, values, prefix="config.", strict=False)
    entries = {k[len("tensor."):]: v for k, v in values.items() if k.startswith("tensor.")}
    model = TimeMachine(cfg)
    named = dict(model.named_parameters())
    if set(named) != set(entries):
        missing = sorted(set(named) ^ set(entries))
        raise DataError(f"checkpoint tensors do not match the model: {missing[:5]}")
    for name, p in named.items():
        shape_text, fname = entries[name].split(":", 1)
        shape = () if shape_text == "scalar" else tuple(int(s) for s in shape_text.split("x"))
        if shape != p.shape:
            raise DataError(f"tensor {name}: manifest shape {shape} != model shape {p.shape}")
        raw = (directory / fname).read_bytes()
        if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
            raise DataError(f"tensor {name}: {len(raw)} bytes on disk for shape {shape}")
        p.data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return model
