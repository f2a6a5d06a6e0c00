"""Outer-loop training, evaluation metrics, multi-seed aggregation, gradient probes
and per-window test-time adaptation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tt
from .data import WindowedDataset
from .errors import ConfigError, DataError, OptimizerError
from .model import TimeMachine, model_forward, self_loss
from .tensor import Tape, Tensor, backward


# optimizer ------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params, grads) -> AdamState:
    """Bias-corrected Adam; parameters get fresh arrays so earlier snapshots stay valid."""
    params = list(params)
    for p in params:
        if p not in grads:
            raise OptimizerError(f"no gradient for parameter {p.name or tuple(p.shape)}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p in params:
        g = grads[p]
        key = id(p)
        m = state.m.get(key, 0.0)
        v = state.v.get(key, 0.0)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[key], state.v[key] = m, v
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def clip_global_norm(grads, params, max_norm):
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(grads[p] ** 2)) for p in params))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        for p in params:
            grads[p] = grads[p] * scale
    return total


# metrics -------------------------------------------------------------------------

def mse_mae(pred, target):
    err = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if err.size == 0:
        raise DataError("cannot score an empty prediction set")
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


@dataclass
class EvalRow:
    dataset: str
    config_hash: str
    seed: int
    horizon: int
    mse: float
    mae: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    FIELDS = ("dataset", "config_hash", "seed", "horizon", "mse", "mae")

    def add(self, row: EvalRow):
        self.rows.append(row)
        return self

    def extend(self, other: "EvalReport"):
        self.rows.extend(other.rows)
        return self

    @property
    def mse(self):
        return self.summary()["mse_mean"]

    @property
    def mae(self):
        return self.summary()["mae_mean"]

    def horizons(self):
        return sorted({r.horizon for r in self.rows})

    def summary(self, horizon=None) -> dict:
        """Mean and population std of each metric over the (seed) rows of one horizon."""
        rows = [r for r in self.rows if horizon is None or r.horizon == horizon]
        if not rows:
            raise DataError("report has no rows")
        out = {}
        for metric in ("mse", "mae"):
            vals = np.array([getattr(r, metric) for r in rows])
            out[f"{metric}_mean"] = float(vals.mean())
            out[f"{metric}_std"] = float(vals.std())
        out["n"] = len(rows)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        for r in self.rows:
            w.writerow([r.dataset, r.config_hash, int(r.seed), int(r.horizon), repr(float(r.mse)), repr(float(r.mae))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rep = cls()
        for rec in csv.DictReader(io.StringIO(text)):
            rep.add(EvalRow(rec["dataset"], rec["config_hash"], int(rec["seed"]), int(rec["horizon"]),
                            float(rec["mse"]), float(rec["mae"])))
        return rep

    def table(self) -> str:
        lines = [f"{'dataset':<14}{'horizon':>8}{'seeds':>7}{'MSE':>22}{'MAE':>22}"]
        keys = sorted({(r.dataset, r.horizon) for r in self.rows})
        for name, h in keys:
            sub = EvalReport([r for r in self.rows if r.dataset == name and r.horizon == h]).summary()
            mse = f"{sub['mse_mean']:.4f} ± {sub['mse_std']:.4f}"
            mae = f"{sub['mae_mean']:.4f} ± {sub['mae_std']:.4f}"
            lines.append(f"{name:<14}{h:>8}{sub['n']:>7}{mse:>22}{mae:>22}")
        return "\n".join(lines) + "\n"


# training ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    clip_norm: float = 1.0
    tta_steps: int = 0
    tta_lr: float = 1e-3
    eval_batch: int = 256

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.tta_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.tta_steps < 0:
            raise ConfigError("tta_steps must be >= 0")
        if len(self.seeds) < 1:
            raise ConfigError("need at least one seed")


@dataclass
class FitResult:
    train_loss: list
    val_loss: list
    best_epoch: int
    best_val: float
    steps: int = 0


def predict(model, X, batch_size=256) -> np.ndarray:
    """Forecasts for stacked windows without recording a tape."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise DataError("no windows to forecast")
    outs = [model(X[i : i + batch_size]).data for i in range(0, len(X), batch_size)]
    return np.concatenate(outs, axis=0)


def _mean_loss(model, data: WindowedDataset, batch_size):
    pred = predict(model, data.X, batch_size)
    return mse_mae(pred, data.Y)[0]


def fit(model, train: WindowedDataset, val: WindowedDataset | None, cfg: TrainConfig, seed: int = 0,
        on_epoch: Callable | None = None) -> FitResult:
    """Minimise forecast MSE with Adam and global-norm clipping.

    The parameters left in ``model`` are those of the epoch with the lowest
    validation loss (training loss when there is no validation set).
    """
    if train is None or len(train) == 0:
        raise DataError("training split has no windows")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    train_trace, val_trace = [], []
    best = (math.inf, -1, None)
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for xb, yb in train.batches(cfg.batch_size, rng):
            with Tape() as tape:
                tape.watch(params)
                pred = model(xb, training=True, rng=rng)
                diff = pred - yb
                loss = tt.mean(diff * diff)
            grads = backward(loss)
            clip_global_norm(grads, params, cfg.clip_norm)
            adam_step(opt, params, grads)
            total += loss.item() * len(xb)
            count += len(xb)
        train_trace.append(total / count)
        score = _mean_loss(model, val, cfg.eval_batch) if val is not None and len(val) else train_trace[-1]
        val_trace.append(score)
        if score < best[0]:
            best = (score, epoch, [p.data for p in params])
        if on_epoch is not None:
            on_epoch(epoch, train_trace[-1], score)
    if best[2] is not None:
        for p, d in zip(params, best[2]):
            p.data = d
    return FitResult(train_trace, val_trace, best[1], best[0], opt.step)


def evaluate(model, data: WindowedDataset, dataset="synthetic", config_hash="", seed=0, batch_size=256) -> EvalReport:
    if data is None or len(data) == 0:
        raise DataError("test split has no windows")
    mse, mae = mse_mae(predict(model, data.X, batch_size), data.Y)
    horizon = data.Y.shape[-1]
    return EvalReport([EvalRow(dataset, config_hash, seed, horizon, mse, mae)])


def persistence_forecast(X, T):
    """Repeat the last observed value of each channel over the horizon."""
    X = np.asarray(X)
    return np.repeat(X[..., -1:], T, axis=-1)


def persistence_baseline(data: WindowedDataset):
    return mse_mae(persistence_forecast(data.X, data.Y.shape[-1]), data.Y)


def multi_seed_run(run_one: Callable[[int], EvalReport], seeds) -> EvalReport:
    """Run ``run_one(seed)`` for every seed and pool the rows; see :meth:`EvalReport.summary`."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("multi_seed_run needs at least one seed")
    report = EvalReport()
    for s in seeds:
        report.extend(run_one(s))
    return report


# probes ---------------------------------------------------------------------------

def forecast_loss(model, X, Y) -> Tensor:
    diff = model_forward(model, X) - Y
    return tt.mean(diff * diff)


@dataclass
class ProbeResult:
    cosine: float
    dot: float
    delta_main: float
    undefined: bool
    main_norm: float
    self_norm: float


def _grad_vector(fn, params):
    with Tape() as tape:
        tape.watch(params)
        value = fn()
    return value.item(), backward(value).flat(params)


def orthogonality_probe(model, batch, step=1e-3, main_loss=None, self_loss_fn=None) -> ProbeResult:
    """Compare forecast and self-supervised gradients over all slow parameters.

    Returns their cosine and dot product, and the change in forecast loss after
    one plain gradient step of size ``step`` on the self-supervised loss
    (positive means the self step also lowered the forecast loss).  A zero
    gradient makes the cosine undefined; this is flagged, and cosine is NaN.
    """
    X, Y = batch
    params = model.parameters()
    main_fn = main_loss or (lambda: forecast_loss(model, X, Y))
    self_fn = self_loss_fn or (lambda: self_loss(model, X))
    main_before, g_main = _grad_vector(main_fn, params)
    _, g_self = _grad_vector(self_fn, params)
    n_main, n_self = float(np.linalg.norm(g_main)), float(np.linalg.norm(g_self))
    dot = float(g_main @ g_self)
    undefined = n_main == 0.0 or n_self == 0.0
    cosine = math.nan if undefined else float(np.clip(dot / (n_main * n_self), -1.0, 1.0))

    saved = [p.data for p in params]
    offset = 0
    for p in params:
        p.data = p.data - step * g_self[offset : offset + p.size].reshape(p.shape)
        offset += p.size
    main_after = main_fn().item()
    for p, d in zip(params, saved):
        p.data = d
    return ProbeResult(cosine, dot, main_before - main_after, undefined, n_main, n_self)


# test-time adaptation ----------------------------------------------------------------

def adapt_and_forecast(model, x, steps, lr, tape_bytes: list | None = None):
    """U plain SGD steps on the look-back self-loss, forecast, then restore parameters.

    ``tape_bytes``, if given, receives the bytes held by each update's tape.
    """
    params = model.parameters()
    saved = [p.data for p in params]
    try:
        for _ in range(steps):
            with Tape() as tape:
                tape.watch(params)
                loss = self_loss(model, x)
            grads = backward(loss)
            if tape_bytes is not None:
                tape_bytes.append(tape.bytes_held)
            for p in params:
                p.data = p.data - lr * grads[p]
        return model(x).data
    finally:
        for p, d in zip(params, saved):
            p.data = d


def test_time_adapt_evaluate(model, data: WindowedDataset, steps: int, lr: float, dataset="synthetic",
                             config_hash="", seed=0, batch_size=256) -> EvalReport:
    """Evaluate with per-window adaptation; each window starts from the trained parameters."""
    if steps < 0:
        raise ConfigError("number of test-time updates must be >= 0")
    if data is None or len(data) == 0:
        raise DataError("test split has no windows")
    if steps == 0 or lr == 0:
        # no update can change a parameter, so this is plain evaluation
        return evaluate(model, data, dataset, config_hash, seed, batch_size)
    preds = np.stack([adapt_and_forecast(model, x[None], steps, lr)[0] for x in data.X])
    mse, mae = mse_mae(preds, data.Y)
    return EvalReport([EvalRow(dataset, config_hash, seed, data.Y.shape[-1], mse, mae)])


test_time_adapt_evaluate.__test__ = False
