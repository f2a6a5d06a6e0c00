"""Closed-form operation counts for sequence modules and forecasting models, MAC
counts for the blocks implemented here, and a small wall-clock harness."""

from __future__ import annotations

import csv
import gc
import io
import math
import statistics
import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .config import dump_kv
from .errors import ConfigError

MODULE_KINDS = ("TTT", "Mamba", "Transformer", "ModernTCN")
MODEL_KINDS = ("TTT-LTSF", "TimeMachine", "PatchTST", "TSMixer", "ModernTCN", "iTransformer")


@dataclass(frozen=True)
class DimSpec:
    """T: sequence length, d: width, N: parameter count, U: test-time updates, k: kernel size,
    C_in/C_out: conv channels, patch_size, n_variates.  Unused fields may stay None."""

    T: int | None = None
    d: int | None = None
    N: int | None = None
    U: int | None = None
    k: int | None = None
    C_in: int | None = None
    C_out: int | None = None
    patch_size: int | None = None
    n_variates: int | None = None

    def require(self, kind, *names):
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ConfigError(f"{kind} needs dimensions {', '.join(missing)}")
        for n in names:
            v = getattr(self, n)
            # U may be zero (no test-time updates)
            if v < 0 or (v == 0 and n != "U"):
                raise ConfigError(f"dimension {n} must be positive, got {v}")
        return [int(getattr(self, n)) for n in names]


@dataclass
class ComplexityReport:
    kind: str
    terms: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.terms.values())


def module_complexity(kind: str, dims: DimSpec) -> ComplexityReport:
    if kind == "TTT":
        T, d, N, U = dims.require(kind, "T", "d", "N", "U")
        terms = {"forward": T * d * N, "updates": U * T * d * d}
    elif kind == "Mamba":
        T, d, k = dims.require(kind, "T", "d", "k")
        terms = {"conv": T * k * d, "linear": T * d * d}
    elif kind == "Transformer":
        T, d = dims.require(kind, "T", "d")
        terms = {"attention": T * T * d, "feedforward": T * d * d}
    elif kind == "ModernTCN":
        T, k, c_in, c_out = dims.require(kind, "T", "k", "C_in", "C_out")
        terms = {"depthwise": T * k * c_in, "pointwise": T * c_in * c_out}
    else:
        raise ConfigError(f"unknown module kind {kind!r}; expected one of {MODULE_KINDS}")
    return ComplexityReport(kind, terms)


def patch_count(T, patch_size) -> int:
    """Effective PatchTST length; a partial final patch counts as a patch."""
    return -(-T // patch_size)


def model_complexity(kind: str, dims: DimSpec) -> ComplexityReport:
    if kind == "TTT-LTSF":
        T, d, k, U = dims.require(kind, "T", "d", "k", "U")
        terms = {"conv": T * k * d, "linear": T * d * d, "updates": U * T * d * d}
    elif kind == "TimeMachine":
        T, d = dims.require(kind, "T", "d")
        terms = {"linear": T * d, "context": T * d * d}
    elif kind == "PatchTST":
        T, d, p = dims.require(kind, "T", "d", "patch_size")
        tp = patch_count(T, p)
        terms = {"embedding": T * d, "attention": tp * tp * d, "feedforward": tp * d * d}
    elif kind == "TSMixer":
        T, d = dims.require(kind, "T", "d")
        terms = {"time_mixing": T * d * d, "feature_mixing": d * T * T}
    elif kind == "ModernTCN":
        return ComplexityReport(kind, module_complexity("ModernTCN", dims).terms)
    elif kind == "iTransformer":
        T, n, d = dims.require(kind, "T", "n_variates", "d")
        terms = {"attention": T * n * n * d, "feedforward": T * n * d * d}
    else:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    return ComplexityReport(kind, terms)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "term", "count"])
    for r in reports:
        for name, count in r.terms.items():
            w.writerow([r.kind, name, count])
        w.writerow([r.kind, "total", r.total])
    return buf.getvalue()


# multiply-accumulate models with explicit constants ------------------------------

def attention_block_macs(T, d) -> int:
    """Q, K, V projections (3 T d^2), scores and weighted sum (2 T^2 d)."""
    return 2 * T * T * d + 3 * T * d * d


def ssm_scan_macs(T, d, N, selective=True) -> int:
    """State update, input injection and readout (3 T d N); selective mode adds
    the per-token B and C projections (2 T d N)."""
    return (5 if selective else 3) * T * d * N


# timing -------------------------------------------------------------------------

@dataclass
class TimingReport:
    lengths: list = field(default_factory=list)
    times: list = field(default_factory=list)
    slope: float = math.nan
    U_values: list = field(default_factory=list)
    latency_delta: list = field(default_factory=list)
    memory_bytes: list = field(default_factory=list)
    trials: int = 0
    note: str = "wall-clock medians on a shared machine; expect a few percent of noise"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.lengths:
            w.writerow(["length", "median_seconds"])
            w.writerows([n, repr(float(t))] for n, t in zip(self.lengths, self.times))
        else:
            w.writerow(["U", "median_seconds", "latency_delta", "memory_bytes"])
            w.writerows([u, repr(float(t)), repr(float(dl)), m]
                        for u, t, dl, m in zip(self.U_values, self.times, self.latency_delta, self.memory_bytes))
        return buf.getvalue()

    def summary_kv(self) -> str:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        return f"# {self.note}\n" + dump_kv({k: v for k, v in values.items() if k != "note"})


def median_time(fn: Callable[[], object], trials=5, warmup=1) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(trials):
        gc.collect()
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def loglog_slope(lengths, times) -> float:
    return float(np.polyfit(np.log(lengths), np.log(times), 1)[0])


def measure_scaling(block_forward: Callable[[int], Callable[[], object]], lengths, trials=5) -> TimingReport:
    """Time ``block_forward(T)()`` for each length; ``block_forward(T)`` prepares the
    inputs and returns the workload, so set-up cost is not timed."""
    lengths = [int(n) for n in lengths]
    if len(lengths) < 3:
        raise ConfigError(f"a slope fit needs at least 3 lengths, got {len(lengths)}")
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ConfigError("lengths must be strictly increasing")
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    times = [median_time(block_forward(n), trials) for n in lengths]
    return TimingReport(lengths=lengths, times=times, slope=loglog_slope(lengths, times), trials=trials)


def measure_tta_overhead(model, x, U_values, lr=1e-3, trials=5) -> TimingReport:
    """Latency and tape-memory cost of U test-time updates on one look-back window."""
    from .training import adapt_and_forecast

    U_values = [int(u) for u in U_values]
    if 0 not in U_values:
        raise ConfigError("U_values must include 0 as the baseline")
    if any(u < 0 for u in U_values) or len(set(U_values)) != len(U_values):
        raise ConfigError("U_values must be distinct non-negative integers")
    U_values = sorted(U_values)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    times, memory = [], []
    for u in U_values:
        held: list = []
        adapt_and_forecast(model, x, u, lr, held)
        memory.append(max(held, default=0))
        times.append(median_time(lambda: adapt_and_forecast(model, x, u, lr), trials))
    base = times[U_values.index(0)]
    deltas = [t - base for t in times]
    return TimingReport(times=times, U_values=U_values, latency_delta=deltas, memory_bytes=memory, trials=trials)
