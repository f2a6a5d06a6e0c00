"""Series loading, windowing, chronological splits and synthetic generators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import from_kv, read_kv
from .errors import ConfigError, InsufficientDataError, LoadError

DEFAULT_RATIOS = (0.7, 0.1, 0.2)


@dataclass(frozen=True)
class RawSeries:
    channel_names: tuple
    timestamps: np.ndarray
    values: np.ndarray  # (M, N)

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ConfigError(f"series values must be (channels, time), got {self.values.shape}")
        if len(self.channel_names) != self.values.shape[0] or len(self.timestamps) != self.values.shape[1]:
            raise ConfigError("channel names / timestamps disagree with the value matrix")
        self.values.setflags(write=False)

    @property
    def M(self):
        return self.values.shape[0]

    @property
    def N(self):
        return self.values.shape[1]

    def segment(self, start, stop) -> "RawSeries":
        return RawSeries(self.channel_names, self.timestamps[start:stop], self.values[:, start:stop].copy())


@dataclass(frozen=True)
class WindowSpec:
    L: int
    T: int
    stride: int = 1

    def __post_init__(self):
        if self.L < 2 or self.T < 1 or self.stride < 1:
            raise ConfigError(f"window spec needs L >= 2, T >= 1, stride >= 1; got {self}")


# csv ---------------------------------------------------------------------------

def _parse_time(cell):
    try:
        return np.datetime64(cell, "s")
    except ValueError:
        return None


def load_csv(path) -> RawSeries:
    """Read ``timestamp,ch1,ch2,...`` with a header row.  Rows are 1-based, header is row 1."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r]
    if not rows:
        raise LoadError(f"{path}: empty file", row=1)
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise LoadError(f"{path}: header needs a timestamp column and at least one channel", row=1)
    body = rows[1:]
    if not body:
        raise LoadError(f"{path}: no data rows", row=2)

    values = np.empty((len(header) - 1, len(body)))
    stamps = []
    for i, row in enumerate(body):
        rowno = i + 2
        if len(row) != len(header):
            raise LoadError(f"{path}: row {rowno} has {len(row)} cells, expected {len(header)}", row=rowno)
        stamps.append(row[0].strip())
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise LoadError(
                    f"{path}: row {rowno}, column {j + 2} ({header[j + 1]!r}): bad value {cell!r}",
                    row=rowno,
                    column=j + 2,
                )
            values[j, i] = v

    times = [_parse_time(s) for s in stamps]
    if all(t is not None for t in times):
        timestamps = np.array(times, dtype="datetime64[s]")
    else:
        try:
            timestamps = np.array([float(s) for s in stamps])
        except ValueError:
            bad = next(i for i, t in enumerate(times) if t is None)
            raise LoadError(f"{path}: row {bad + 2}: unparseable timestamp {stamps[bad]!r}", row=bad + 2, column=1) from None
    steps = np.diff(timestamps)
    if steps.size and not (steps > steps.dtype.type(0)).all():
        bad = int(np.argmin(steps > steps.dtype.type(0)))
        raise LoadError(f"{path}: timestamps not increasing at row {bad + 3}", row=bad + 3, column=1)
    return RawSeries(tuple(header[1:]), timestamps, values)


def write_csv(series: RawSeries, path, time_header="date"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([time_header, *series.channel_names])
        for i, stamp in enumerate(series.timestamps):
            w.writerow([str(stamp).replace("T", " "), *(repr(float(v)) for v in series.values[:, i])])
    return path


# windows -------------------------------------------------------------------------

def window_count(n, spec: WindowSpec) -> int:
    return max(0, (n - spec.L - spec.T) // spec.stride + 1)


def window_arrays(series: RawSeries, spec: WindowSpec):
    """Stacked windows: X (n, M, L) and Y (n, M, T); Y starts right after X ends."""
    if series.N < spec.L + spec.T:
        raise InsufficientDataError(f"series of length {series.N} is shorter than L+T={spec.L + spec.T}")
    full = sliding_window_view(series.values, spec.L + spec.T, axis=1)[:, :: spec.stride]
    full = np.moveaxis(full, 1, 0)
    return full[..., : spec.L].copy(), full[..., spec.L :].copy()


def make_windows(series: RawSeries, spec: WindowSpec) -> list:
    X, Y = window_arrays(series, spec)
    return list(zip(X, Y))


@dataclass
class WindowedDataset:
    X: np.ndarray
    Y: np.ndarray
    channel_names: tuple = ()

    def __len__(self):
        return len(self.X)

    def batches(self, batch_size, rng=None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(self), batch_size):
            idx = order[i : i + batch_size]
            yield self.X[idx], self.Y[idx]


def windowed(series: RawSeries, spec: WindowSpec) -> WindowedDataset:
    X, Y = window_arrays(series, spec)
    return WindowedDataset(X, Y, series.channel_names)


# splits ----------------------------------------------------------------------------

def _check_ratios(ratios):
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")


def chronological_split(series: RawSeries, ratios=DEFAULT_RATIOS):
    """Contiguous train / val / test segments; each is windowed on its own."""
    _check_ratios(ratios)
    n_train = round(series.N * ratios[0])
    n_val = round(series.N * ratios[1])
    return (
        series.segment(0, n_train),
        series.segment(n_train, n_train + n_val),
        series.segment(n_train + n_val, series.N),
    )


def train_stats(train: RawSeries, floor=1e-5):
    """Per-channel mean and population std of the training segment."""
    mean = train.values.mean(axis=1, keepdims=True)
    std = np.maximum(train.values.std(axis=1, keepdims=True), floor)
    return mean, std


def apply_zscore(series: RawSeries, stats) -> RawSeries:
    mean, std = stats
    return RawSeries(series.channel_names, series.timestamps, (series.values - mean) / std)


# synthetic ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Sum of sinusoids + linear trend + Gaussian noise, with an optional level shift.

    ``amplitudes``/``periods``/``phases`` hold K shared components, or K*M values
    listed channel by channel.  Empty ``phases`` staggers channels by 2*pi*m/M.
    ``shift_delta`` holds one offset for all channels or one per channel.
    """

    M: int = 4
    N: int = 2000
    amplitudes: tuple[float, ...] = (1.0, 0.5)
    periods: tuple[float, ...] = (24.0, 96.0)
    phases: tuple[float, ...] = ()
    trend: float = 0.001
    sigma: float = 0.1
    shift_t0: int | None = None
    shift_delta: tuple[float, ...] = ()
    start: str = "2020-01-01T00:00:00"

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ConfigError("synthetic series needs M >= 1 and N >= 1")
        if self.sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if self.shift_t0 is not None and not 0 <= self.shift_t0 < self.N:
            raise ConfigError(f"shift time {self.shift_t0} outside [0, {self.N})")

    def _per_channel(self, values, name):
        arr = np.asarray(values, dtype=np.float64)
        k = len(self.periods)
        if arr.size == k:
            return np.broadcast_to(arr, (self.M, k))
        if arr.size == k * self.M:
            return arr.reshape(self.M, k)
        raise ConfigError(f"{name} needs {k} or {k * self.M} values, got {arr.size}")

    def _offsets(self):
        d = np.asarray(self.shift_delta, dtype=np.float64)
        if d.size in (1, self.M):
            return np.broadcast_to(d, (self.M,))
        raise ConfigError(f"shift_delta needs 1 or {self.M} values, got {d.size}")


def synth_generate(spec: SyntheticSpec, seed: int = 0) -> RawSeries:
    rng = np.random.default_rng(seed)
    t = np.arange(spec.N, dtype=np.float64)
    amp = spec._per_channel(spec.amplitudes, "amplitudes")
    per = spec._per_channel(spec.periods, "periods")
    if spec.phases:
        ph = spec._per_channel(spec.phases, "phases")
    else:
        ph = np.broadcast_to(2 * np.pi * np.arange(spec.M)[:, None] / spec.M, amp.shape)
    values = (amp[:, :, None] * np.sin(2 * np.pi * t / per[:, :, None] + ph[:, :, None])).sum(axis=1)
    values = values + spec.trend * t
    if spec.sigma > 0:
        values = values + rng.normal(0.0, spec.sigma, values.shape)
    if spec.shift_t0 is not None and spec.shift_delta:
        values[:, spec.shift_t0 :] += spec._offsets()[:, None]
    stamps = np.datetime64(spec.start, "s") + np.arange(spec.N) * np.timedelta64(1, "h")
    names = tuple(f"ch{m}" for m in range(spec.M))
    return RawSeries(names, stamps, values)


def read_synth_spec(path) -> SyntheticSpec:
    return from_kv(SyntheticSpec, read_kv(path))


@dataclass
class SplitWindows:
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    channel_names: tuple = field(default=())


def split_windows(series: RawSeries, spec: WindowSpec, ratios=DEFAULT_RATIOS) -> SplitWindows:
    """Split chronologically, then window each segment so no pair crosses a boundary."""
    parts = chronological_split(series, ratios)
    return SplitWindows(*(windowed(p, spec) for p in parts), channel_names=series.channel_names)
