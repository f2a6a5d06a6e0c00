"""Figures written straight to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps re-runs byte-identical
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(train_loss, val_loss, path, title="training"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = np.arange(1, len(train_loss) + 1)
        ax.plot(epochs, train_loss, label="train")
        if val_loss is not None:
            ax.plot(epochs, val_loss, label="validation")
            best = int(np.argmin(val_loss))
            ax.axvline(best + 1, color="0.5", ls=":", lw=1)
        ax.set_yscale("log")
        ax.set(xlabel="epoch", ylabel="MSE", title=title)
        ax.legend()
        return _save(fig, path)


def plot_scaling(reports: dict, path):
    """``reports`` maps a label to a TimingReport with lengths/times/slope."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, rep in reports.items():
            ax.loglog(rep.lengths, rep.times, "o-", label=f"{label} (slope {rep.slope:.2f})")
        ax.set(xlabel="sequence length", ylabel="median seconds", title="forward wall time")
        ax.legend()
        return _save(fig, path)


def plot_ablation(variants, mse, mae, path, title="conv variant ablation"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(variants))
        ax.bar(x - 0.2, mse, 0.4, label="MSE")
        ax.bar(x + 0.2, mae, 0.4, label="MAE")
        ax.set_xticks(x, variants, rotation=30, ha="right")
        ax.set(ylabel="test error", title=title)
        ax.legend()
        return _save(fig, path)


def plot_forecast(history, target, forecast, path, channel=0, title="forecast"):
    """One channel: look-back, true continuation and forecast."""
    history, target, forecast = (np.asarray(a)[channel] for a in (history, target, forecast))
    L = history.shape[-1]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(np.arange(L), history, color="0.3", label="look-back")
        t = np.arange(L, L + target.shape[-1])
        ax.plot(t, target, color="C0", label="actual")
        ax.plot(t, forecast, color="C3", ls="--", label="forecast")
        ax.set(xlabel="step", ylabel=f"channel {channel}", title=title)
        ax.legend()
        return _save(fig, path)


def plot_tta_overhead(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(report.U_values, np.asarray(report.latency_delta) * 1e3, "o-")
        ax.set(xlabel="test-time updates U", ylabel="extra latency (ms)", title="adaptation overhead")
        return _save(fig, path)
