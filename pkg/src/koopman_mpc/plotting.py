"""Static SVG figures: traces, prediction overlays, PSD overlays, control runs.

Everything renders through the Agg backend, so no display is needed. SVG
output is made reproducible by fixing the hash salt and dropping the date.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "koopman-mpc"
matplotlib.rcParams["svg.fonttype"] = "none"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    tmp.replace(path)
    return path


def plot_trace(trace, path, title: str = "") -> Path:
    """One panel per EEG channel."""
    n = trace.n_channels
    fig, axes = plt.subplots(n, 1, figsize=(8, 2.2 * n + 0.6), sharex=True, squeeze=False)
    for c, ax in enumerate(axes[:, 0]):
        ax.plot(trace.t, trace.eeg[:, c], lw=0.8, color="k")
        ax.set_ylabel(f"ch{c} (mV)")
    axes[-1, 0].set_xlabel("time (s)")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_prediction(t, truth, prediction, path, title: str = "",
                    labels: Sequence[str] = ("truth", "prediction")) -> Path:
    truth = np.atleast_2d(np.asarray(truth).T).T
    prediction = np.atleast_2d(np.asarray(prediction).T).T
    n = truth.shape[1]
    fig, axes = plt.subplots(n, 1, figsize=(8, 2.2 * n + 0.6), sharex=True, squeeze=False)
    for c, ax in enumerate(axes[:, 0]):
        ax.plot(t, truth[:, c], lw=1.0, color="k", label=labels[0])
        ax.plot(t, prediction[:, c], lw=1.0, ls="--", color="tab:red", label=labels[1])
        ax.set_ylabel(f"ch{c} (mV)")
    axes[0, 0].legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("time (s)")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_psd(freqs, p_truth, p_pred, path, title: str = "", fmax: float = 25.0) -> Path:
    """Log-scale density over ``[0, fmax]`` Hz, one panel per channel."""
    p_truth = np.atleast_2d(p_truth)
    p_pred = np.atleast_2d(p_pred)
    f = np.asarray(freqs)
    sel = f <= fmax
    n = len(p_truth)
    fig, axes = plt.subplots(n, 1, figsize=(6, 2.4 * n + 0.6), sharex=True, squeeze=False)
    floor = np.finfo(float).tiny
    for c, ax in enumerate(axes[:, 0]):
        ax.semilogy(f[sel], np.maximum(p_truth[c][sel], floor), color="k", label="truth")
        ax.semilogy(f[sel], np.maximum(p_pred[c][sel], floor), ls="--", color="tab:red", label="prediction")
        ax.set_ylabel(f"ch{c} PSD (mV²/Hz)")
        ax.set_xlim(0, fmax)
    axes[0, 0].legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("frequency (Hz)")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_control(controlled, uncontrolled, path, onset: float = 4.0, title: str = "",
                 u: Optional[np.ndarray] = None) -> Path:
    """EEG panels (controlled over uncontrolled) stacked above ``u(t)``."""
    n = controlled.n_channels
    u = controlled.u if u is None else u
    fig, axes = plt.subplots(n + 1, 1, figsize=(8, 2.2 * (n + 1) + 0.6), sharex=True, squeeze=False)
    axes = axes[:, 0]
    for c in range(n):
        ax = axes[c]
        ax.plot(uncontrolled.t, uncontrolled.eeg[:, c], lw=0.8, color="0.6", label="uncontrolled")
        ax.plot(controlled.t, controlled.eeg[:, c], lw=1.0, color="k", label="controlled")
        ax.set_ylabel(f"ch{c} (mV)")
    axes[0].legend(loc="upper right", fontsize=8)
    axes[-1].step(controlled.t, np.asarray(u).reshape(len(controlled.t), -1)[:, 0], where="post",
                  color="tab:blue")
    axes[-1].set_ylabel("u (mV/s)")
    axes[-1].set_xlabel("time (s)")
    for ax in axes:
        ax.axvline(onset, color="tab:red", ls=":", lw=1.0)
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    return _save(fig, path)
