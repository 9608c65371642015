"""Prediction metrics, spectra, suppression statistics and comparison tables."""

from __future__ import annotations

import csv
import io
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal
from scipy.integrate import trapezoid


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def mse_r2(truth, prediction) -> Tuple[float, float]:
    """MSE (squared error norm per step, averaged over steps) and R^2.

    R^2 is NaN when the truth is constant; the MSE is still returned.
    """
    y, yh = _as_2d(truth), _as_2d(prediction)
    if y.shape != yh.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yh.shape}")
    if len(y) < 2:
        raise ValueError("need at least two samples")
    sq = (y - yh) ** 2
    mse = float(np.mean(sq.sum(axis=1)))
    ss_tot = float(np.sum((y - y.mean(axis=0)) ** 2))
    r2 = 1.0 - float(sq.sum()) / ss_tot if ss_tot > 0 else float("nan")
    return mse, r2


def per_channel(truth, prediction):
    y, yh = _as_2d(truth), _as_2d(prediction)
    return [mse_r2(y[:, c], yh[:, c]) for c in range(y.shape[1])]


def psd(series, rate: float, segment: int = 256, overlap: float = 0.5):
    """Welch PSD (Hann window, mean removed per segment).

    Scaled as a density, so integrating over frequency recovers the variance.
    """
    x = np.asarray(series, dtype=float).ravel()
    if len(x) < segment:
        raise ValueError(f"series of length {len(x)} shorter than segment {segment}")
    return signal.welch(x, fs=rate, window="hann", nperseg=segment,
                        noverlap=int(overlap * segment), detrend="constant", scaling="density")


def band_psd_error(freqs, p_true, p_pred, band=(1.0, 20.0)) -> float:
    """Relative L1 distance of two PSDs over ``band``."""
    f = np.asarray(freqs)
    sel = (f >= band[0]) & (f <= band[1])
    denom = trapezoid(np.asarray(p_true)[sel], f[sel])
    return float(trapezoid(np.abs(np.asarray(p_pred) - np.asarray(p_true))[sel], f[sel]) / denom)


@dataclass
class SuppressionStats:
    ratio: List[float]
    rms_controlled: List[float]
    rms_uncontrolled: List[float]
    p2p_controlled: List[float]
    p2p_uncontrolled: List[float]
    window: Tuple[float, float]


def suppression_stats(uncontrolled, controlled, window: Sequence[float]) -> SuppressionStats:
    """Per-channel RMS ratio (controlled / uncontrolled) over ``[t0, t1]``."""
    t0, t1 = window
    if uncontrolled.t[0] > t0 + 1e-9 or uncontrolled.t[-1] < t1 - 1e-9:
        raise ValueError(f"window {window} outside the trace")
    if len(uncontrolled) != len(controlled) or not np.allclose(uncontrolled.t, controlled.t):
        raise ValueError("traces are not aligned")
    sel = (uncontrolled.t >= t0 - 1e-9) & (uncontrolled.t <= t1 + 1e-9)
    yu, yc = uncontrolled.eeg[sel], controlled.eeg[sel]
    rms_u = np.sqrt(np.mean(yu ** 2, axis=0))
    rms_c = np.sqrt(np.mean(yc ** 2, axis=0))
    return SuppressionStats(
        ratio=(rms_c / rms_u).tolist(),
        rms_controlled=rms_c.tolist(),
        rms_uncontrolled=rms_u.tolist(),
        p2p_controlled=np.ptp(yc, axis=0).tolist(),
        p2p_uncontrolled=np.ptp(yu, axis=0).tolist(),
        window=(float(t0), float(t1)),
    )


@dataclass
class EvalReport:
    case: str
    model: str
    mse: float
    r2: float
    mse_per_channel: List[float] = field(default_factory=list)
    r2_per_channel: List[float] = field(default_factory=list)
    psd_freqs: List[float] = field(default_factory=list)
    psd_truth: List[List[float]] = field(default_factory=list)
    psd_pred: List[List[float]] = field(default_factory=list)
    psd_band_error: List[float] = field(default_factory=list)
    suppression: Optional[dict] = None
    seed: Optional[int] = None
    config_hash: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def evaluate_prediction(truth, prediction, rate: float, case: str, model: str,
                        seed=None, config_hash=None, segment: int = 256,
                        band=(1.0, 20.0)) -> EvalReport:
    y, yh = _as_2d(truth), _as_2d(prediction)
    mse, r2 = mse_r2(y, yh)
    chans = per_channel(y, yh)
    freqs, pt, pp, errs = [], [], [], []
    if len(y) >= segment:
        for c in range(y.shape[1]):
            freqs, p_t = psd(y[:, c], rate, segment)
            _, p_p = psd(yh[:, c], rate, segment)
            pt.append(p_t.tolist())
            pp.append(p_p.tolist())
            errs.append(band_psd_error(freqs, p_t, p_p, band))
        freqs = list(map(float, freqs))
    return EvalReport(case, model, mse, r2, [c[0] for c in chans], [c[1] for c in chans],
                      freqs, pt, pp, errs, seed=seed, config_hash=config_hash)


@dataclass
class TableRow:
    case: str
    model: str
    n_runs: int
    mse_mean: float
    mse_sd: float
    r2_mean: float
    r2_sd: float


def comparison_table(reports: Iterable[EvalReport]) -> List[TableRow]:
    """Mean and population standard deviation of MSE and R^2 per (case, model)."""
    groups: "OrderedDict[tuple, list]" = OrderedDict()
    for rep in reports:
        groups.setdefault((rep.case, rep.model), []).append(rep)
    if not groups:
        raise ValueError("no reports to tabulate")
    rows = []
    for (case, model), reps in groups.items():
        mse = np.array([r.mse for r in reps])
        r2 = np.array([r.r2 for r in reps])
        rows.append(TableRow(case, model, len(reps), float(mse.mean()), float(mse.std()),
                             float(r2.mean()), float(r2.std())))
    return rows


def table_csv(rows: Sequence[TableRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "model", "n_runs", "mse_mean", "mse_sd", "r2_mean", "r2_sd"])
    for r in rows:
        w.writerow([r.case, r.model, r.n_runs, repr(r.mse_mean), repr(r.mse_sd),
                    repr(r.r2_mean), repr(r.r2_sd)])
    return buf.getvalue()


def table_text(rows: Sequence[TableRow]) -> str:
    header = f"{'Case':<16}| {'Model':<9}| {'MSE':<18}| {'R2':<18}"
    lines = [header, "-" * len(header)]
    last = None
    for r in rows:
        case = r.case if r.case != last else ""
        last = r.case
        lines.append(f"{case:<16}| {r.model:<9}| {r.mse_mean:.4f}±{r.mse_sd:.4f}"
                     f"{'':<4}| {r.r2_mean:.4f}±{r.r2_sd:.4f}")
    return "\n".join(lines) + "\n"


def spectral_peak(series, rate: float, fmax: Optional[float] = None, segment: int = 256):
    """Frequency of the largest PSD bin (optionally below ``fmax``) and its
    prominence in dB over the median bin."""
    f, p = psd(series, rate, segment=min(segment, len(np.ravel(series))))
    sel = slice(None) if fmax is None else f <= fmax
    fs, ps = f[sel], p[sel]
    i = int(np.argmax(ps))
    med = np.median(p)
    prominence = 10 * np.log10(ps[i] / med) if med > 0 else np.inf
    return float(fs[i]), float(prominence)

