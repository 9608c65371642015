"""Jansen-Rit neural mass models used as the synthetic EEG plant.

State layout
------------
Single column, 6 states stored as ``[y1, y2, y3, y4, y5, y6]``:

* ``y1``/``y4``: PSP (and its derivative) of the pyramidal output
* ``y2``/``y5``: excitatory PSP onto pyramidal cells (receives ``p`` and the
  control input ``d(t)``)
* ``y3``/``y6``: inhibitory PSP onto pyramidal cells

EEG channel is ``y2 - y3``.

Double column, 16 states stored as ``[y0, ..., y15]``. Column 1 occupies
``y0..y5`` and column 2 ``y6..y11`` with the same ordering as the single
column (so single index ``i`` maps to double index ``i`` or ``6 + i``).
``y12/y14`` and ``y13/y15`` are the delayed inter-column PSPs driven by
column 1 and column 2 respectively. EEG channels are ``y1 - y2`` and
``y7 - y8``. The control input enters ``dy1/dt`` of column 1, the same
position as ``d(t)`` in the single column.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "JansenRitParams",
    "DoubleColumnParams",
    "SimTrace",
    "IntegrationError",
    "sigmoid",
    "single_column_rhs",
    "double_column_rhs",
    "rk4_step",
    "integrate",
    "Plant",
    "generate_trace",
    "eeg_output",
    "save_trace",
    "load_trace",
]

SINGLE_DIM = 6
DOUBLE_DIM = 16


class IntegrationError(RuntimeError):
    """Raised when the integrated state stops being finite."""

    def __init__(self, t: float, message: str = ""):
        self.t = t
        super().__init__(message or f"non-finite state encountered at t = {t:.6g} s")


@dataclass(frozen=True)
class JansenRitParams:
    """Physiological constants of one cortical column (defaults: seizure column).

    ``p`` is the constant external pulse density. ``p = 0`` puts the model's
    Hopf point at ``A ~= 7.21`` mV, which separates the normal and the
    seizure-like regimes for the remaining constants.
    """

    A: float = 7.8
    B_inh: float = 22.0
    a: float = 100.0
    b: float = 50.0
    v0: float = 6.0
    r: float = 0.56
    e0: float = 2.5
    C1: float = 135.0
    C2: float = 108.0
    C3: float = 33.75
    C4: float = 33.75
    p: float = 0.0

    def __post_init__(self):
        for name in ("a", "b", "r", "e0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("C1", "C2", "C3", "C4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def replace(self, **changes) -> "JansenRitParams":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DoubleColumnParams:
    """Two coupled columns; ``a_d`` defaults to ``col1.a / 3``."""

    col1: JansenRitParams = field(default_factory=lambda: JansenRitParams(A=7.8))
    col2: JansenRitParams = field(default_factory=lambda: JansenRitParams(A=7.0))
    K1: float = 100.0
    K2: float = 100.0
    a_d: Optional[float] = None

    def __post_init__(self):
        if self.a_d is None:
            object.__setattr__(self, "a_d", self.col1.a / 3.0)
        if not self.a_d > 0:
            raise ValueError("a_d must be positive")

    def replace(self, **changes) -> "DoubleColumnParams":
        return dataclasses.replace(self, **changes)


@dataclass
class SimTrace:
    """Uniformly sampled multichannel EEG with an optional aligned input."""

    rate: float
    t: np.ndarray
    eeg: np.ndarray
    u: Optional[np.ndarray] = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.eeg = np.asarray(self.eeg, dtype=float)
        if self.eeg.ndim == 1:
            self.eeg = self.eeg[:, None]
        if self.u is not None:
            self.u = np.asarray(self.u, dtype=float)
            if self.u.ndim == 1:
                self.u = self.u[:, None]
            if len(self.u) != len(self.eeg):
                raise ValueError("input and EEG lengths differ")
        if len(self.t) != len(self.eeg):
            raise ValueError("time stamps and EEG lengths differ")
        if len(self.t) > 1:
            dt = np.diff(self.t)
            if np.any(dt <= 0) or not np.allclose(dt, 1.0 / self.rate, rtol=1e-9, atol=1e-12):
                raise ValueError("time stamps must be uniformly spaced at 1/rate")

    @property
    def n_channels(self) -> int:
        return self.eeg.shape[1]

    def __len__(self) -> int:
        return len(self.t)

    def segment(self, start: int, stop: Optional[int] = None) -> "SimTrace":
        u = None if self.u is None else self.u[start:stop]
        return SimTrace(self.rate, self.t[start:stop], self.eeg[start:stop], u)

    def index_of(self, time: float) -> int:
        """Index of the sample nearest to absolute time ``time``."""
        return int(round((time - self.t[0]) * self.rate))


def sigmoid(v, params: JansenRitParams):
    """Potential-to-rate function ``2 e0 / (1 + exp(r (v0 - v)))``, overflow-safe."""
    return 2.0 * params.e0 * expit(params.r * (v - params.v0))


def single_column_rhs(y: np.ndarray, t: float, u: float, params: JansenRitParams) -> np.ndarray:
    if len(y) != SINGLE_DIM:
        raise ValueError(f"single column state must have {SINGLE_DIM} entries, got {len(y)}")
    P = params
    y1, y2, y3, y4, y5, y6 = y
    a, b = P.a, P.b
    return np.array([
        y4,
        y5 + u,
        y6,
        P.A * a * sigmoid(y2 - y3, P) - 2.0 * a * y4 - a * a * y1,
        P.A * a * (P.p + P.C2 * sigmoid(P.C1 * y1, P)) - 2.0 * a * y5 - a * a * y2,
        P.B_inh * b * P.C4 * sigmoid(P.C3 * y1, P) - 2.0 * b * y6 - b * b * y3,
    ])


def double_column_rhs(y: np.ndarray, t: float, u: float, params: DoubleColumnParams) -> np.ndarray:
    """Two columns coupled through delayed PSPs.

    Transcribed term-by-term, including the delayed rows' use of the column-2
    gain ``A'`` and the stiffness ``a**2``. Column 2 rows use column 2's own
    ``a``, ``b`` and sigmoid constants (identical to column 1 by default), so
    with ``K1 = K2 = 0`` each column evolves exactly like a single column.
    """
    if len(y) != DOUBLE_DIM:
        raise ValueError(f"double column state must have {DOUBLE_DIM} entries, got {len(y)}")
    P1, P2 = params.col1, params.col2
    K1, K2, ad = params.K1, params.K2, params.a_d
    a, b = P1.a, P1.b
    a2, b2 = P2.a, P2.b
    d = np.empty(DOUBLE_DIM)
    s1 = sigmoid(y[1] - y[2], P1)
    s2 = sigmoid(y[7] - y[8], P2)
    # column 1
    d[0] = y[3]
    d[3] = P1.A * a * s1 - 2.0 * a * y[3] - a * a * y[0]
    d[1] = y[4] + u
    d[4] = P1.A * a * (P1.p + P1.C2 * sigmoid(P1.C1 * y[0], P1) + K2 * y[13]) - 2.0 * a * y[4] - a * a * y[1]
    d[2] = y[5]
    d[5] = P1.B_inh * b * P1.C4 * sigmoid(P1.C3 * y[0], P1) - 2.0 * b * y[5] - b * b * y[2]
    # column 2
    d[6] = y[9]
    d[9] = P2.A * a2 * s2 - 2.0 * a2 * y[9] - a2 * a2 * y[6]
    d[7] = y[10]
    d[10] = P2.A * a2 * (P2.p + P2.C2 * sigmoid(P2.C1 * y[6], P2) + K1 * y[12]) - 2.0 * a2 * y[10] - a2 * a2 * y[7]
    d[8] = y[11]
    d[11] = P2.B_inh * b2 * P2.C4 * sigmoid(P2.C3 * y[6], P2) - 2.0 * b2 * y[11] - b2 * b2 * y[8]
    # delayed inter-column PSPs
    d[12] = y[14]
    d[14] = P2.A * ad * s1 - 2.0 * ad * y[14] - a * a * y[12]
    d[13] = y[15]
    d[15] = P2.A * ad * s2 - 2.0 * ad * y[15] - a * a * y[13]
    return d


def eeg_output(y: np.ndarray) -> np.ndarray:
    """EEG channel(s) from a state vector or a ``(T, dim)`` state array."""
    y = np.asarray(y)
    dim = y.shape[-1]
    if dim == SINGLE_DIM:
        return (y[..., 1] - y[..., 2])[..., None]
    if dim == DOUBLE_DIM:
        return np.stack([y[..., 1] - y[..., 2], y[..., 7] - y[..., 8]], axis=-1)
    raise ValueError(f"unsupported state dimension {dim}")


RhsFn = Callable[[np.ndarray, float, float], np.ndarray]


def rk4_step(rhs: RhsFn, y: np.ndarray, t: float, h: float, u: float) -> np.ndarray:
    k1 = rhs(y, t, u)
    k2 = rhs(y + 0.5 * h * k1, t + 0.5 * h, u)
    k3 = rhs(y + 0.5 * h * k2, t + 0.5 * h, u)
    k4 = rhs(y + h * k3, t + h, u)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(
    rhs: RhsFn,
    initial,
    duration: float,
    step: float,
    input_signal: Optional[Sequence[float]] = None,
    input_rate: Optional[float] = None,
):
    """Classical fixed-step RK4.

    ``input_signal`` holds samples of u(t) at ``input_rate`` (defaults to
    ``1/step``) and is applied with a zero-order hold. Returns ``(t, states)``
    with ``states[i]`` the state at ``t[i] = i * step``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if duration < step:
        raise ValueError("duration must be at least one step")
    n_steps = int(round(duration / step))
    y = np.array(initial, dtype=float)
    states = np.empty((n_steps + 1, y.size))
    states[0] = y
    if input_signal is not None:
        u_samples = np.asarray(input_signal, dtype=float).ravel()
        rate = input_rate if input_rate is not None else 1.0 / step
        idx = np.minimum((np.arange(n_steps) * step * rate + 1e-9).astype(int), len(u_samples) - 1)
        u_fine = u_samples[idx]
    else:
        u_fine = np.zeros(n_steps)
    for i in range(n_steps):
        t = i * step
        y = rk4_step(rhs, y, t, step, u_fine[i])
        if not np.all(np.isfinite(y)):
            raise IntegrationError(t + step)
        states[i + 1] = y
    return np.arange(n_steps + 1) * step, states


class Plant:
    """Stateful stepper advancing a column model one sample period at a time.

    Shares :func:`rk4_step` with :func:`generate_trace`, so an open-loop run
    through ``Plant`` reproduces ``generate_trace`` bit for bit.
    """

    def __init__(self, params, sample_rate: float = 50.0, step: float = 1e-3, initial=None):
        self.set_params(params)
        dim = DOUBLE_DIM if isinstance(params, DoubleColumnParams) else SINGLE_DIM
        self.substeps = _substeps(sample_rate, step)
        self.step = step
        self.rate = sample_rate
        self.y = np.zeros(dim) if initial is None else np.array(initial, dtype=float)
        self.n = 0

    def set_params(self, params) -> None:
        self.params = params
        if isinstance(params, DoubleColumnParams):
            self._rhs = lambda y, t, u: double_column_rhs(y, t, u, params)
        else:
            self._rhs = lambda y, t, u: single_column_rhs(y, t, u, params)

    @property
    def time(self) -> float:
        return self.n * self.substeps * self.step

    def output(self) -> np.ndarray:
        return eeg_output(self.y)

    def advance(self, u: float = 0.0) -> np.ndarray:
        """Hold ``u`` for one sample period; return the new EEG sample."""
        base = self.n * self.substeps
        y = self.y
        for j in range(self.substeps):
            y = rk4_step(self._rhs, y, (base + j) * self.step, self.step, u)
        if not np.all(np.isfinite(y)):
            raise IntegrationError((base + self.substeps) * self.step)
        self.y = y
        self.n += 1
        return self.output()


def _substeps(sample_rate: float, step: float) -> int:
    ratio = 1.0 / (sample_rate * step)
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9 * ratio:
        raise ValueError(f"sample period 1/{sample_rate} is not a multiple of step {step}")
    return n


def generate_trace(
    params,
    duration: float = 20.0,
    sample_rate: float = 50.0,
    input_signal: Optional[Sequence[float]] = None,
    burn_in: float = 2.0,
    step: float = 1e-3,
    initial=None,
    noise_seed: Optional[int] = None,
    p_range: tuple = (120.0, 320.0),
) -> SimTrace:
    """Simulate a single (``JansenRitParams``) or double column and sample the EEG.

    ``input_signal`` gives u at ``sample_rate`` from t = 0, held over each
    sample period. The returned trace keeps samples at ``t >= burn_in``;
    time stamps stay on the absolute simulation clock.

    With ``noise_seed`` set, the external drive ``p`` of every column is
    redrawn each sample period uniformly from ``p_range``.
    """
    if not duration > burn_in:
        raise ValueError("duration must exceed burn-in")
    n_samples = int(round(duration * sample_rate))
    u = np.zeros(n_samples)
    if input_signal is not None:
        given = np.asarray(input_signal, dtype=float).ravel()
        if len(given) < n_samples:
            raise ValueError(f"input signal has {len(given)} samples, need {n_samples}")
        u = given[:n_samples].copy()

    rng = np.random.default_rng(noise_seed) if noise_seed is not None else None
    plant = Plant(params, sample_rate, step, initial)
    eeg = np.empty((n_samples, plant.output().size))
    for i in range(n_samples):
        eeg[i] = plant.output()
        if rng is not None:
            plant.set_params(_with_drive(params, rng, p_range))
        plant.advance(u[i])

    keep = int(round(burn_in * sample_rate))
    t = np.arange(keep, n_samples) / sample_rate
    return SimTrace(sample_rate, t, eeg[keep:], u[keep:] if input_signal is not None else None)


def _with_drive(params, rng, p_range):
    lo, hi = p_range
    if isinstance(params, DoubleColumnParams):
        return params.replace(
            col1=params.col1.replace(p=rng.uniform(lo, hi)),
            col2=params.col2.replace(p=rng.uniform(lo, hi)),
        )
    return params.replace(p=rng.uniform(lo, hi))


def save_trace(trace: SimTrace, path, **metadata) -> Path:
    """Write ``t,ch0[,ch1],u`` CSV plus a ``.json`` sidecar with the rate."""
    path = Path(path)
    n = trace.n_channels
    u = trace.u[:, 0] if trace.u is not None else np.zeros(len(trace))
    header = ",".join(["t"] + [f"ch{i}" for i in range(n)] + ["u"])
    cols = np.column_stack([trace.t, trace.eeg, u])
    lines = [header] + [",".join(repr(float(v)) for v in row) for row in cols]
    _atomic_write(path, "\n".join(lines) + "\n")
    meta = {"sample_rate": trace.rate, "n_channels": n, "n_samples": len(trace),
            "has_input": trace.u is not None}
    meta.update(metadata)
    _atomic_write(path.with_suffix(".json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_trace(path) -> SimTrace:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = meta["n_channels"]
    u = data[:, 1 + n] if meta.get("has_input", True) else None
    return SimTrace(meta["sample_rate"], data[:, 0], data[:, 1:1 + n], u)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
