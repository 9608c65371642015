"""Deep Koopman autoencoder: lifted linear surrogate of windowed EEG.

An encoder ``g`` maps a delay window of ``window`` samples (all channels,
time-major) to a ``latent_dim`` vector; a decoder maps latents back to a
window. The operator ``K`` is a least-squares fit between consecutive
latents and ``B`` an optional input gain, so that ``z[i+1] ~ K z[i] + B u[i]``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .nn import Adam, DenseNet, array_from_dict, array_to_dict, net_from_dict, net_to_dict

LOSS_TERMS = ("recon", "ypred", "zpred", "lin")
ALL_TERMS: FrozenSet[str] = frozenset(LOSS_TERMS)
PINV_RCOND = 1e-10


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"loss became non-finite in epoch {epoch}")


class Unidentifiable(ValueError):
    """The input sequence carries no excitation, so ``B`` cannot be fitted."""


@dataclass(frozen=True)
class LiftingConfig:
    window: int = 60
    n_channels: int = 1
    latent_dim: int = 40
    enc_hidden: int = 60
    dec_hidden: int = 60
    pred_steps: int = 10
    alpha: float = 0.01
    lr: float = 1e-3
    batch_length: int = 100
    epochs: int = 200
    refit_period: int = 20
    refit_length: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim <= 0 or self.window <= 0 or self.n_channels <= 0:
            raise ValueError("window, n_channels and latent_dim must be positive")
        if self.pred_steps < 1:
            raise ValueError("pred_steps must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.refit_period < 1 or self.refit_length < 1:
            raise ValueError("refit_period and refit_length must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.window * self.n_channels

    def replace(self, **changes) -> "LiftingConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class KoopmanModel:
    encoder: DenseNet
    decoder: DenseNet
    operator: np.ndarray
    config: LiftingConfig
    input_gain: Optional[np.ndarray] = None
    offset: np.ndarray = field(default=None)
    scale: np.ndarray = field(default=None)
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        n = self.config.n_channels
        self.offset = np.zeros(n) if self.offset is None else np.asarray(self.offset, float)
        self.scale = np.ones(n) if self.scale is None else np.asarray(self.scale, float)
        k = self.config.latent_dim
        if self.operator.shape != (k, k):
            raise ValueError(f"operator must be {k}x{k}")
        if self.encoder.in_dim != self.config.input_dim or self.decoder.out_dim != self.config.input_dim:
            raise ValueError("encoder/decoder do not match the window size")
        if self.encoder.out_dim != k or self.decoder.in_dim != k:
            raise ValueError("encoder/decoder do not match the latent dimension")

    @classmethod
    def initialise(cls, config: LiftingConfig, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        d, k = config.input_dim, config.latent_dim
        enc = DenseNet.build([d, config.enc_hidden, k], rng)
        dec = DenseNet.build([k, config.dec_hidden, d], rng)
        return cls(enc, dec, np.eye(k), config)

    def params(self) -> List[np.ndarray]:
        return self.encoder.params() + self.decoder.params()

    def weights(self) -> List[np.ndarray]:
        return self.encoder.weights() + self.decoder.weights()

    # raw series (T, n) <-> standardized series
    def normalise(self, series: np.ndarray) -> np.ndarray:
        return (np.asarray(series, float) - self.offset) / self.scale

    def denormalise(self, series: np.ndarray) -> np.ndarray:
        return np.asarray(series, float) * self.scale + self.offset

    def encode_series(self, series: np.ndarray) -> np.ndarray:
        """Latents of every full window of a raw ``(T, n)`` series, as columns."""
        return self.encoder(window_matrix(self.normalise(series), self.config.window))

    def encode_window(self, window: np.ndarray) -> np.ndarray:
        w = self.normalise(np.asarray(window, float).reshape(self.config.window, -1))
        return self.encoder(w.ravel())

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """Decode latent vector(s) to raw window(s) of shape ``(window, n)``."""
        out = self.decoder(latent)
        if out.ndim == 1:
            return self.denormalise(out.reshape(self.config.window, -1))
        return np.stack([self.denormalise(c.reshape(self.config.window, -1)) for c in out.T])


@dataclass
class SnapshotMatrices:
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    shift: int

    @property
    def n_columns(self) -> int:
        return self.X.shape[1]


@dataclass
class LossTerms:
    recon: float
    ypred: float
    zpred: float
    lin: float
    reg: float
    total: float

    def as_dict(self):
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# windows and least-squares fits


def window_matrix(series: np.ndarray, window: int) -> np.ndarray:
    """Column ``j`` is ``series[j:j+window]`` flattened time-major."""
    s = np.asarray(series, float)
    if s.ndim == 1:
        s = s[:, None]
    if len(s) < window:
        raise ValueError(f"series of length {len(s)} shorter than window {window}")
    views = sliding_window_view(s, window, axis=0)  # (T-w+1, n, w)
    return np.ascontiguousarray(views.transpose(0, 2, 1).reshape(views.shape[0], -1).T)


def embed_windows(trace, window: int, pred_steps: int) -> SnapshotMatrices:
    """Build ``X``, ``Y`` (one step ahead) and ``Z`` (``pred_steps`` ahead)."""
    series = trace.eeg if hasattr(trace, "eeg") else np.asarray(trace, float)
    if series.ndim == 1:
        series = series[:, None]
    if len(series) < window + pred_steps:
        raise ValueError(
            f"trace too short: {len(series)} samples, need at least {window + pred_steps}"
        )
    W = window_matrix(series, window)
    n = W.shape[1] - pred_steps
    return SnapshotMatrices(W[:, :n], W[:, 1:n + 1], W[:, pred_steps:pred_steps + n], pred_steps)


def pinv(A: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    """SVD pseudo-inverse, zeroing singular values below ``rcond * s_max``."""
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros(A.T.shape)
    keep = s > rcond * s[0]
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def fit_operator(Xt: np.ndarray, Yt: np.ndarray, rcond: float = PINV_RCOND) -> np.ndarray:
    """Minimum-norm least-squares ``K`` with ``Yt ~ K Xt``."""
    Xt, Yt = np.atleast_2d(Xt), np.atleast_2d(Yt)
    if Xt.shape != Yt.shape:
        raise ValueError(f"shape mismatch {Xt.shape} vs {Yt.shape}")
    return Yt @ pinv(Xt, rcond)


def fit_input_gain(latents: np.ndarray, inputs: np.ndarray, rcond: float = PINV_RCOND):
    """Jointly fit ``K`` and ``B`` from ``z[i+1] ~ K z[i] + B u[i]``.

    ``latents`` is ``(k, N+1)``; ``inputs`` is ``(m, N)`` (or length ``N``).
    """
    Z = np.atleast_2d(latents)
    U = np.asarray(inputs, float)
    if U.ndim == 1:
        U = U[None, :]
    if Z.shape[1] != U.shape[1] + 1:
        raise ValueError("need one more latent column than input columns")
    if not np.any(U):
        raise Unidentifiable("all-zero input sequence: B is unidentifiable")
    k = Z.shape[0]
    G = Z[:, 1:] @ pinv(np.vstack([Z[:, :-1], U]), rcond)
    return G[:, :k], G[:, k:]


# --------------------------------------------------------------------------
# loss


def _loss_and_grads(model: KoopmanModel, X, Y, Z, K, active=ALL_TERMS, need_grad=True):
    cfg = model.config
    enc, dec = model.encoder, model.decoder
    Kp = np.linalg.matrix_power(K, cfg.pred_steps)
    Xt, c_ex = enc.forward(X)
    Yt, c_ey = enc.forward(Y)
    KXt = K @ Xt
    Xh, c_d1 = dec.forward(Xt)
    Yh, c_d2 = dec.forward(KXt)
    Zh, c_d3 = dec.forward(Kp @ Xt)
    r_rec, r_y, r_z = Xh - X, Yh - Y, Zh - Z
    r_lin = Yt - KXt

    recon = float(np.mean(r_rec ** 2))
    ypred = float(np.mean(r_y ** 2))
    zpred = float(np.mean(r_z ** 2))
    lin = float(np.mean(r_lin ** 2))
    reg = cfg.alpha * float(sum(np.sum(W * W) for W in model.weights()))
    values = {"recon": recon, "ypred": ypred, "zpred": zpred, "lin": lin}
    total = sum(values[t] for t in active) + reg
    terms = LossTerms(recon, ypred, zpred, lin, reg, total)
    if not need_grad:
        return terms, None

    dec_grads = [np.zeros_like(p) for p in dec.params()]
    gXt = np.zeros_like(Xt)
    gYt = np.zeros_like(Yt)

    def through_decoder(cache, resid):
        g, g_in = dec.backward(cache, (2.0 / resid.size) * resid)
        for acc, gi in zip(dec_grads, g):
            acc += gi
        return g_in

    if "recon" in active:
        gXt += through_decoder(c_d1, r_rec)
    if "ypred" in active:
        gXt += K.T @ through_decoder(c_d2, r_y)
    if "zpred" in active:
        gXt += Kp.T @ through_decoder(c_d3, r_z)
    if "lin" in active:
        g_lin = (2.0 / r_lin.size) * r_lin
        gYt += g_lin
        gXt -= K.T @ g_lin

    enc_grads, _ = enc.backward(c_ex, gXt)
    enc_grads_y, _ = enc.backward(c_ey, gYt)
    grads = [a + b for a, b in zip(enc_grads, enc_grads_y)] + dec_grads
    # L2 on weight matrices only (even slots of each net's param list)
    for i, p in enumerate(model.params()):
        if i % 2 == 0:
            grads[i] = grads[i] + 2.0 * cfg.alpha * p
    return terms, grads


def total_loss(model: KoopmanModel, X, Y, Z, operator=None, active=ALL_TERMS) -> LossTerms:
    """Four mean-squared terms plus ``alpha * sum ||W||^2``.

    With ``operator=None`` the operator is refitted from ``g(X)``, ``g(Y)``,
    as during training.
    """
    for M in (Y, Z):
        if M.shape != X.shape:
            raise ValueError("X, Y, Z must share a shape")
    K = operator if operator is not None else fit_operator(model.encoder(X), model.encoder(Y))
    return _loss_and_grads(model, X, Y, Z, K, frozenset(active), need_grad=False)[0]


def loss_gradients(model: KoopmanModel, X, Y, Z, operator, active=ALL_TERMS):
    """Analytic gradient of :func:`total_loss` with the operator held fixed."""
    return _loss_and_grads(model, X, Y, Z, operator, frozenset(active))


# --------------------------------------------------------------------------
# training


def _batches(n_columns: int, length: int):
    n_batches = max(1, n_columns // length)
    edges = np.linspace(0, n_columns, n_batches + 1).astype(int)
    return list(zip(edges[:-1], edges[1:]))


def train(trace, config: LiftingConfig, active=ALL_TERMS, callback=None) -> KoopmanModel:
    """Adam over contiguous batches; ``K`` is refitted per batch and held fixed.

    ``active`` selects which of the four data terms enter the objective.
    """
    active = frozenset(active)
    unknown = active - ALL_TERMS
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    series = trace.eeg if hasattr(trace, "eeg") else np.asarray(trace, float)
    if series.ndim == 1:
        series = series[:, None]
    if series.shape[1] != config.n_channels:
        raise ValueError(f"config expects {config.n_channels} channels, trace has {series.shape[1]}")
    if len(series) < config.window + config.pred_steps + 1:
        raise ValueError("trace too short for a single batch")

    rng = np.random.default_rng(config.seed)
    model = KoopmanModel.initialise(config, rng)
    model.offset = series.mean(axis=0)
    sd = series.std(axis=0)
    model.scale = np.where(sd > 0, sd, 1.0)

    snaps = embed_windows(model.normalise(series), config.window, config.pred_steps)
    spans = _batches(snaps.n_columns, config.batch_length)
    opt = Adam(model.params(), lr=config.lr)

    for epoch in range(1, config.epochs + 1):
        losses = []
        for bi in rng.permutation(len(spans)):
            lo, hi = spans[bi]
            X, Y, Z = snaps.X[:, lo:hi], snaps.Y[:, lo:hi], snaps.Z[:, lo:hi]
            Xt, Yt = model.encoder(X), model.encoder(Y)
            if not (np.all(np.isfinite(Xt)) and np.all(np.isfinite(Yt))):
                raise TrainingDiverged(epoch)
            K = fit_operator(Xt, Yt)
            terms, grads = _loss_and_grads(model, X, Y, Z, K, active)
            if not np.isfinite(terms.total) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(epoch)
            opt.step(grads)
            losses.append(terms.total)
        model.history.append(float(np.mean(losses)))
        if callback is not None:
            callback(epoch, model)

    model.operator = fit_operator(model.encoder(snaps.X), model.encoder(snaps.Y))
    return model


# --------------------------------------------------------------------------
# prediction


def predict(model: KoopmanModel, observed, start: int, horizon: int, refit_period=None,
            inputs=None, refit_operator: bool = True) -> np.ndarray:
    """Roll the lifted linear model forward from the window ending at ``start``.

    ``observed`` is a raw ``(T, n)`` series (or SimTrace). Without
    ``refit_period`` the model free-runs with its stored operator. With it,
    every ``refit_period`` steps the latent is re-anchored to the encoded true
    window and (if ``refit_operator``) the operator is refitted on the latest
    ``refit_length`` window pairs observed up to that point.

    ``inputs[s]`` (length ``horizon``) is applied between steps ``s`` and
    ``s + 1`` through the model's input gain.

    Returns ``(window + horizon, n)``: the decoded seed window, then one
    predicted sample per step.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    series = observed.eeg if hasattr(observed, "eeg") else np.asarray(observed, float)
    if series.ndim == 1:
        series = series[:, None]
    cfg = model.config
    w = cfg.window
    if start < w - 1:
        raise ValueError(f"start must be >= window - 1 = {w - 1}")
    if refit_period is not None and refit_period < 1:
        raise ValueError("refit_period must be >= 1")
    if inputs is not None:
        inputs = np.asarray(inputs, float).reshape(horizon, -1)
        if model.input_gain is None:
            raise ValueError("model has no input gain")

    K = model.operator
    z = model.encode_window(series[start - w + 1:start + 1])
    out = [model.decode(z)]
    for s in range(horizon):
        now = start + s
        if refit_period is not None and s % refit_period == 0:
            if now >= len(series):
                raise ValueError("observed series ends before the prediction horizon")
            z = model.encode_window(series[now - w + 1:now + 1])
            if refit_operator:
                K = refit_recent(model, series[:now + 1])
        z = K @ z
        if inputs is not None:
            z = z + model.input_gain @ inputs[s]
        out.append(model.decode(z)[-1:])
    return np.vstack(out)


def refit_recent(model: KoopmanModel, history: np.ndarray) -> np.ndarray:
    """Operator fitted on the latest ``refit_length`` window pairs of ``history``."""
    cfg = model.config
    need = cfg.window + cfg.refit_length
    lat = model.encode_series(history[-need:])
    if lat.shape[1] < 2:
        return model.operator
    return fit_operator(lat[:, :-1], lat[:, 1:])


def rolling_forecast(model: KoopmanModel, observed, start: int, stop: int, refit_period=None):
    """Predicted samples ``start+1 .. stop`` (raw units), anchoring every ``refit_period``."""
    R = refit_period if refit_period is not None else model.config.refit_period
    return predict(model, observed, start, stop - start, refit_period=R)[model.config.window:]


# --------------------------------------------------------------------------
# spectrum


@dataclass
class Spectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    frequency_hz: np.ndarray
    growth_rate: np.ndarray
    approximate: bool


def spectral_decomposition(K: np.ndarray, rate: float = 50.0) -> Spectrum:
    """Eigenpairs with continuous-time frequency and growth rate per mode."""
    K = np.atleast_2d(np.asarray(K, float))
    if K.shape[0] != K.shape[1]:
        raise ValueError("operator must be square")
    lam, V = np.linalg.eig(K)
    with np.errstate(divide="ignore"):
        growth = np.log(np.abs(lam)) * rate
    freq = np.angle(lam) * rate / (2.0 * np.pi)
    approximate = bool(np.linalg.cond(V) > 1e12)
    return Spectrum(lam, V, freq, growth, approximate)


# --------------------------------------------------------------------------
# checkpoints


def model_to_dict(model: KoopmanModel) -> dict:
    return {
        "kind": "koopman",
        "config": dataclasses.asdict(model.config),
        "encoder": net_to_dict(model.encoder),
        "decoder": net_to_dict(model.decoder),
        "operator": array_to_dict(model.operator),
        "input_gain": None if model.input_gain is None else array_to_dict(model.input_gain),
        "offset": array_to_dict(model.offset),
        "scale": array_to_dict(model.scale),
        "history": list(model.history),
    }


def model_from_dict(d: dict) -> KoopmanModel:
    if d.get("kind") != "koopman":
        raise ValueError(f"not a koopman checkpoint (kind={d.get('kind')!r})")
    gain = d.get("input_gain")
    return KoopmanModel(
        encoder=net_from_dict(d["encoder"]),
        decoder=net_from_dict(d["decoder"]),
        operator=array_from_dict(d["operator"]),
        config=LiftingConfig(**d["config"]),
        input_gain=None if gain is None else array_from_dict(gain),
        offset=array_from_dict(d["offset"]),
        scale=array_from_dict(d["scale"]),
        history=list(d.get("history", [])),
    )


def save_model(model: KoopmanModel, path) -> Path:
    from .neural_mass import _atomic_write

    path = Path(path)
    _atomic_write(path, json.dumps(model_to_dict(model)) + "\n")
    return path


def load_model(path) -> KoopmanModel:
    return model_from_dict(json.loads(Path(path).read_text()))
