"""GRU identification baseline and the Koopman loss ablations.

The GRU predicts ``horizon`` future outputs: a dense network maps the last
``n_prev_inputs`` inputs and ``n_prev_outputs`` outputs to the initial hidden
state, the cell is unrolled on the future inputs, and a second dense network
reads each hidden state out. Gates use ``hard_sigmoid(x) = clip(0.2 x + 0.5, 0, 1)``.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import koopman
from .nn import Adam, DenseNet, array_from_dict, array_to_dict, net_from_dict, net_to_dict


def hard_sigmoid(x):
    return np.clip(0.2 * x + 0.5, 0.0, 1.0)


def _hard_sigmoid_grad(x):
    return np.where(np.abs(x) < 2.5, 0.2, 0.0)


@dataclass(frozen=True)
class GruConfig:
    n_prev_inputs: int = 24
    n_prev_outputs: int = 25
    horizon: int = 175
    batch_size: int = 30
    init_hidden: int = 60
    out_hidden: int = 60
    units: int = 60
    rate: float = 50.0
    n_inputs: int = 1
    n_outputs: int = 1
    epochs: int = 30
    lr: float = 1e-3
    stride: int = 5
    seed: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name != "seed" and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")

    @property
    def history(self) -> int:
        return max(self.n_prev_inputs, self.n_prev_outputs)

    def replace(self, **changes) -> "GruConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class GruCell:
    Wi_z: np.ndarray
    Wi_r: np.ndarray
    Wi_h: np.ndarray
    Wx_z: np.ndarray
    Wx_r: np.ndarray
    Wx_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        p = self.Wx_z.shape[0]
        for W in (self.Wx_z, self.Wx_r, self.Wx_h):
            if W.shape != (p, p):
                raise ValueError("recurrent weights must be square and share the hidden size")
        m = self.Wi_z.shape[1]
        for W in (self.Wi_z, self.Wi_r, self.Wi_h):
            if W.shape != (p, m):
                raise ValueError("input weights must be (hidden, inputs)")
        for b in (self.b_z, self.b_r, self.b_h):
            if b.shape != (p,):
                raise ValueError("biases must have the hidden size")

    @classmethod
    def build(cls, n_inputs: int, units: int, rng: np.random.Generator) -> "GruCell":
        lim_i = np.sqrt(6.0 / (n_inputs + units))
        lim_x = np.sqrt(6.0 / (2 * units))
        wi = [rng.uniform(-lim_i, lim_i, (units, n_inputs)) for _ in range(3)]
        wx = [rng.uniform(-lim_x, lim_x, (units, units)) for _ in range(3)]
        return cls(*wi, *wx, np.zeros(units), np.zeros(units), np.zeros(units))

    @property
    def names(self):
        return [f.name for f in dataclasses.fields(self)]

    def params(self) -> List[np.ndarray]:
        return [getattr(self, n) for n in self.names]


def gru_cell(x: np.ndarray, v: np.ndarray, w: GruCell) -> np.ndarray:
    """One update of the gated recurrent unit; ``x``/``v`` may carry a batch axis last."""
    return _cell_forward(x, v, w)[0]


def _cell_forward(x, v, w: GruCell):
    squeeze = x.ndim == 1
    if squeeze:
        x, v = x[:, None], np.asarray(v, float).reshape(-1, 1)
    if x.shape[0] != w.Wx_z.shape[0] or v.shape[0] != w.Wi_z.shape[1]:
        raise ValueError("state/input dimensions do not match the cell")
    a_z = w.Wi_z @ v + w.Wx_z @ x + w.b_z[:, None]
    a_r = w.Wi_r @ v + w.Wx_r @ x + w.b_r[:, None]
    z = hard_sigmoid(a_z)
    r = hard_sigmoid(a_r)
    a_h = w.Wi_h @ v + w.Wx_h @ (r * x) + w.b_h[:, None]
    h = np.tanh(a_h)
    x_next = z * x + (1.0 - z) * h
    if squeeze:
        return x_next[:, 0], None
    return x_next, (x, v, a_z, a_r, z, r, h)


def _cell_backward(w: GruCell, cache, g_next, grads):
    x, v, a_z, a_r, z, r, h = cache
    g_z = g_next * (x - h)
    g_h = g_next * (1.0 - z)
    g_x = g_next * z
    g_ah = g_h * (1.0 - h * h)
    rx = r * x
    grads["Wi_h"] += g_ah @ v.T
    grads["Wx_h"] += g_ah @ rx.T
    grads["b_h"] += g_ah.sum(axis=1)
    g_rx = w.Wx_h.T @ g_ah
    g_x += g_rx * r
    g_ar = g_rx * x * _hard_sigmoid_grad(a_r)
    grads["Wi_r"] += g_ar @ v.T
    grads["Wx_r"] += g_ar @ x.T
    grads["b_r"] += g_ar.sum(axis=1)
    g_x += w.Wx_r.T @ g_ar
    g_az = g_z * _hard_sigmoid_grad(a_z)
    grads["Wi_z"] += g_az @ v.T
    grads["Wx_z"] += g_az @ x.T
    grads["b_z"] += g_az.sum(axis=1)
    g_x += w.Wx_z.T @ g_az
    return g_x


@dataclass
class GruModel:
    init_net: DenseNet
    cell: GruCell
    out_net: DenseNet
    config: GruConfig
    offset: np.ndarray = field(default=None)
    scale: np.ndarray = field(default=None)
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        n = self.config.n_outputs
        self.offset = np.zeros(n) if self.offset is None else np.asarray(self.offset, float)
        self.scale = np.ones(n) if self.scale is None else np.asarray(self.scale, float)

    @classmethod
    def initialise(cls, config: GruConfig, rng: np.random.Generator) -> "GruModel":
        c = config
        d_hist = c.n_prev_inputs * c.n_inputs + c.n_prev_outputs * c.n_outputs
        init_net = DenseNet.build([d_hist, c.init_hidden, c.units], rng, output="tanh")
        cell = GruCell.build(c.n_inputs, c.units, rng)
        out_net = DenseNet.build([c.units, c.out_hidden, c.n_outputs], rng)
        return cls(init_net, cell, out_net, config)

    def params(self) -> List[np.ndarray]:
        return self.init_net.params() + self.cell.params() + self.out_net.params()

    def forward(self, hist, future_u, need_cache=False):
        """``hist``: (d_hist, B); ``future_u``: (T, m, B). Returns (T, n, B) outputs."""
        x, c_init = self.init_net.forward(hist)
        cells = []
        states = []
        for k in range(future_u.shape[0]):
            x, cache = _cell_forward(x, future_u[k], self.cell)
            cells.append(cache)
            states.append(x)
        T, B = len(states), hist.shape[1]
        X = np.concatenate(states, axis=1)  # (p, T*B), step-major
        Yh, c_out = self.out_net.forward(X)
        out = Yh.reshape(-1, T, B).transpose(1, 0, 2)
        if need_cache:
            return out, (c_init, cells, c_out, T, B)
        return out

    def backward(self, caches, g_out):
        c_init, cells, c_out, T, B = caches
        n = g_out.shape[1]
        g_flat = g_out.transpose(1, 0, 2).reshape(n, T * B)
        out_grads, gX = self.out_net.backward(c_out, g_flat)
        cell_grads = {name: np.zeros_like(p) for name, p in zip(self.cell.names, self.cell.params())}
        g_x = np.zeros((self.cell.Wx_z.shape[0], B))
        for k in range(T - 1, -1, -1):
            g_x = g_x + gX[:, k * B:(k + 1) * B]
            g_x = _cell_backward(self.cell, cells[k], g_x, cell_grads)
        init_grads, _ = self.init_net.backward(c_init, g_x)
        return init_grads + [cell_grads[nm] for nm in self.cell.names] + out_grads


def _sequences(y: np.ndarray, u: np.ndarray, starts, cfg: GruConfig):
    """History matrix, future inputs and targets for each anchor index ``s``.

    Anchor ``s`` is the last observed sample; targets are ``y[s+1 .. s+T]``,
    driven by inputs ``u[s .. s+T-1]``.
    """
    T = cfg.horizon
    hist = []
    fut_u = []
    tgt = []
    for s in starts:
        past_u = u[s - cfg.n_prev_inputs:s].ravel()
        past_y = y[s - cfg.n_prev_outputs + 1:s + 1].ravel()
        hist.append(np.concatenate([past_u, past_y]))
        fut_u.append(u[s:s + T])
        tgt.append(y[s + 1:s + 1 + T])
    hist = np.array(hist).T
    fut_u = np.array(fut_u).transpose(1, 2, 0)
    tgt = np.array(tgt).transpose(1, 2, 0)
    return hist, fut_u, tgt


def _as_arrays(trace, cfg: GruConfig):
    y = trace.eeg if hasattr(trace, "eeg") else np.asarray(trace, float)
    if y.ndim == 1:
        y = y[:, None]
    u = getattr(trace, "u", None)
    u = np.zeros((len(y), cfg.n_inputs)) if u is None else np.asarray(u, float).reshape(len(y), -1)
    return y, u


def gru_loss(model: GruModel, hist, fut_u, tgt, need_grad=True):
    out, caches = model.forward(hist, fut_u, need_cache=True)
    resid = out - tgt
    loss = float(np.mean(resid ** 2))
    if not need_grad:
        return loss, None
    return loss, model.backward(caches, (2.0 / resid.size) * resid)


def train_gru(trace, config: GruConfig) -> GruModel:
    """BPTT with Adam on the mean-squared multi-step prediction error."""
    y, u = _as_arrays(trace, config)
    if y.shape[1] != config.n_outputs:
        raise ValueError(f"config expects {config.n_outputs} outputs, trace has {y.shape[1]}")
    lo = config.history
    hi = len(y) - config.horizon - 1
    if hi < lo:
        raise ValueError("trace too short for one GRU training sequence")
    rng = np.random.default_rng(config.seed)
    model = GruModel.initialise(config, rng)
    model.offset = y.mean(axis=0)
    sd = y.std(axis=0)
    model.scale = np.where(sd > 0, sd, 1.0)
    yn = (y - model.offset) / model.scale

    starts = np.arange(lo, hi + 1, config.stride)
    hist, fut_u, tgt = _sequences(yn, u, starts, config)
    opt = Adam(model.params(), lr=config.lr)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(starts))
        losses = []
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            loss, grads = gru_loss(model, hist[:, idx], fut_u[:, :, idx], tgt[:, :, idx])
            if not np.isfinite(loss):
                raise koopman.TrainingDiverged(epoch)
            opt.step(grads)
            losses.append(loss)
        model.history.append(float(np.mean(losses)))
    return model


def predict_gru(model: GruModel, trace, start: int, horizon: int) -> np.ndarray:
    """Predicted outputs ``start+1 .. start+horizon`` (raw units), in chunks of
    the model horizon, each anchored on the true history."""
    cfg = model.config
    y, u = _as_arrays(trace, cfg)
    if start < cfg.history:
        raise ValueError(f"start must be >= {cfg.history}")
    yn = (y - model.offset) / model.scale
    pieces = []
    s = start
    while s < start + horizon:
        T = min(cfg.horizon, start + horizon - s)
        past_u = u[s - cfg.n_prev_inputs:s].ravel()
        past_y = yn[s - cfg.n_prev_outputs + 1:s + 1].ravel()
        hist = np.concatenate([past_u, past_y])[:, None]
        fut = np.zeros((T, cfg.n_inputs, 1))
        avail = u[s:s + T]
        fut[:len(avail), :, 0] = avail
        pieces.append(model.forward(hist, fut)[:, :, 0])
        s += T
    return np.vstack(pieces) * model.scale + model.offset


def gru_to_dict(model: GruModel) -> dict:
    return {
        "kind": "gru",
        "config": dataclasses.asdict(model.config),
        "init_net": net_to_dict(model.init_net),
        "cell": {n: array_to_dict(p) for n, p in zip(model.cell.names, model.cell.params())},
        "out_net": net_to_dict(model.out_net),
        "offset": array_to_dict(model.offset),
        "scale": array_to_dict(model.scale),
        "history": list(model.history),
    }


def gru_from_dict(d: dict) -> GruModel:
    if d.get("kind") != "gru":
        raise ValueError(f"not a gru checkpoint (kind={d.get('kind')!r})")
    cell = GruCell(**{n: array_from_dict(a) for n, a in d["cell"].items()})
    return GruModel(net_from_dict(d["init_net"]), cell, net_from_dict(d["out_net"]),
                    GruConfig(**d["config"]), array_from_dict(d["offset"]),
                    array_from_dict(d["scale"]), list(d.get("history", [])))


def save_gru(model: GruModel, path) -> Path:
    from .neural_mass import _atomic_write

    _atomic_write(Path(path), json.dumps(gru_to_dict(model)) + "\n")
    return Path(path)


def load_gru(path) -> GruModel:
    return gru_from_dict(json.loads(Path(path).read_text()))


class AblationSpec(enum.Enum):
    """Loss variants: the full objective and baseline models 2-5."""

    FULL = "full"
    NO_RECON = "model2"
    NO_YPRED = "model3"
    NO_ZPRED = "model4"
    NO_LIN = "model5"

    @property
    def dropped(self) -> Optional[str]:
        return {
            "full": None, "model2": "recon", "model3": "ypred", "model4": "zpred", "model5": "lin",
        }[self.value]

    @property
    def active_terms(self) -> frozenset:
        return koopman.ALL_TERMS - {self.dropped}

    @property
    def label(self) -> str:
        return "Koopman" if self is AblationSpec.FULL else f"model {self.value[-1]}"


def train_ablation(trace, config: koopman.LiftingConfig, spec: AblationSpec) -> koopman.KoopmanModel:
    """Same architecture and training as :func:`koopman.train` minus one loss term."""
    return koopman.train(trace, config, active=spec.active_terms)
