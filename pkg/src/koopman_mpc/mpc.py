"""Receding-horizon MPC over the lifted linear model.

The decision variable is the stacked sequence of input increments
``du[0..Tc-1]``. Absolute inputs are ``u[j] = u_prev + du[0] + ... + du[min(j, Tc-1)]``
so inputs past the control horizon are held at their last value.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from . import koopman
from .koopman import KoopmanModel, fit_input_gain, fit_operator, pinv
from .neural_mass import Plant, SimTrace, _atomic_write, generate_trace


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 15
    control_horizon: int = 15
    q_y: Union[float, tuple] = 1.0
    q_u: float = 0.01
    u_min: float = -25.0
    u_max: float = 0.0
    du_min: float = -20.0
    du_max: float = 0.0
    symmetric_increments: bool = False
    reference: str = "zero"
    control_start: float = 4.0
    refit_period: int = 20
    refit_length: int = 100
    excitation_std: float = 2.0
    tol: float = 1e-6
    max_iter: int = 10_000

    def __post_init__(self):
        if not 1 <= self.control_horizon <= self.horizon:
            raise ValueError("need 1 <= control_horizon <= horizon")
        if self.u_min > self.u_max:
            raise ValueError("u_min > u_max")
        if self.du_min > self.du_max:
            raise ValueError("du_min > du_max")
        if self.q_u < 0:
            raise ValueError("q_u must be >= 0")
        if self.refit_period < 1:
            raise ValueError("refit_period must be >= 1")
        if self.reference not in ("zero", "healthy"):
            raise ValueError("reference must be 'zero' or 'healthy'")

    @property
    def increment_bounds(self):
        """``(du_min, du_max)``, mirrored to ``[-max|.|, max|.|]`` when symmetric."""
        if self.symmetric_increments:
            m = max(abs(self.du_min), abs(self.du_max))
            return -m, m
        return self.du_min, self.du_max

    def weight_matrix(self, k: int) -> np.ndarray:
        q = np.asarray(self.q_y, dtype=float)
        if q.ndim == 0:
            return float(q) * np.eye(k)
        if q.shape != (k, k):
            raise ValueError(f"q_y must be scalar or {k}x{k}")
        if not np.allclose(q, q.T) or np.linalg.eigvalsh(q).min() <= 0:
            raise ValueError("q_y must be symmetric positive definite")
        return q

    def replace(self, **changes) -> "MpcConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class QpProblem:
    """``min 0.5 x'Hx + f'x + constant`` s.t. ``lb <= x <= ub`` and
    ``u_lo <= u_offset + A x <= u_hi``."""

    H: np.ndarray
    f: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    A: np.ndarray
    u_offset: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    constant: float = 0.0

    @property
    def n(self) -> int:
        return len(self.f)

    def objective(self, x) -> float:
        x = np.asarray(x, float)
        return float(0.5 * x @ self.H @ x + self.f @ x + self.constant)

    def constraint_matrix(self):
        """All constraints stacked as ``lo <= C x <= hi``."""
        C = np.vstack([np.eye(self.n), self.A])
        lo = np.concatenate([self.lb, self.u_lo - self.u_offset])
        hi = np.concatenate([self.ub, self.u_hi - self.u_offset])
        return C, lo, hi

    def max_violation(self, x) -> float:
        C, lo, hi = self.constraint_matrix()
        v = C @ x
        return float(max(0.0, np.max(lo - v), np.max(v - hi)))


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    iterations: int
    converged: bool
    polished: bool

    @property
    def degraded(self) -> bool:
        return not self.converged


def condense(K: np.ndarray, B: np.ndarray, z0: np.ndarray, u_prev, config: MpcConfig,
             y_ref: Optional[np.ndarray] = None) -> QpProblem:
    """Eliminate ``Y[i+1] = K Y[i] + B u[i]`` over the prediction horizon."""
    K = np.atleast_2d(np.asarray(K, float))
    B = np.asarray(B, float).reshape(K.shape[0], -1)
    z0 = np.asarray(z0, float).ravel()
    for name, M in (("operator", K), ("input gain", B), ("latent", z0)):
        if not np.all(np.isfinite(M)):
            raise ValueError(f"non-finite {name}")
    k, m = B.shape
    Tp, Tc = config.horizon, config.control_horizon
    u_prev = np.broadcast_to(np.asarray(u_prev, float).ravel(), (m,))
    y_ref = np.zeros(k) if y_ref is None else np.asarray(y_ref, float).ravel()

    powers = [np.eye(k)]
    for _ in range(Tp):
        powers.append(K @ powers[-1])
    F = np.vstack(powers[1:])
    G = np.zeros((Tp * k, Tp * m))
    for i in range(Tp):
        for j in range(i + 1):
            G[i * k:(i + 1) * k, j * m:(j + 1) * m] = powers[i - j] @ B
    T = np.zeros((Tp * m, Tc * m))
    for j in range(Tp):
        for l in range(min(j, Tc - 1) + 1):
            T[j * m:(j + 1) * m, l * m:(l + 1) * m] = np.eye(m)

    Qy = config.weight_matrix(k)
    Qbar = np.kron(np.eye(Tp), Qy)
    Qu = np.kron(np.eye(Tc), np.atleast_2d(config.q_u) * np.eye(m))
    Phi = G @ T
    c = F @ z0 + G @ np.tile(u_prev, Tp) - np.tile(y_ref, Tp)
    H = 2.0 * (Phi.T @ Qbar @ Phi + Qu)
    H = 0.5 * (H + H.T)
    f = 2.0 * Phi.T @ Qbar @ c

    du_lo, du_hi = config.increment_bounds
    A = T[:Tc * m]
    return QpProblem(
        H=H, f=f,
        lb=np.full(Tc * m, du_lo), ub=np.full(Tc * m, du_hi),
        A=A, u_offset=np.tile(u_prev, Tc),
        u_lo=np.full(Tc * m, config.u_min), u_hi=np.full(Tc * m, config.u_max),
        constant=float(c @ Qbar @ c),
    )


def solve_qp(problem: QpProblem, tol: float = 1e-6, max_iter: int = 10_000,
             rho: Optional[float] = None, polish: bool = True) -> QpSolution:
    """ADMM with a fixed penalty, followed by an active-set polish.

    Stops when the primal residual ``||Cx - z||`` and the dual residual
    ``||Hx + f + C'y||`` fall below ``tol`` (scaled by the problem size).
    """
    H, f = problem.H, problem.f
    C, lo, hi = problem.constraint_matrix()
    n = problem.n
    if rho is None:
        rho = max(float(np.mean(np.abs(np.diag(H)))), 1e-6)
    sigma = 1e-6 * rho
    alpha = 1.6
    M = H + sigma * np.eye(n) + rho * C.T @ C
    L = np.linalg.cholesky(M)

    x = np.clip(np.zeros(n), problem.lb, problem.ub)
    z = np.clip(C @ x, lo, hi)
    y = np.zeros(len(lo))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        rhs = sigma * x - f + C.T @ (rho * z - y)
        x_t = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        z_t = C @ x_t
        x = alpha * x_t + (1 - alpha) * x
        z_relaxed = alpha * z_t + (1 - alpha) * z
        z = np.clip(z_relaxed + y / rho, lo, hi)
        y = y + rho * (z_relaxed - z)
        if it % 10 == 0 or it == max_iter:
            Cx = C @ x
            r_prim = np.max(np.abs(Cx - z))
            r_dual = np.max(np.abs(H @ x + f + C.T @ y))
            scale_p = max(1.0, np.max(np.abs(Cx)), np.max(np.abs(z)))
            scale_d = max(1.0, np.max(np.abs(H @ x)), np.max(np.abs(C.T @ y)), np.max(np.abs(f)))
            if r_prim <= tol * scale_p and r_dual <= tol * scale_d:
                converged = True
                break

    x = np.clip(x, problem.lb, problem.ub)
    best = QpSolution(x, problem.objective(x), it, converged, False)
    if polish:
        cand = _polish(problem, C, lo, hi, z, y)
        slack = 1e-12 * max(1.0, abs(best.objective))
        if cand is not None and (cand.converged or cand.objective <= best.objective + slack):
            cand.iterations = it
            cand.converged = cand.converged or converged
            return cand
    return best


def _polish(problem: QpProblem, C, lo, hi, z, y) -> Optional[QpSolution]:
    """Solve the equality-constrained KKT system on the guessed active set.

    The guess comes from the ADMM projection ``z``, which lands exactly on a
    bound for active rows; dual signs break ties for equal bounds.
    """
    lower = (z <= lo) & ((y <= 0) | (lo < hi))
    upper = (z >= hi) & ~lower
    act = lower | upper
    n = problem.n
    Ca = C[act]
    ba = np.where(lower[act], lo[act], hi[act])
    kkt = np.block([[problem.H, Ca.T], [Ca, np.zeros((len(ba), len(ba)))]])
    rhs = np.concatenate([-problem.f, ba])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    xp = sol[:n]
    if not np.all(np.isfinite(xp)):
        return None
    if problem.max_violation(xp) > 1e-9 * max(1.0, np.max(np.abs(ba)) if len(ba) else 1.0):
        return None
    lam = sol[n:]
    scale = max(1.0, float(np.max(np.abs(problem.f))))
    # multipliers with the right sign certify a KKT point, hence the optimum
    certified = bool(np.all(lam[lower[act]] <= 1e-9 * scale) and np.all(lam[upper[act]] >= -1e-9 * scale))
    xp = np.clip(xp, problem.lb, problem.ub)
    return QpSolution(xp, problem.objective(xp), 0, certified, True)


def solve_qp_enumerate(problem: QpProblem) -> np.ndarray:
    """Exact minimiser by enumerating active sets (tiny problems only)."""
    C, lo, hi = problem.constraint_matrix()
    n, nc = problem.n, len(lo)
    best_x, best_val = None, np.inf
    for size in range(0, n + 1):
        for rows in itertools.combinations(range(nc), size):
            for sides in itertools.product((0, 1), repeat=size):
                Ca = C[list(rows)]
                ba = np.array([lo[r] if s == 0 else hi[r] for r, s in zip(rows, sides)])
                kkt = np.block([[problem.H, Ca.T], [Ca, np.zeros((size, size))]])
                try:
                    sol = np.linalg.solve(kkt, np.concatenate([-problem.f, ba]))
                except np.linalg.LinAlgError:
                    continue
                x = sol[:n]
                if problem.max_violation(x) > 1e-9:
                    continue
                val = problem.objective(x)
                if val < best_val:
                    best_x, best_val = x, val
    return best_x


# --------------------------------------------------------------------------
# closed loop


def reference_latent(model: KoopmanModel, config: MpcConfig, healthy_params=None) -> np.ndarray:
    """Encoded zero window, or a resting window of a healthy column."""
    w, n = model.config.window, model.config.n_channels
    if config.reference == "zero":
        return model.encode_window(np.zeros((w, n)))
    from .neural_mass import DoubleColumnParams, JansenRitParams

    if healthy_params is None:
        if n == 2:
            healthy_params = DoubleColumnParams(col1=JansenRitParams(A=7.0), col2=JansenRitParams(A=7.0))
        else:
            healthy_params = JansenRitParams(A=7.0)
    rest = generate_trace(healthy_params, duration=2.0 + w / 50.0 + 1.0)
    return model.encode_window(rest.eeg[-w:])


def identify_input_gain(model: KoopmanModel, params, config: MpcConfig, duration: float = 20.0,
                        seed: int = 0, sample_rate: float = 50.0, burn_in: float = 2.0):
    """Fit ``K`` and ``B`` jointly from a run driven by i.i.d. uniform inputs
    within ``[u_min, u_max]``. Returns a model copy and the excitation trace."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    u = rng.uniform(config.u_min, config.u_max, size=n)
    u[: int(round(burn_in * sample_rate))] = 0.0
    trace = generate_trace(params, duration, sample_rate, input_signal=u, burn_in=burn_in)
    w = model.config.window
    lat = model.encode_series(trace.eeg)
    U = trace.u[w - 1:-1].T
    K, B = fit_input_gain(lat, U)
    return dataclasses.replace(model, operator=K, input_gain=B, history=list(model.history)), trace


@dataclass
class ControlLog:
    t: List[float] = field(default_factory=list)
    u: List[float] = field(default_factory=list)
    du: List[float] = field(default_factory=list)
    eeg: List[List[float]] = field(default_factory=list)
    qp_iters: List[int] = field(default_factory=list)
    qp_time_s: List[float] = field(default_factory=list)
    degraded: List[bool] = field(default_factory=list)
    solved_du: List[List[float]] = field(default_factory=list)
    predicted_latent: List[List[float]] = field(default_factory=list)
    realized_latent: List[List[float]] = field(default_factory=list)
    refits: List[float] = field(default_factory=list)

    def bound_violations(self, config: MpcConfig) -> int:
        lo, hi = config.increment_bounds
        u = np.array(self.u)
        du = np.array(self.du)
        eps = 1e-9
        bad_u = (u < config.u_min - eps) | (u > config.u_max + eps)
        bad_du = (du < lo - eps) | (du > hi + eps)
        return int(np.sum(bad_u | bad_du))

    def to_csv(self, timing: bool = True) -> str:
        n_ch = len(self.eeg[0]) if self.eeg else 1
        header = ["t", "u", "du"] + [f"eeg_ch{i}" for i in range(n_ch)] + ["qp_iters", "qp_time_s"]
        lines = [",".join(header)]
        for i in range(len(self.t)):
            qt = repr(self.qp_time_s[i]) if timing else "nan"
            row = [repr(self.t[i]), repr(self.u[i]), repr(self.du[i])]
            row += [repr(v) for v in self.eeg[i]] + [str(self.qp_iters[i]), qt]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


@dataclass
class ClosedLoopResult:
    log: ControlLog
    controlled: SimTrace
    uncontrolled: SimTrace
    model: KoopmanModel

    def summary(self, config: MpcConfig, window=(5.0, 10.0), timing: bool = True) -> dict:
        from .evaluation import suppression_stats

        stats = suppression_stats(self.uncontrolled, self.controlled, window)
        active = [q for q, u in zip(self.log.qp_time_s, self.log.t) if u >= config.control_start]
        return {
            "suppression_ratio": stats.ratio,
            "rms_controlled": stats.rms_controlled,
            "rms_uncontrolled": stats.rms_uncontrolled,
            "window": list(window),
            "bound_violations": self.log.bound_violations(config),
            "mean_solve_time_s": float(np.mean(active)) if (timing and active) else None,
            "degraded_solves": int(sum(self.log.degraded)),
            "control_start": config.control_start,
        }


def closed_loop(params, model: KoopmanModel, config: MpcConfig, duration: float = 12.0,
                sample_rate: float = 50.0, burn_in: float = 2.0, y_ref=None) -> ClosedLoopResult:
    """Run plant and controller at ``sample_rate`` from a zero initial state.

    Before ``config.control_start`` the input is zero. Afterwards, each step
    encodes the latest window, solves the condensed QP and applies only the
    first increment. The operator is refitted every ``refit_period`` steps
    from the live log; ``B`` is refreshed jointly only when the recent inputs
    have a standard deviation above ``excitation_std``.
    """
    if model.input_gain is None:
        raise ValueError("model needs an input gain (see identify_input_gain)")
    w = model.config.window
    if config.control_start < burn_in + w / sample_rate - 1e-9:
        raise ValueError("control must start after one full window of logged data")
    if y_ref is None:
        y_ref = reference_latent(model, config)
    K = model.operator.copy()
    B = model.input_gain.copy()
    m = B.shape[1]

    plant = Plant(params, sample_rate)
    n_total = int(round(duration * sample_rate))
    keep = int(round(burn_in * sample_rate))
    eeg = np.empty((n_total, plant.output().size))
    u_all = np.zeros(n_total)
    log = ControlLog()
    u_prev = 0.0
    started = None
    for i in range(n_total):
        eeg[i] = plant.output()
        t = i / sample_rate
        u, du = 0.0, 0.0
        iters, elapsed, degraded, seq = 0, 0.0, False, []
        if t >= config.control_start - 1e-9:
            started = i if started is None else started
            s = i - started
            if s % config.refit_period == 0:
                K, B = _refit(model, eeg[:i + 1], u_all[:i], K, B, config)
                log.refits.append(t)
            z = model.encode_window(eeg[i - w + 1:i + 1])
            if log.predicted_latent:
                log.realized_latent.append(z.tolist())
            qp = condense(K, B, z, u_prev, config, y_ref)
            t0 = time.perf_counter()
            sol = solve_qp(qp, config.tol, config.max_iter)
            elapsed = time.perf_counter() - t0
            du = float(sol.x[0])
            u = float(np.clip(u_prev + du, config.u_min, config.u_max))
            du = u - u_prev
            iters, degraded, seq = sol.iterations, sol.degraded, sol.x.tolist()
            log.predicted_latent.append((K @ z + B @ np.full(m, u)).tolist())
        if i >= keep:
            log.t.append(t)
            log.u.append(u)
            log.du.append(du)
            log.eeg.append(eeg[i].tolist())
            log.qp_iters.append(int(iters))
            log.qp_time_s.append(elapsed)
            log.degraded.append(bool(degraded))
            log.solved_du.append(seq)
        u_all[i] = u
        plant.advance(u)
        u_prev = u

    t_keep = np.arange(keep, n_total) / sample_rate
    controlled = SimTrace(sample_rate, t_keep, eeg[keep:], u_all[keep:])
    uncontrolled = generate_trace(params, duration, sample_rate, burn_in=burn_in)
    final = dataclasses.replace(model, operator=K, input_gain=B, history=list(model.history))
    return ClosedLoopResult(log, controlled, uncontrolled, final)


def _refit(model, eeg_hist, u_hist, K, B, config: MpcConfig):
    """Refit the operator (and ``B`` when the inputs are exciting enough)."""
    w = model.config.window
    L = min(config.refit_length, len(eeg_hist) - w)
    if L < 2:
        return K, B
    lat = model.encode_series(eeg_hist[-(w + L):])
    U = np.asarray(u_hist[-L:], float)[None, :]
    if np.std(U) > config.excitation_std:
        return fit_input_gain(lat, U)
    X, Y = lat[:, :-1], lat[:, 1:]
    return (Y - B @ U) @ pinv(X), B


def save_control(result: ClosedLoopResult, config: MpcConfig, directory, window=(5.0, 10.0),
                 timing: bool = False) -> Path:
    directory = Path(directory)
    _atomic_write(directory / "control_log.csv", result.log.to_csv(timing))
    summary = result.summary(config, window, timing)
    _atomic_write(directory / "control_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return directory
