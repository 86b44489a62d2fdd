"""
Continuous oscillator dynamics: right-hand sides, a Dormand-Prince reference
integrator, closed-form solutions and analyzers for the regimes of the
Stuart-Landau, Kuramoto and harmonic systems.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .config import settings
from .errors import (
    ContractError,
    DegenerateMagnitudeError,
    FitRejectedError,
    MaxStepsError,
    NumericalError,
    StiffnessError,
    WindowError,
)
from .graph import SparseGraph
from .schemas import CriticalityReport, DecayFit, SLParams
from .tensor import ComplexMatrix

logger = logging.getLogger(__name__)

Adjacency = Union[SparseGraph, np.ndarray, None]
RHS = Callable[[float, np.ndarray], np.ndarray]


@dataclass
class Trajectory:
    """Sampled solution of an initial value problem."""

    times: np.ndarray
    states: np.ndarray
    accepted: int = 0
    rejected: int = 0
    diverged: bool = False

    def __post_init__(self):
        if self.states.shape[0] != self.times.shape[0]:
            raise ContractError("one state row per sample time required")
        if self.times.shape[0] > 1 and np.any(np.diff(self.times) <= 0):
            raise ContractError("sample times must be strictly increasing")

    def magnitudes(self) -> np.ndarray:
        return np.abs(self.states)

    def phases(self) -> np.ndarray:
        return np.angle(self.states)


def _dense(A: Adjacency, n: int) -> np.ndarray:
    if A is None:
        return np.zeros((n, n))
    if isinstance(A, SparseGraph):
        return A.to_dense()
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    if A.shape != (n, n):
        raise ContractError(f"adjacency shape {A.shape} does not match {n} nodes")
    return A


def laplacian(A: np.ndarray) -> np.ndarray:
    """Graph Laplacian of the coupling sum_l A_lj (x_j - x_l); self-loops do not contribute."""
    off = A - np.diag(np.diag(A))
    return np.diag(off.sum(axis=0)) - off.T


# ---------------------------------------------------------------------------
# Stuart-Landau

def _sl_local(z: np.ndarray, p: SLParams) -> np.ndarray:
    return (p.alpha + 1j * p.omega - (p.beta + 1j * p.gamma) * np.abs(z) ** 2) * z


def _sl_coupling(z: np.ndarray, g: SparseGraph) -> np.ndarray:
    # A symmetric: sum_l A_lj z_l = (A z)_j
    deg = g.degree().reshape((-1,) + (1,) * (z.ndim - 1))
    return g.matvec(z) - deg * z


def sl_rhs(z: ComplexMatrix, p: SLParams, g: Optional[SparseGraph] = None) -> ComplexMatrix:
    """Coupled Stuart-Landau vector field; decoupled when ``g`` is None."""
    zc = z.to_numpy()
    if g is not None and g.n != zc.shape[0]:
        raise ContractError(f"graph has {g.n} nodes, state has {zc.shape[0]} rows")
    out = _sl_local(zc, p)
    if g is not None:
        out = out + p.kappa * _sl_coupling(zc, g)
    return ComplexMatrix.from_numpy(out)


def sl_field(p: SLParams, g: Optional[SparseGraph] = None) -> RHS:
    """Right-hand side f(t, z) over a complex node vector, for ``integrate_rk45``."""

    def f(t: float, z: np.ndarray) -> np.ndarray:
        out = _sl_local(z, p)
        if g is not None:
            out = out + p.kappa * _sl_coupling(z, g)
        return out

    return f


def sl_regime(alpha: float, beta: float, r0: Optional[float] = None) -> str:
    """Name the amplitude regime of the decoupled oscillator."""
    if beta > 0:
        if alpha > 0:
            return "limit-cycle"
        return "amplitude-death" if alpha < 0 else "critical"
    if alpha > 0:
        return "unbounded-growth"
    if alpha < 0 and beta < 0:
        if r0 is None:
            return "bistable"
        return "unbounded-growth" if r0 ** 2 > alpha / beta else "amplitude-death"
    if alpha < 0:
        return "amplitude-death"
    return "unbounded-growth" if beta < 0 else "neutral"


def sl_amplitude_closed_form(r0: float, alpha: float, beta: float, t: np.ndarray) -> np.ndarray:
    """Exact magnitude of the decoupled oscillator (Bernoulli solution of r' = (alpha - beta r^2) r)."""
    t = np.asarray(t, dtype=np.float64)
    if alpha == 0:
        return (2.0 * beta * t + 1.0 / r0 ** 2) ** -0.5
    return np.sqrt(alpha / (beta + (alpha / r0 ** 2 - beta) * np.exp(-2.0 * alpha * t)))


# ---------------------------------------------------------------------------
# Kuramoto

def kuramoto_rhs(phi: np.ndarray, omega: float, A: Adjacency) -> np.ndarray:
    """phi_j' = omega + sum_l A_lj sin(phi_l - phi_j)."""
    phi = np.asarray(phi, dtype=np.float64)
    W = _dense(A, phi.shape[0])
    diff = phi[None, :] - phi[:, None]  # diff[j, l] = phi_l - phi_j
    return omega + (W.T * np.sin(diff)).sum(axis=1)


def kuramoto_field(omega: float, A: Adjacency, n: int) -> RHS:
    W = _dense(A, n)
    return lambda t, phi: kuramoto_rhs(phi, omega, W)


def kuramoto_energy(phi: np.ndarray, omega: float, A: Adjacency) -> float:
    """Gradient-flow potential; minus its gradient is ``kuramoto_rhs``."""
    phi = np.asarray(phi, dtype=np.float64)
    W = _dense(A, phi.shape[0])
    diff = phi[:, None] - phi[None, :]
    upper = np.triu(np.ones_like(W), k=1)
    return float(-(upper * W * np.cos(diff)).sum() - omega * phi.sum())


def order_parameter(phi: np.ndarray) -> float:
    """|mean(exp(i phi))|: 1 for full synchrony, near 0 for incoherence."""
    return float(np.abs(np.exp(1j * np.asarray(phi)).mean()))


# ---------------------------------------------------------------------------
# harmonic oscillators

def harmonic_regime(zeta: float) -> str:
    if zeta == 0:
        return "undamped"
    if zeta < 1:
        return "underdamped"
    return "critically-damped" if zeta == 1 else "overdamped"


def _stiffness(A: Adjacency, n: int, omega0: float) -> np.ndarray:
    W = _dense(A, n)
    if not np.allclose(W, W.T):
        raise ContractError("harmonic coupling requires a symmetric adjacency")
    return omega0 ** 2 * np.eye(n) + laplacian(W)


def harmonic_field(A: Adjacency, c: float, n: int, omega0: float = 0.0) -> RHS:
    """First-order form over y = [x, v] of x'' + c x' + omega0^2 x + L x = 0."""
    K = _stiffness(A, n, omega0)

    def f(t: float, y: np.ndarray) -> np.ndarray:
        x, v = y[:n], y[n:]
        return np.concatenate([v, -c * v - K @ x])

    return f


def harmonic_energy(x: np.ndarray, v: np.ndarray, A: Adjacency, omega0: float = 0.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    K = _stiffness(A, x.shape[0], omega0)
    return float(0.5 * np.dot(v, v) + 0.5 * x @ K @ x)


def _mode(q0: float, p0: float, lam: float, c: float, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if lam <= 0:
        if c == 0:
            return q0 + p0 * t, np.full_like(t, p0)
        decay = np.exp(-c * t)
        return q0 + p0 * (1.0 - decay) / c, p0 * decay
    w = math.sqrt(lam)
    zeta = c / (2.0 * w)
    if abs(zeta - 1.0) < 1e-12:
        e = np.exp(-w * t)
        b = p0 + w * q0
        return e * (q0 + b * t), e * (p0 - w * b * t)
    if zeta < 1.0:
        sigma = zeta * w
        wd = w * math.sqrt(1.0 - zeta ** 2)
        e = np.exp(-sigma * t)
        b = (p0 + sigma * q0) / wd
        cos, sin = np.cos(wd * t), np.sin(wd * t)
        return e * (q0 * cos + b * sin), e * (p0 * cos - (q0 * wd + sigma * b) * sin)
    root = w * math.sqrt(zeta ** 2 - 1.0)
    s1, s2 = -zeta * w + root, -zeta * w - root
    a1 = (p0 - s2 * q0) / (s1 - s2)
    a2 = q0 - a1
    e1, e2 = np.exp(s1 * t), np.exp(s2 * t)
    return a1 * e1 + a2 * e2, a1 * s1 * e1 + a2 * s2 * e2


def harmonic_modal_solution(
    x0: Sequence[float],
    v0: Sequence[float],
    A: Adjacency,
    c: float,
    t: Union[float, np.ndarray],
    omega0: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form positions and velocities of coupled damped oscillators.

    Decomposes ``omega0^2 I + L`` (L the graph Laplacian of ``A``) and evolves
    each mode independently. Returns arrays of shape (len(t), n), or (n,) for
    scalar ``t``.
    """
    if c < 0:
        raise ContractError("damping c must be nonnegative")
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    v0 = np.atleast_1d(np.asarray(v0, dtype=np.float64))
    n = x0.shape[0]
    K = _stiffness(A, n, omega0)
    try:
        lam, V = np.linalg.eigh(K)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    lam = np.where(np.abs(lam) < 1e-12 * max(1.0, np.abs(lam).max()), 0.0, lam)

    scalar = np.ndim(t) == 0
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    q0, p0 = V.T @ x0, V.T @ v0
    Q = np.zeros((ts.shape[0], n))
    P = np.zeros((ts.shape[0], n))
    for i in range(n):
        Q[:, i], P[:, i] = _mode(q0[i], p0[i], lam[i], c, ts)
    X, Vel = Q @ V.T, P @ V.T
    return (X[0], Vel[0]) if scalar else (X, Vel)


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# fifth-order minus embedded fourth-order weights, seven stages (FSAL)
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.abs(x) ** 2)))


def _dp_step(rhs: RHS, t: float, y: np.ndarray, f: np.ndarray, h: float):
    K = [f]
    for s in range(1, 6):
        dy = sum(a * k for a, k in zip(_A[s], K))
        K.append(rhs(t + _C[s] * h, y + h * dy))
    y_new = y + h * sum(b * k for b, k in zip(_B, K))
    f_new = rhs(t + h, y_new)
    K.append(f_new)
    err = h * sum(e * k for e, k in zip(_E, K))
    return y_new, f_new, err


def integrate_rk45(
    rhs: RHS,
    y0: np.ndarray,
    t_span: Tuple[float, float],
    rtol: float = settings.rk45_rtol,
    atol: float = settings.rk45_atol,
    t_eval: Optional[Sequence[float]] = None,
    max_steps: int = settings.rk45_max_steps,
    growth_limit: Optional[float] = None,
) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) integration.

    Steps are shortened to land exactly on every time in ``t_eval``; without
    ``t_eval`` every accepted step is recorded. When ``growth_limit`` is given
    the run stops as soon as any |y| exceeds it and the trajectory is flagged
    ``diverged``.
    """
    if rtol <= 0 or atol <= 0:
        raise ContractError("rtol and atol must be positive", rtol=rtol, atol=atol)
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t1 <= t0:
        raise ContractError("t_span must be increasing", t_span=t_span)
    span = t1 - t0
    y = np.array(y0, dtype=np.complex128 if np.iscomplexobj(y0) else np.float64)
    f = rhs(t0, y)

    samples = None if t_eval is None else np.asarray(t_eval, dtype=np.float64)
    if samples is not None and (np.any(samples < t0) or np.any(samples > t1) or np.any(np.diff(samples) <= 0)):
        raise ContractError("t_eval must be increasing and inside t_span")
    times, states = [], []
    next_idx = 0
    if samples is None or (samples.size and samples[0] == t0):
        times.append(t0)
        states.append(y.copy())
        next_idx = 1 if samples is not None else 0

    scale0 = atol + rtol * np.abs(y)
    d0, d1 = _rms(y / scale0), _rms(f / scale0)
    h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h = min(h, span)
    floor = 1e-12 * span

    t = t0
    accepted = rejected = 0
    diverged = False
    while t < t1:
        if accepted + rejected >= max_steps:
            raise MaxStepsError(f"exceeded {max_steps} steps at t={t}", t=t, max_steps=max_steps)
        if h < floor:
            raise StiffnessError(f"step size {h:.3e} underflowed at t={t}; problem is likely stiff", t=t, h=h)
        target = t1 if samples is None or next_idx >= samples.size else samples[next_idx]
        h_try = min(h, target - t)
        landed = h_try == target - t

        y_new, f_new, err = _dp_step(rhs, t, y, f, h_try)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = _rms(err / scale)
        if not np.isfinite(err_norm):
            rejected += 1
            h = h_try * 0.2
            continue
        if err_norm <= 1.0:
            t = target if landed else t + h_try
            y, f = y_new, f_new
            accepted += 1
            if samples is None:
                times.append(t)
                states.append(y.copy())
            elif landed and next_idx < samples.size and t == samples[next_idx]:
                times.append(t)
                states.append(y.copy())
                next_idx += 1
            factor = 10.0 if err_norm == 0 else min(10.0, 0.9 * err_norm ** -0.2)
            if not (landed and h_try < h):
                h = h_try * factor
            if growth_limit is not None and np.max(np.abs(y)) > growth_limit:
                diverged = True
                if not times or times[-1] != t:
                    times.append(t)
                    states.append(y.copy())
                logger.info("integration stopped at t=%.4g: |y| exceeded %.3g", t, growth_limit)
                break
        else:
            rejected += 1
            h = h_try * max(0.2, 0.9 * err_norm ** -0.2)

    logger.debug("rk45: %d accepted, %d rejected steps", accepted, rejected)
    return Trajectory(np.array(times), np.array(states), accepted, rejected, diverged)


# ---------------------------------------------------------------------------
# analyzers

def _linear_fit(x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def _tail(traj: Trajectory, fraction: float, minimum: int) -> Tuple[np.ndarray, np.ndarray]:
    count = traj.times.shape[0]
    start = int(math.floor(count * (1.0 - fraction)))
    if count - start < minimum:
        raise WindowError(f"need at least {minimum} samples in the analysis window, have {count - start}", samples=count - start)
    return traj.times[start:], traj.states[start:]


def estimate_decay_rate(traj: Trajectory, fraction: float = 0.5, minimum: int = 20) -> DecayFit:
    """Classify the magnitude decay of the final half of a trajectory.

    Fits log r against t (exponential) and log r against log t (algebraic) and
    returns the model with the larger R^2.
    """
    t, states = _tail(traj, fraction, minimum)
    r = np.abs(states)
    r = r.mean(axis=1) if r.ndim > 1 else r
    if np.any(r <= 0) or np.any(np.diff(r) >= 0):
        raise FitRejectedError("magnitudes in the fit window are not positive and strictly decreasing")
    if np.any(t <= 0):
        raise FitRejectedError("algebraic fit needs positive sample times")
    log_r = np.log(r)
    exp_rate, exp_r2 = _linear_fit(t, log_r)
    alg_rate, alg_r2 = _linear_fit(np.log(t), log_r)
    if alg_r2 > exp_r2:
        return DecayFit(kind="algebraic", rate=alg_rate, r_squared=alg_r2)
    return DecayFit(kind="exponential", rate=exp_rate, r_squared=exp_r2)


def phase_velocity_limit(traj: Trajectory, fraction: float = 0.25, minimum: int = 8) -> float:
    """Mean unwrapped phase advance per unit time over the final quarter, averaged across nodes."""
    t, states = _tail(traj, fraction, minimum)
    phase = np.unwrap(np.angle(states), axis=0)
    velocity = (phase[-1] - phase[0]) / (t[-1] - t[0])
    return float(np.mean(velocity))


def sync_spread(states: np.ndarray) -> float:
    """Largest pairwise difference between node states at one time."""
    states = np.asarray(states)
    return float(np.max(np.abs(states[:, None] - states[None, :]))) if states.size else 0.0


def criticality_residual(z: ComplexMatrix, p: SLParams, A: Adjacency) -> CriticalityReport:
    """alpha + kappa * sum_k A_jk (cos(phi_j - phi_k) r_k / r_j - 1) per node.

    Multi-channel states (n x h) are treated as h oscillators per node sharing
    the graph; the residual is averaged over channels.
    """
    zc = z.to_numpy()
    r, phi = np.abs(zc), np.angle(zc)
    if np.any(r < 1e-12):
        node = int(np.argwhere(r < 1e-12)[0, 0])
        raise DegenerateMagnitudeError("node magnitude below 1e-12; residual divides by r_j", node=node)
    W = _dense(A, zc.shape[0])
    # ratio[j, k, c] = cos(phi_j - phi_k) r_k / r_j
    ratio = np.cos(phi[:, None, :] - phi[None, :, :]) * r[None, :, :] / r[:, None, :]
    residual = p.alpha + p.kappa * (W[:, :, None] * (ratio - 1.0)).sum(axis=1)
    edges = W != 0
    np.fill_diagonal(edges, False)
    mean_abs = float(np.abs(ratio[edges]).mean()) if edges.any() else 1.0
    return CriticalityReport(residual=residual.mean(axis=1).tolist(), mean_abs_ratio=mean_abs)
