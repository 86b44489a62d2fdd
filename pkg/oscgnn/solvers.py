"""
Differentiable layer steppers.

Forward Euler with skip connection, symplectic Euler for second-order
features, the unit-circle phase scheme, and the implicit-explicit
Stuart-Landau step whose cubic magnitude equation is solved by safeguarded
Newton iteration or Cardano's formula.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .config import settings
from .errors import ContractError, DegeneratePhaseError, IllConditionedStepError, MultiRootWarning, SolverError
from .schemas import SLParams, StepConfig
from .tensor import (
    ComplexMatrix,
    RealTensor,
    add,
    atan2,
    cos,
    hadamard,
    magnitude,
    record_op,
    scale,
    sin,
    sub,
)

logger = logging.getLogger(__name__)

Scalar = Union[float, RealTensor]


def _const(value: float) -> RealTensor:
    return RealTensor._wrap(np.array([[float(value)]]))


def _as_param(value: Scalar) -> RealTensor:
    return value if isinstance(value, RealTensor) else _const(value)


def _value(value: Scalar) -> float:
    return value.item() if isinstance(value, RealTensor) else float(value)


# ---------------------------------------------------------------------------
# explicit steppers

def euler_skip_step(X: RealTensor, F_out: RealTensor, dt: float) -> RealTensor:
    """X + dt * F."""
    return add(X, scale(F_out, dt))


def symplectic_step(
    X: RealTensor, Y: RealTensor, F_out: RealTensor, alpha: Scalar, gamma: Scalar, dt: float
) -> Tuple[RealTensor, RealTensor]:
    """Velocity first, then position with the updated velocity.

    Y' = Y + dt (F - gamma X - alpha Y);  X' = X + dt Y'.
    ``F_out`` is the coupling output, already passed through its activation.
    """
    force = sub(sub(F_out, hadamard(X, _as_param(gamma))), hadamard(Y, _as_param(alpha)))
    Y_next = add(Y, scale(force, dt))
    X_next = add(X, scale(Y_next, dt))
    return X_next, Y_next


def kuramoto_circle_step(
    Z: ComplexMatrix, F_out: ComplexMatrix, omega: Scalar, dt: float, tol: float = 1e-9
) -> ComplexMatrix:
    """Explicit coupling step, then projection back onto the unit circle with a rotation by dt*omega."""
    mags = np.hypot(Z.re.data, Z.im.data)
    if np.any(np.abs(mags - 1.0) > tol):
        raise ContractError("phase features must start on the unit circle", max_deviation=float(np.abs(mags - 1.0).max()))
    if dt == 0:
        return Z
    re = add(Z.re, scale(F_out.re, dt))
    im = add(Z.im, scale(F_out.im, dt))
    if np.any(np.hypot(re.data, im.data) == 0):
        raise DegeneratePhaseError("coupling step landed on the origin; phase undefined")
    phi = add(atan2(im, re), scale(_as_param(omega), dt))
    return ComplexMatrix(cos(phi), sin(phi))


def explicit_sl_step(z: np.ndarray, coupling: np.ndarray, p: SLParams, dt: float) -> np.ndarray:
    """Forward Euler on the full Stuart-Landau field (reference for the implicit scheme)."""
    local = (p.alpha + 1j * p.omega - (p.beta + 1j * p.gamma) * np.abs(z) ** 2) * z
    return z + dt * (coupling + local)


# ---------------------------------------------------------------------------
# implicit magnitude: (1 - dt*alpha) R + dt*beta R^3 = R_tilde

def _linear_branch(R_tilde: np.ndarray, alpha: float, dt: float) -> np.ndarray:
    denom = 1.0 - dt * alpha
    if denom <= 0:
        raise SolverError("linear implicit step has no nonnegative solution (1 - dt*alpha <= 0)", dt=dt, alpha=alpha)
    return R_tilde / denom


def _check_magnitudes(R_tilde: np.ndarray) -> np.ndarray:
    R_tilde = np.asarray(R_tilde, dtype=np.float64)
    if np.any(R_tilde < 0):
        raise ContractError("magnitudes must be nonnegative", minimum=float(R_tilde.min()))
    return R_tilde


def solve_cubic_newton(
    R_tilde: np.ndarray,
    alpha: float,
    beta: float,
    dt: float,
    tol: float = settings.newton_tol,
    max_iter: int = settings.newton_max_iter,
    beta_min: float = settings.beta_min,
) -> np.ndarray:
    """Nonnegative root of R = R_tilde + dt (alpha - beta R^2) R by Newton's method.

    Starts at R_tilde; an iterate that leaves the sign-change bracket is
    replaced by bisection.
    """
    R_tilde = _check_magnitudes(R_tilde)
    if dt == 0:
        return R_tilde.copy()
    if beta < beta_min:
        return _linear_branch(R_tilde, alpha, dt)

    a, b = 1.0 - dt * alpha, dt * beta

    def residual(R):
        return a * R + b * R ** 3 - R_tilde

    lo = np.zeros_like(R_tilde)
    hi = np.maximum(R_tilde, 1.0)
    for _ in range(1100):
        short = residual(hi) < 0
        if not short.any():
            break
        hi = np.where(short, 2.0 * hi, hi)

    R = R_tilde.copy()
    res = residual(R)
    fallbacks = 0
    for _ in range(max_iter):
        done = np.abs(res) < tol
        if done.all():
            break
        lo = np.where(res < 0, np.maximum(lo, R), lo)
        hi = np.where(res > 0, np.minimum(hi, R), hi)
        slope = a + 3.0 * b * R ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = np.where(slope > 0, R - res / np.where(slope > 0, slope, 1.0), np.nan)
        inside = (newton >= lo) & (newton <= hi)
        fallbacks += int(np.count_nonzero(~done & ~inside))
        R = np.where(done, R, np.where(inside, newton, 0.5 * (lo + hi)))
        res = residual(R)
    if fallbacks:
        logger.warning("Newton magnitude solve fell back to bisection %d times", fallbacks)
    if np.all(np.abs(res) < tol):
        return R
    worst = float(np.abs(res).max())
    raise SolverError(f"Newton did not converge in {max_iter} iterations (residual {worst:.3e})", residual=worst, max_iter=max_iter)


def solve_cubic_cardano(
    R_tilde: np.ndarray,
    alpha: float,
    beta: float,
    dt: float,
    beta_min: float = settings.beta_min,
) -> np.ndarray:
    """Real root of the depressed cubic R^3 + p R + q = 0 by Cardano's formula.

    p = (1 - dt alpha) / (dt beta), q = -R_tilde / (dt beta). With a positive
    discriminant the single real root is used; otherwise the trigonometric
    form gives three real roots, the smallest nonnegative one is returned and
    a ``MultiRootWarning`` is emitted.
    """
    R_tilde = _check_magnitudes(R_tilde)
    if dt == 0:
        return R_tilde.copy()
    if beta < beta_min:
        return _linear_branch(R_tilde, alpha, dt)

    p = (1.0 - dt * alpha) / (dt * beta)
    q = -R_tilde / (dt * beta)
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    out = np.empty_like(q)

    single = disc > 0
    if single.any():
        qs = q[single]
        sign = np.where(qs >= 0, 1.0, -1.0)
        # cbrt(u+) with the cancellation-free sign choice; the partner root is -p / (3 u)
        u = -sign * np.cbrt(np.abs(qs) / 2.0 + np.sqrt(disc[single]))
        out[single] = u - p / (3.0 * u)

    multi = ~single
    if multi.any():
        if p == 0:
            out[multi] = 0.0
        else:
            m = 2.0 * np.sqrt(-p / 3.0)
            arg = np.clip(3.0 * q[multi] / (2.0 * p) * np.sqrt(-3.0 / p), -1.0, 1.0)
            theta = np.arccos(arg) / 3.0
            roots = np.stack([m * np.cos(theta - 2.0 * np.pi * k / 3.0) for k in range(3)], axis=-1)
            roots = np.where(roots > -1e-12, np.maximum(roots, 0.0), np.inf)
            out[multi] = roots.min(axis=-1)
        count = int(multi.sum())
        logger.warning("cubic magnitude solve has three real roots for %d entries; hyperparameters may be poorly chosen", count)
        warnings.warn(f"{count} cubic solves had three real roots; smallest nonnegative root used", MultiRootWarning, stacklevel=2)
    return out


# ---------------------------------------------------------------------------
# fully implicit reference step

def full_implicit_sl_step(
    z: np.ndarray,
    coupling: np.ndarray,
    p: SLParams,
    dt: float,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> np.ndarray:
    """Backward Euler on the whole local field with explicit coupling.

    Solves z' = z + dt coupling + dt (alpha + i omega - (beta + i gamma)|z'|^2) z'
    entrywise by Newton's method on (Re z', Im z') with the 2x2 Jacobian,
    starting from the split magnitude/phase step. Reference only; layers use
    ``imex_sl_step``.
    """
    z = np.asarray(z, dtype=np.complex128)
    z_tilde = z + dt * np.asarray(coupling, dtype=np.complex128)
    if dt == 0:
        return z_tilde
    R0 = solve_cubic_newton(np.abs(z_tilde), p.alpha, p.beta, dt, tol=tol, max_iter=max(max_iter, 100))
    guess = R0 * np.exp(1j * (np.angle(z_tilde) + dt * (p.omega - p.gamma * R0 ** 2)))
    x, y = guess.real.copy(), guess.imag.copy()

    for _ in range(max_iter):
        s = x * x + y * y
        a = p.alpha - p.beta * s
        b = p.omega - p.gamma * s
        G1 = x - dt * (a * x - b * y) - z_tilde.real
        G2 = y - dt * (b * x + a * y) - z_tilde.imag
        if max(np.abs(G1).max(initial=0.0), np.abs(G2).max(initial=0.0)) < tol:
            return x + 1j * y
        J11 = 1.0 - dt * (a - 2.0 * p.beta * x * x + 2.0 * p.gamma * x * y)
        J12 = dt * (b + 2.0 * p.beta * x * y - 2.0 * p.gamma * y * y)
        J21 = -dt * (b - 2.0 * p.gamma * x * x - 2.0 * p.beta * x * y)
        J22 = 1.0 - dt * (a - 2.0 * p.gamma * x * y - 2.0 * p.beta * y * y)
        det = J11 * J22 - J12 * J21
        if np.any(np.abs(det) < 1e-14):
            raise IllConditionedStepError("fully implicit step has a singular Jacobian", min_det=float(np.abs(det).min()))
        x = x - (J22 * G1 - J12 * G2) / det
        y = y - (J11 * G2 - J21 * G1) / det
    raise SolverError(f"fully implicit step did not converge in {max_iter} iterations", max_iter=max_iter)


# ---------------------------------------------------------------------------
# implicit-function-theorem sensitivities

@dataclass
class ImexSensitivity:
    d_rtilde: np.ndarray
    d_alpha: np.ndarray
    d_beta: np.ndarray


def imex_backward(R_new: np.ndarray, alpha: float, beta: float, dt: float, beta_min: float = settings.beta_min) -> ImexSensitivity:
    """Partial derivatives of the implicit magnitude R' with respect to R_tilde, alpha and beta.

    From F(R') = R' - R_tilde - dt (alpha - beta R'^2) R' = 0:
    dR'/dR_tilde = 1 / D, dR'/dalpha = dt R' / D, dR'/dbeta = -dt R'^3 / D,
    with D = 1 - dt (alpha - 3 beta R'^2).
    """
    R_new = np.asarray(R_new, dtype=np.float64)
    b = beta if beta >= beta_min else 0.0
    D = 1.0 - dt * (alpha - 3.0 * b * R_new ** 2)
    if np.any(np.abs(D) < 1e-10):
        raise IllConditionedStepError("implicit magnitude step is ill-conditioned (|dF/dR| < 1e-10)", min_denominator=float(np.abs(D).min()))
    return ImexSensitivity(d_rtilde=1.0 / D, d_alpha=dt * R_new / D, d_beta=-dt * R_new ** 3 / D)


def implicit_magnitude(R_tilde: RealTensor, alpha: Scalar, beta: Scalar, cfg: StepConfig) -> RealTensor:
    """Differentiable implicit magnitude solve; gradients come from ``imex_backward``."""
    a, b = _value(alpha), _value(beta)
    if cfg.cubic_method == "cardano":
        R = solve_cubic_cardano(R_tilde.data, a, b, cfg.dt)
    else:
        R = solve_cubic_newton(R_tilde.data, a, b, cfg.dt, cfg.newton_tol, cfg.newton_max_iter)

    tracked = [t for t in (alpha, beta) if isinstance(t, RealTensor)]
    parents = (R_tilde, *tracked)

    def vjp(g):
        sens = imex_backward(R, a, b, cfg.dt)
        grads = [g * sens.d_rtilde]
        if isinstance(alpha, RealTensor):
            grads.append(np.array([[np.sum(g * sens.d_alpha)]]))
        if isinstance(beta, RealTensor):
            grads.append(np.array([[np.sum(g * sens.d_beta)]]))
        return tuple(grads)

    return record_op(R, parents, vjp)


@dataclass
class OscillatorTensors:
    """Trainable 1x1 Stuart-Landau parameters."""

    alpha: RealTensor
    beta: RealTensor
    omega: RealTensor
    gamma: RealTensor

    @classmethod
    def from_params(cls, p: SLParams) -> "OscillatorTensors":
        return cls(*(RealTensor([[v]], requires_grad=True, name=k) for k, v in
                     (("alpha", p.alpha), ("beta", p.beta), ("omega", p.omega), ("gamma", p.gamma))))

    def as_params(self) -> SLParams:
        return SLParams(alpha=self.alpha.item(), beta=self.beta.item(), omega=self.omega.item(), gamma=self.gamma.item())


def imex_sl_step(
    Z: ComplexMatrix,
    F_out: ComplexMatrix,
    p: SLParams,
    cfg: StepConfig,
    trainable: Optional[OscillatorTensors] = None,
) -> ComplexMatrix:
    """One implicit-explicit Stuart-Landau layer.

    Explicit coupling step, polar split, implicit magnitude solve, explicit
    phase update dt (omega -/+ gamma R'^2), recomposition.
    """
    if Z.shape != F_out.shape:
        raise ContractError(f"state {Z.shape} and coupling {F_out.shape} differ")
    dt = cfg.dt
    if dt == 0:
        return Z
    alpha = trainable.alpha if trainable else p.alpha
    beta = trainable.beta if trainable else p.beta
    omega = trainable.omega if trainable else _const(p.omega)
    gamma = trainable.gamma if trainable else _const(p.gamma)

    re = add(Z.re, scale(F_out.re, dt))
    im = add(Z.im, scale(F_out.im, dt))
    R_tilde = magnitude(re, im)
    phi_tilde = atan2(im, re)

    R_new = implicit_magnitude(R_tilde, alpha, beta, cfg)
    sign = -1.0 if cfg.phase_sign == "minus" else 1.0
    shift = hadamard(hadamard(R_new, R_new), scale(gamma, sign * dt))
    phi_new = add(add(phi_tilde, scale(omega, dt)), shift)
    return ComplexMatrix(hadamard(R_new, cos(phi_new)), hadamard(R_new, sin(phi_new)))
