"""Dense numerical substrate: matrix exponential, fixed-step integrators,
norms and exponential fits.

Everything here is a pure function of its inputs.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import (
    DimensionError,
    NonFiniteError,
    NotHurwitzError,
    PreconditionError,
    StepTooLargeError,
)

#: default fixed integration step (s)
DEFAULT_STEP = 1e-3
#: multiplicative shrink applied to fitted decay rates
ENVELOPE_SAFETY = 0.99


def as_matrix(M, name="matrix") -> np.ndarray:
    """Return ``M`` as a finite 2-D float array."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return M


def as_vector(x, n=None, name="vector") -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    if n is not None and x.shape[0] != n:
        raise DimensionError(f"{name} must have length {n}, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return x


def _require_square(M, name="matrix"):
    if M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def steps_in(length: float, step: float, what="interval") -> int:
    """Number of steps of size ``step`` covering ``length`` exactly."""
    if step <= 0:
        raise PreconditionError("step must be positive")
    k = int(round(length / step))
    if k < 0 or abs(k * step - length) > 1e-9 * max(1.0, abs(length)):
        raise PreconditionError(f"{what} {length!r} is not an integer multiple of step {step!r}")
    return k


@dataclass(frozen=True)
class SampledSignal:
    """Values (vectors or matrices) on the uniform grid ``t0 + k*dt``."""

    t0: float
    dt: float
    values: np.ndarray

    def __post_init__(self):
        if self.dt <= 0:
            raise PreconditionError("dt must be positive")
        if len(self.values) < 1:
            raise PreconditionError("a sampled signal needs at least one value")

    def __len__(self):
        return len(self.values)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.values))

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (len(self.values) - 1)

    def index_of(self, t: float) -> int:
        """Nearest grid index for time ``t`` (must lie on the sampled range)."""
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k >= len(self.values):
            raise PreconditionError(
                f"t={t!r} outside sampled range [{self.t0}, {self.t_end}]"
            )
        return k

    def at(self, t: float) -> np.ndarray:
        return self.values[self.index_of(t)]


def mat_exp(M, t: float = 1.0) -> np.ndarray:
    """``e^{Mt}`` by scaling and squaring with a Pade kernel."""
    M = as_matrix(M, "M")
    _require_square(M, "M")
    return sla.expm(M * t)


def operator_norm(M) -> float:
    """Spectral norm (largest singular value)."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0.0
    return float(np.linalg.norm(M, 2))


def spectral_abscissa(M) -> float:
    return float(np.max(np.linalg.eigvals(np.atleast_2d(M)).real))


class CrankNicolson:
    """Crank-Nicolson stepper for ``x' = A x + g`` with fixed ``A`` and ``h``.

    The step matrix ``I - hA/2`` is factored once; ``step`` then costs one
    triangular solve.
    """

    def __init__(self, A, h: float):
        A = as_matrix(A, "A")
        _require_square(A, "A")
        n = A.shape[0]
        self.h = h
        lhs = np.eye(n) - 0.5 * h * A
        self.rhs = np.eye(n) + 0.5 * h * A
        self._lu = _factor_step_matrix(lhs)

    @property
    def propagator(self) -> np.ndarray:
        """Homogeneous one-step map ``(I - hA/2)^{-1} (I + hA/2)``."""
        return sla.lu_solve(self._lu, self.rhs)

    def step(self, x, g=None) -> np.ndarray:
        b = self.rhs @ x
        if g is not None:
            b = b + self.h * g
        return sla.lu_solve(self._lu, b)


def _factor_step_matrix(lhs):
    with warnings.catch_warnings():
        # singularity is reported below as a package error
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(lhs, check_finite=False)
    d = np.abs(np.diag(lu))
    if d.min() <= 1e-14 * max(1.0, d.max()):
        raise StepTooLargeError("Crank-Nicolson step matrix is singular; reduce step")
    return lu, piv


def cn_propagator(A, h: float) -> np.ndarray:
    return CrankNicolson(A, h).propagator


def cn_step_affine(A, g, x, h: float) -> np.ndarray:
    """One Crank-Nicolson step of ``x' = A x + g`` with ``g`` taken at the midpoint."""
    x = as_vector(x)
    g = None if g is None else np.broadcast_to(np.asarray(g, dtype=float), x.shape)
    return CrankNicolson(A, h).step(x, g)


_STAGES = ("k1", "k2", "k3", "k4")


def rk4_step(f: Callable, t: float, x, h: float) -> np.ndarray:
    """Classical four-stage Runge-Kutta step for ``x' = f(t, x)``."""
    x = np.asarray(x, dtype=float)
    k1 = _checked(f(t, x), 0, t)
    k2 = _checked(f(t + 0.5 * h, x + 0.5 * h * k1), 1, t)
    k3 = _checked(f(t + 0.5 * h, x + 0.5 * h * k2), 2, t)
    k4 = _checked(f(t + h, x + h * k3), 3, t)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _checked(k, stage, t):
    k = np.asarray(k, dtype=float)
    if not np.all(np.isfinite(k)):
        raise NonFiniteError(f"RK4 stage {_STAGES[stage]} is non-finite at t={t!r}")
    return k


class Envelope(NamedTuple):
    M: float
    mu: float


def estimate_decay_envelope(A, t_max: float, samples: int = 400,
                            safety: float = ENVELOPE_SAFETY) -> Envelope:
    """Fit constants with ``||e^{At}|| <= M e^{-mu t}`` on a uniform grid.

    The rate is the least-squares slope of ``log ||e^{At}||`` over
    ``[0, t_max]`` shrunk by ``safety``; ``M`` is then the smallest constant
    (at least 1) that makes the inequality hold at every sample.
    """
    A = as_matrix(A, "A")
    _require_square(A, "A")
    if samples < 2 or t_max <= 0:
        raise PreconditionError("need samples >= 2 and t_max > 0")
    ts, norms = _exp_norms(A, t_max, samples)
    if norms[-1] >= 1.0:
        raise NotHurwitzError(
            f"||exp(A t_max)|| = {norms[-1]:.3g} >= 1; A is not Hurwitz within t_max"
        )
    slope, _, _ = fit_exponential_decay(list(zip(ts, norms)))
    if slope >= 0:
        raise NotHurwitzError("fitted decay rate is not negative")
    mu = -slope * safety
    M = max(1.0, float(np.max(norms * np.exp(mu * ts))))
    return Envelope(M, mu)


def _exp_norms(A, t_max, samples):
    ts = np.linspace(0.0, t_max, samples)
    E = mat_exp(A, ts[1])
    X = np.eye(A.shape[0])
    norms = np.empty(samples)
    for k in range(samples):
        norms[k] = operator_norm(X)
        X = E @ X
    return ts, np.maximum(norms, np.finfo(float).tiny)


def envelope_holds(A, env: Envelope, t_max: float, samples: int = 400, rtol=1e-12) -> bool:
    ts, norms = _exp_norms(as_matrix(A), t_max, samples)
    return bool(np.all(norms <= env.M * np.exp(-env.mu * ts) * (1 + rtol)))


class LinearFit(NamedTuple):
    slope: float
    intercept: float
    r2: float


def fit_line(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    """Ordinary least squares ``y ~ intercept + slope * x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise PreconditionError("need at least 2 points for a fit")
    X = np.column_stack([np.ones_like(x), x])
    (c0, c1), *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - (c0 + c1 * x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return LinearFit(float(c1), float(c0), r2)


def fit_exponential_decay(points) -> LinearFit:
    """Least-squares fit of ``ln e`` against ``x`` for points ``(x, e)``, ``e > 0``."""
    pts = list(points)
    if len(pts) < 2:
        raise PreconditionError("need at least 2 points for a fit")
    x = np.array([p[0] for p in pts], dtype=float)
    e = np.array([p[1] for p in pts], dtype=float)
    if np.any(e <= 0) or not np.all(np.isfinite(e)):
        raise PreconditionError("exponential fit needs strictly positive values")
    return fit_line(x, np.log(e))


def lyapunov_kron(A, Q) -> np.ndarray:
    """Solve ``A X + X A^T + Q = 0`` through the dense Kronecker system."""
    A = as_matrix(A, "A")
    n = A.shape[0]
    I = np.eye(n)
    # vec is column-major: vec(AX) = (I kron A) vec X, vec(XA^T) = (A kron I) vec X
    L = np.kron(I, A) + np.kron(A, I)
    try:
        lu = _factor_step_matrix(L)
    except StepTooLargeError as exc:
        raise NotHurwitzError("Lyapunov operator is singular") from exc
    x = sla.lu_solve(lu, -np.asarray(Q, dtype=float).reshape(-1, order="F"))
    return x.reshape((n, n), order="F")


def controllable_rank(A, B, tol: float = 1e-8) -> int:
    """Dimension of the controllable subspace of ``(A, B)``.

    Orthonormal block-Krylov sweep; each new block is reduced against the
    current basis and ranked by column-pivoted QR at ``tol`` relative to the
    largest pivot.
    """
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    n = A.shape[0]
    V = np.zeros((n, 0))
    block = B
    for _ in range(n):
        if V.shape[1]:
            block = block - V @ (V.T @ block)
            block = block - V @ (V.T @ block)
        Q, R, _ = sla.qr(block, mode="economic", pivoting=True)
        if R.size == 0:
            break
        d = np.abs(np.diag(R))
        ref = max(d[0], np.finfo(float).tiny) if V.shape[1] == 0 else 1.0
        r = int(np.sum(d > tol * ref))
        if r == 0:
            break
        V = np.hstack([V, Q[:, :r]])
        if V.shape[1] >= n:
            break
        block = A @ Q[:, :r]
        block = block / max(operator_norm(A), np.finfo(float).tiny)
    return V.shape[1]
