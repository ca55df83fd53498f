"""Continuous and discrete Riccati machinery.

The continuous ARE is solved by integrating the time-reversed Riccati
differential equation towards its steady state and polishing the result with
Newton steps (dense Kronecker Lyapunov solves).  The discrete DARE is the
fixed point of the Riccati difference iteration.  Both come with the explicit
constants bounding how fast the finite-horizon kernels approach their limits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
import scipy.linalg as sla

from .errors import (
    ConvergenceError,
    DimensionError,
    NonFiniteError,
    NotHurwitzError,
    PreconditionError,
    StepTooLargeError,
)
from .numerics import (
    DEFAULT_STEP,
    Envelope,
    SampledSignal,
    as_matrix,
    controllable_rank,
    estimate_decay_envelope,
    fit_exponential_decay,
    lyapunov_kron,
    operator_norm,
    spectral_abscissa,
    steps_in,
    symmetrize,
)

RANK_TOL = 1e-8
#: RK4 step guard: step * (1 + ||A||) must not exceed this
STEP_GUARD = 1.0
BLOWUP = 1e12


@dataclass(frozen=True)
class LtiModel:
    """Linear model ``x' = A x + B u`` (or ``x+ = A x + B u`` in discrete time)."""

    A: np.ndarray
    B: np.ndarray
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        B = as_matrix(self.B, "B")
        if B.shape[0] != A.shape[0] and B.shape[1] == A.shape[0] and B.shape[0] == 1:
            B = B.T
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise DimensionError(f"incompatible shapes A{A.shape}, B{B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if self.check and controllable_rank(A, B, RANK_TOL) < self.n:
            raise PreconditionError("(A, B) is not controllable")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class CostSpec:
    """Quadratic cost weights: output ``C``, control weight ``R``, terminal ``E_T``."""

    C: np.ndarray
    R: np.ndarray
    E_T: np.ndarray

    def __post_init__(self):
        C = as_matrix(self.C, "C")
        R = as_matrix(self.R, "R")
        E = as_matrix(self.E_T, "E_T")
        if R.shape[0] != R.shape[1] or E.shape[0] != E.shape[1] or E.shape[0] != C.shape[1]:
            raise DimensionError(f"incompatible shapes C{C.shape}, R{R.shape}, E_T{E.shape}")
        scale = max(1.0, np.abs(R).max())
        if np.abs(R - R.T).max() > 1e-12 * scale or np.linalg.eigvalsh(symmetrize(R)).min() <= 0:
            raise PreconditionError("R must be symmetric positive definite")
        escale = max(1.0, np.abs(E).max())
        if np.abs(E - E.T).max() > 1e-12 * escale:
            raise PreconditionError("E_T must be symmetric")
        if np.linalg.eigvalsh(symmetrize(E)).min() < -1e-12 * escale:
            raise PreconditionError("E_T must be positive semi-definite")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "R", symmetrize(R))
        object.__setattr__(self, "E_T", symmetrize(E))

    @property
    def Q(self) -> np.ndarray:
        """State weight ``C^T C``."""
        return self.C.T @ self.C

    def with_terminal(self, E_T) -> "CostSpec":
        return CostSpec(self.C, self.R, E_T)


def check_pair(model: LtiModel, cost: CostSpec) -> None:
    """Raise unless dimensions agree and ``(A, C)`` is observable."""
    if cost.C.shape[1] != model.n or cost.R.shape[0] != model.m:
        raise DimensionError("cost dimensions do not match the model")
    if controllable_rank(model.A.T, cost.C.T, RANK_TOL) < model.n:
        raise PreconditionError("(A, C) is not observable")


def input_weight(model: LtiModel, cost: CostSpec) -> np.ndarray:
    """``B R^{-1} B^T``."""
    return symmetrize(model.B @ np.linalg.solve(cost.R, model.B.T))


# ---------------------------------------------------------------------------
# continuous time


def _rde_rhs(At, G, Q):
    def rhs(P):
        AP = At @ P
        return AP + AP.T - P @ G @ P + Q

    return rhs


def _rde_steps(model, cost, step, P0) -> Iterator[np.ndarray]:
    At = model.A.T.copy()
    G = input_weight(model, cost)
    f = _rde_rhs(At, G, cost.Q)
    P = P0
    h = step
    while True:
        k1 = f(P)
        k2 = f(P + 0.5 * h * k1)
        k3 = f(P + 0.5 * h * k2)
        k4 = f(P + h * k3)
        P = symmetrize(P + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        if not np.all(np.isfinite(P)) or np.abs(P).max() > BLOWUP:
            raise NonFiniteError("Riccati differential equation blew up")
        yield P


def _check_step(model, step, guard):
    limit = guard / (1.0 + operator_norm(model.A))
    if step > limit:
        raise StepTooLargeError(f"RDE step {step:g} exceeds stability guard {limit:g}")


def rde_integrate(model: LtiModel, cost: CostSpec, duration: float,
                  step: float = DEFAULT_STEP, *, guard: float = STEP_GUARD,
                  P0=None) -> SampledSignal:
    """Integrate ``P' = A^T P + P A - P B R^{-1} B^T P + C^T C`` from ``P(0) = E_T``.

    Classical RK4 with a symmetrization after each step.  ``P(t)`` is the
    Riccati kernel of the horizon-``t`` problem, so ``P_T(s) = P(T - s)``.
    """
    _check_step(model, step, guard)
    N = steps_in(duration, step, "duration")
    P = cost.E_T if P0 is None else symmetrize(as_matrix(P0, "P0"))
    out = np.empty((N + 1, model.n, model.n))
    out[0] = P
    steps = _rde_steps(model, cost, step, P)
    for k in range(1, N + 1):
        out[k] = next(steps)
    return SampledSignal(0.0, step, out)


def are_residual(model: LtiModel, cost: CostSpec, P) -> np.ndarray:
    AP = model.A.T @ P
    return AP + AP.T - P @ input_weight(model, cost) @ P + cost.Q


@dataclass(frozen=True)
class RiccatiSolution:
    """Stabilizing ARE solution together with its convergence constants."""

    P: np.ndarray          # P_inf
    A_cl: np.ndarray       # A - B R^{-1} B^T P_inf
    F: np.ndarray          # R^{-1} B^T P_inf
    M: float               # overshoot of ||exp(A_cl t)||
    mu: float              # decay rate of ||exp(A_cl t)||
    K0: float              # ||P(t) - P_inf|| <= K0 exp(-2 mu t)
    W: np.ndarray          # closed-loop Grammian
    residual: float
    newton_iterations: int = 0
    phase1_time: float = 0.0

    @property
    def envelope(self) -> Envelope:
        return Envelope(self.M, self.mu)


def solve_care(model: LtiModel, cost: CostSpec, tol: float = 1e-10, *,
               step: float | None = None, check_interval: float = 1.0,
               max_phase1_time: float = 1e4, envelope_samples: int = 400,
               max_newton: int = 50) -> RiccatiSolution:
    """Stabilizing solution of ``A^T P + P A - P B R^{-1} B^T P + C^T C = 0``.

    Phase 1 integrates the Riccati ODE from ``E_T`` until the change over
    ``check_interval`` drops below ``sqrt(tol)`` (relative to ``||P||``).
    Phase 2 applies Newton steps ``A_k^T D + D A_k = -res(P_k)`` until the
    residual is at most ``tol`` times the largest term of the equation,
    ``max(1, ||C^T C||, ||P B R^{-1} B^T P||)``.

    The envelope, closed-loop Grammian and ``K0`` are filled in as well.
    """
    check_pair(model, cost)
    if step is None:
        # accuracy is restored by Newton, so phase 1 only needs RK4 stability
        step = min(1e-2, STEP_GUARD / (1.0 + operator_norm(model.A)))
    _check_step(model, step, STEP_GUARD)
    chunk = max(1, int(round(check_interval / step)))

    P = cost.E_T
    t = 0.0
    steps = _rde_steps(model, cost, step, P)
    while True:
        prev = P
        for _ in range(chunk):
            P = next(steps)
        t += chunk * step
        if operator_norm(P - prev) <= math.sqrt(tol) * max(1.0, operator_norm(P)):
            break
        if t >= max_phase1_time:
            raise ConvergenceError(f"Riccati ODE not stationary after t={t:g}")

    P, res, its = _newton_care(model, cost, P, tol, max_newton)
    G = input_weight(model, cost)
    A_cl = model.A - G @ P
    alpha = spectral_abscissa(A_cl)
    if alpha >= 0:
        raise NotHurwitzError("closed-loop matrix is not Hurwitz")
    if np.linalg.eigvalsh(P).min() <= 0:
        raise ConvergenceError("ARE solution is not positive definite")
    env = estimate_decay_envelope(A_cl, 10.0 / -alpha, envelope_samples)
    W = closed_loop_grammian(A_cl, model.B, cost.R)
    K0 = compute_k0(P, cost.E_T, env.M, W)
    F = np.linalg.solve(cost.R, model.B.T @ P)
    return RiccatiSolution(P, A_cl, F, env.M, env.mu, K0, W, res, its, t)


def _term_scale(cost, G, P):
    return max(1.0, operator_norm(cost.Q), operator_norm(P @ G @ P))


def _newton_care(model, cost, P, tol, max_iter):
    G = input_weight(model, cost)
    res = are_residual(model, cost, P)
    r = operator_norm(res)
    best = r
    stalled = 0
    its = 0
    while r > tol * _term_scale(cost, G, P):
        Ak = model.A - G @ P
        # A_k^T D + D A_k = -res   <=>   lyapunov_kron(A_k^T, res)
        D = lyapunov_kron(Ak.T, res)
        P = symmetrize(P + D)
        res = are_residual(model, cost, P)
        r = operator_norm(res)
        its += 1
        if r < best * (1 - 1e-3):
            best = r
            stalled = 0
        else:
            stalled += 1
        if stalled >= max_iter or its >= 10 * max_iter:
            raise ConvergenceError(f"Newton refinement stagnated at residual {r:.3e}")
    return P, r, its


def closed_loop_grammian(A_cl, B, R, tol: float = 1e-10) -> np.ndarray:
    """``W = int_0^inf e^{A_cl s} B R^{-1} B^T e^{A_cl^T s} ds`` via its Lyapunov equation."""
    A_cl = as_matrix(A_cl, "A_cl")
    B = as_matrix(B, "B")
    if spectral_abscissa(A_cl) >= 0:
        raise NotHurwitzError("closed-loop matrix is not Hurwitz")
    G = symmetrize(B @ np.linalg.solve(as_matrix(R, "R"), B.T))
    W = symmetrize(lyapunov_kron(A_cl, G))
    res = operator_norm(A_cl @ W + W @ A_cl.T + G)
    if res > tol * max(1.0, operator_norm(G), operator_norm(W)):
        raise ConvergenceError(f"Grammian residual {res:.3e} above tolerance")
    return W


def compute_k0(P_inf, E_T, M: float, W) -> float:
    """Constant ``K0`` with ``||P(t) - P_inf|| <= K0 e^{-2 mu t}``.

    ``K0 = M^2 max(||D||, ||D (I - W D)^{-1}||)`` with ``D = P_inf - E_T``.
    """
    D = np.asarray(P_inf, dtype=float) - np.asarray(E_T, dtype=float)
    scale = max(1.0, operator_norm(P_inf))
    if operator_norm(D) <= 1e-12 * scale:
        return 0.0
    X = np.eye(D.shape[0]) - np.asarray(W) @ D
    if np.linalg.cond(X) > 1e12:
        raise PreconditionError("I - W (P_inf - E_T) is numerically singular")
    return M * M * max(operator_norm(D), operator_norm(np.linalg.solve(X.T, D.T).T))


class PconvReport(NamedTuple):
    ok: bool
    max_ratio: float
    fitted_rate: float
    r2: float
    first_violation: float | None


def verify_pconv(path: SampledSignal, sol: RiccatiSolution, atol: float = 1e-8,
                 fit_from: float = 0.0, floor: float = 1e-11) -> PconvReport:
    """Check ``||P(t_k) - P_inf|| <= K0 e^{-2 mu t_k} + atol`` on every sample.

    The decay rate of ``||P(t) - P_inf||`` is fitted over samples with
    ``t >= fit_from`` whose error is above ``floor * ||P_inf||``.
    """
    ts = path.times
    errs = np.array([operator_norm(V - sol.P) for V in path.values])
    bound = sol.K0 * np.exp(-2.0 * sol.mu * ts) + atol
    ratios = errs / bound
    bad = np.nonzero(ratios > 1.0)[0]
    first = float(ts[bad[0]]) if bad.size else None
    keep = (ts >= fit_from) & (errs > floor * max(1.0, operator_norm(sol.P)))
    if keep.sum() >= 2:
        fit = fit_exponential_decay(zip(ts[keep], errs[keep]))
        rate, r2 = fit.slope, fit.r2
    else:
        rate, r2 = float("nan"), float("nan")
    return PconvReport(not bad.size, float(ratios.max()), rate, r2, first)


# ---------------------------------------------------------------------------
# discrete time


def _drde_update(A, G, Q, Qt, woodbury=False, B=None, R=None):
    n = A.shape[0]
    if woodbury:
        # A^T Q A - A^T Q B (R + B^T Q B)^{-1} B^T Q A + C^T C
        QB = Qt @ B
        S = R + B.T @ QB
        QA = Qt @ A
        nxt = A.T @ QA - (A.T @ QB) @ np.linalg.solve(S, QB.T @ A) + Q
    else:
        X = np.eye(n) + G @ Qt
        if np.abs(np.linalg.eigvals(X)).min() < 1 - 1e-8:
            raise PreconditionError("I + B R^{-1} B^T Q is not invertible as required")
        nxt = A.T @ Qt @ np.linalg.solve(X, A) + Q
    return symmetrize(nxt)


def drde_iterate(A, B, cost: CostSpec, steps: int, *, woodbury: bool = False,
                 Q0=None) -> list[np.ndarray]:
    """``Q_{t+1} = A^T Q_t (I + B R^{-1} B^T Q_t)^{-1} A + C^T C`` from ``Q_0 = E_T``.

    Returns ``[Q_0, ..., Q_steps]``.  ``woodbury=True`` switches to the
    ``(R + B^T Q B)^{-1}`` form.
    """
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    G = symmetrize(B @ np.linalg.solve(cost.R, B.T))
    Q = cost.Q
    Qt = cost.E_T if Q0 is None else symmetrize(as_matrix(Q0, "Q0"))
    out = [Qt]
    for _ in range(steps):
        Qt = _drde_update(A, G, Q, Qt, woodbury, B, cost.R)
        out.append(Qt)
    return out


def feedback_factor(G, Q) -> np.ndarray:
    """``(I + G Q)^{-1}``."""
    n = G.shape[0]
    return np.linalg.solve(np.eye(n) + G @ Q, np.eye(n))


@dataclass(frozen=True)
class DareSolution:
    Q: np.ndarray          # Q_inf
    M: np.ndarray          # (I + B R^{-1} B^T Q_inf)^{-1}
    MA: np.ndarray         # closed-loop matrix M_inf A
    rho: float             # ||M_inf A||
    iterations: int
    residual: float


def solve_dare(A, B, cost: CostSpec, tol: float = 1e-13, max_iter: int = 100_000) -> DareSolution:
    """Positive definite DARE solution by iterating the difference equation from ``E_T``."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    n = A.shape[0]
    if controllable_rank(A, B, RANK_TOL) < n:
        raise PreconditionError("(A, B) is not controllable")
    if controllable_rank(A.T, cost.C.T, RANK_TOL) < n:
        raise PreconditionError("(A, C) is not observable")
    G = symmetrize(B @ np.linalg.solve(cost.R, B.T))
    Q = cost.Q
    Qt = cost.E_T
    for it in range(1, max_iter + 1):
        nxt = _drde_update(A, G, Q, Qt)
        diff = operator_norm(nxt - Qt)
        Qt = nxt
        if diff <= tol * max(1.0, operator_norm(Qt)):
            break
    else:
        raise ConvergenceError(f"DARE iteration did not converge in {max_iter} steps")
    M = feedback_factor(G, Qt)
    res = operator_norm(A.T @ Qt @ M @ A + Q - Qt)
    return DareSolution(Qt, M, M @ A, operator_norm(M @ A), it, res)


def discrete_grammian(MA, G, tol: float = 1e-14, max_terms: int = 1_000_000) -> np.ndarray:
    """``sum_t (MA)^t G (MA^T)^t`` truncated once a term's norm is below ``tol``."""
    W = np.zeros_like(G)
    term = G.copy()
    for _ in range(max_terms):
        W += term
        if operator_norm(term) <= tol * max(1.0, operator_norm(W)):
            return symmetrize(W)
        term = MA @ term @ MA.T
    raise ConvergenceError("discrete Grammian series did not converge")


def compute_k0_dt(Q_inf, E_T, MA, B, R, tol: float = 1e-14, *,
                  method: str = "grammian", A=None, C=None) -> float:
    """Constant with ``||Q_t - Q_inf|| <= K0 ||M_inf A||^{2t}``.

    ``method="grammian"`` gives ``||((Q_inf - E_T)^{-1} - W)^{-1}||`` and
    requires that inner matrix to be positive definite.
    ``method="recursion"`` instead runs the exact recursion of the scaled
    error ``S_t`` to its limit (needs ``A`` and ``C``); it is sharper and has
    no positivity requirement beyond ``E_T < Q_inf``.
    """
    Q_inf = as_matrix(Q_inf, "Q_inf")
    E_T = as_matrix(E_T, "E_T")
    D = symmetrize(Q_inf - E_T)
    if np.linalg.eigvalsh(D).min() <= 1e-12 * max(1.0, operator_norm(Q_inf)):
        raise PreconditionError("requires 0 <= E_T < Q_inf")
    B = as_matrix(B, "B")
    G = symmetrize(B @ np.linalg.solve(as_matrix(R, "R"), B.T))
    if method == "grammian":
        W = discrete_grammian(MA, G, tol)
        X = symmetrize(np.linalg.inv(D) - W)
        if np.linalg.eigvalsh(X).min() <= 0:
            raise PreconditionError("(Q_inf - E_T)^{-1} - W is not positive definite")
        return operator_norm(np.linalg.inv(X))
    if method == "recursion":
        if A is None or C is None:
            raise PreconditionError("recursion method needs A and C")
        return _k0_dt_recursion(as_matrix(A), G, as_matrix(C), D, E_T, MA, tol)
    raise ValueError(f"unknown method {method!r}")


def _k0_dt_recursion(A, G, C, S, E_T, MA, tol, max_iter=1_000_000):
    Q = C.T @ C
    Qt = E_T
    P = np.eye(A.shape[0])  # (M_inf A)^t
    for _ in range(max_iter):
        Mt = feedback_factor(G, Qt)
        Z = P @ Mt @ G @ P.T
        inc = S @ Z @ S
        S = symmetrize(S + inc)
        if operator_norm(inc) <= tol * operator_norm(S):
            return operator_norm(S)
        Qt = _drde_update(A, G, Q, Qt)
        P = MA @ P
    raise ConvergenceError("scaled DRDE error recursion did not converge")
