"""Finite- and infinite-horizon LQ controllers, their costs, and an
independent direct-transcription oracle.

Grid convention used throughout: states live on the grid points ``t_k``;
``controls[k]`` is the control on ``[t_k, t_{k+1})``, represented by its
midpoint value.  With Crank-Nicolson states this makes every stored control
exactly the one that reproduces the discrete state update, and keeps the
trapezoid/midpoint cost quadrature second order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg as sla

from .errors import ConvergenceError, DimensionError, NotHurwitzError, PreconditionError
from .numerics import (
    DEFAULT_STEP,
    CrankNicolson,
    SampledSignal,
    as_vector,
    mat_exp,
    operator_norm,
    spectral_abscissa,
    steps_in,
)
from .riccati import CostSpec, LtiModel, RiccatiSolution, input_weight, rde_integrate


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray     # (N+1,)
    states: np.ndarray    # (N+1, n)
    controls: np.ndarray  # (N, m), left-aligned per interval

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if self.states.shape[0] != t.shape[0] or self.controls.shape[0] != t.shape[0] - 1:
            raise DimensionError("need len(states) == len(times) == len(controls) + 1")
        if t.size > 1:
            d = np.diff(t)
            if np.any(d <= 0) or np.ptp(d) > 1e-9 * max(1.0, d[0]):
                raise PreconditionError("times must be uniform and strictly increasing")

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def window(self, t0: float, t1: float) -> "Trajectory":
        """Restriction to ``[t0, t1]`` (both on the grid)."""
        h = self.step
        i0 = int(round((t0 - self.times[0]) / h))
        i1 = int(round((t1 - self.times[0]) / h))
        return Trajectory(self.times[i0:i1 + 1], self.states[i0:i1 + 1], self.controls[i0:i1])


def _closed_loop_propagators(A, G_or_B, gains, h, B=None):
    """Batched CN propagators for ``A - B F_j`` (one per row of ``gains``)."""
    n = A.shape[0]
    Acl = A[None, :, :] - np.einsum("ik,jkl->jil", B, gains)
    eye = np.eye(n)[None]
    return np.linalg.solve(eye - 0.5 * h * Acl, eye + 0.5 * h * Acl)


@dataclass(frozen=True)
class FeedbackLaw:
    """Time-varying feedback of one finite-horizon window, sampled for CN.

    ``gains[j] = R^{-1} B^T P_T(t_j + h/2)`` and ``propagators[j]`` maps the
    closed-loop state from ``t_j`` to ``t_{j+1}``.  ``tail`` is ``F_inf``
    when known.
    """

    step: float
    gains: np.ndarray        # (N, m, n)
    propagators: np.ndarray  # (N, n, n)
    tail: np.ndarray | None = None

    @property
    def horizon(self) -> float:
        return self.step * len(self.gains)


def horizon_path(model: LtiModel, cost: CostSpec, T: float, step: float = DEFAULT_STEP,
                 **kw) -> SampledSignal:
    """Riccati kernel on ``[0, T]`` at half the control step (midpoints are grid points)."""
    return rde_integrate(model, cost, T, 0.5 * step, **kw)


def finite_horizon_gain(path: SampledSignal, T: float, t_rel: float) -> np.ndarray:
    """``P_T(t_rel) = P(T - t_rel)`` by nearest-grid lookup."""
    if t_rel < -1e-12 or t_rel > T + 1e-12:
        raise PreconditionError(f"t_rel={t_rel!r} outside [0, {T!r}]")
    if path.t_end < T - 1e-9 * max(1.0, T):
        raise PreconditionError("path does not cover the horizon")
    return path.at(T - t_rel)


def finite_horizon_law(model: LtiModel, cost: CostSpec, path: SampledSignal, T: float,
                       step: float, sol: RiccatiSolution | None = None) -> FeedbackLaw:
    N = steps_in(T, step, "horizon")
    kernels = np.stack([finite_horizon_gain(path, T, (j + 0.5) * step) for j in range(N)])
    gains = np.linalg.solve(cost.R[None], np.einsum("ki,jkl->jil", model.B, kernels))
    props = _closed_loop_propagators(model.A, None, gains, step, model.B)
    return FeedbackLaw(step, gains, props, None if sol is None else sol.F)


def infinite_feedback(model: LtiModel, cost: CostSpec, sol: RiccatiSolution):
    """``(A_inf, F_inf)`` with ``A_inf = A - B F_inf`` and ``F_inf = R^{-1} B^T P_inf``."""
    F = np.linalg.solve(cost.R, model.B.T @ sol.P)
    A_cl = model.A - model.B @ F
    if spectral_abscissa(A_cl) >= 0:
        raise NotHurwitzError("A - B R^{-1} B^T P_inf is not Hurwitz")
    return A_cl, F


def _propagate_constant(A_cl, F, x0, N, h):
    Phi = CrankNicolson(A_cl, h).propagator
    n = A_cl.shape[0]
    X = np.empty((N + 1, n))
    X[0] = x0
    for k in range(N):
        X[k + 1] = Phi @ X[k]
    U = -0.5 * (X[:-1] + X[1:]) @ F.T
    return X, U


def simulate_inf_horizon(model: LtiModel, sol: RiccatiSolution, y0, t_max: float,
                         step: float = DEFAULT_STEP) -> Trajectory:
    """Infinite-horizon optimal ``x' = A_inf x``, ``u = -F_inf x`` with CN steps."""
    N = steps_in(t_max, step, "t_max")
    x0 = as_vector(y0, model.n, "y0")
    X, U = _propagate_constant(sol.A_cl, sol.F, x0, N, step)
    return Trajectory(step * np.arange(N + 1), X, U)


def simulate_finite_horizon(model: LtiModel, cost: CostSpec, path: SampledSignal, x1,
                            T: float, step: float = DEFAULT_STEP) -> Trajectory:
    """Optimal trajectory of the horizon-``T`` problem from ``x(0) = x1``.

    CN on ``x' = (A - B R^{-1} B^T P_T(t)) x`` with the kernel taken at each
    step midpoint; ``path`` must resolve ``step / 2``.
    """
    law = finite_horizon_law(model, cost, path, T, step)
    X, U = apply_law(law, as_vector(x1, model.n, "x1"), len(law.gains))
    return Trajectory(step * np.arange(len(X)), X, U)


def apply_law(law: FeedbackLaw, x0, steps: int):
    """Run the first ``steps`` steps of ``law`` from ``x0``; returns (states, controls)."""
    n = law.propagators.shape[1]
    X = np.empty((steps + 1, n))
    X[0] = x0
    for j in range(steps):
        X[j + 1] = law.propagators[j] @ X[j]
    U = -np.einsum("jkl,jl->jk", law.gains[:steps], 0.5 * (X[:-1] + X[1:]))
    return X, U


def _quad_cost(traj: Trajectory, cost: CostSpec) -> float:
    h = traj.step
    y = traj.states @ cost.C.T
    run = np.einsum("ij,ij->i", y, y)
    state_part = 0.5 * h * (run[0] + run[-1]) + h * run[1:-1].sum()
    ctrl_part = h * np.einsum("ij,jk,ik->", traj.controls, cost.R, traj.controls)
    return 0.5 * (state_part + ctrl_part)


def cost_finite(traj: Trajectory, cost: CostSpec) -> float:
    """``1/2 x(T)^T E_T x(T) + 1/2 int (|Cx|^2 + u^T R u) dt`` on the trajectory grid."""
    xT = traj.states[-1]
    return 0.5 * float(xT @ cost.E_T @ xT) + _quad_cost(traj, cost)


class InfiniteCost(NamedTuple):
    value: float
    tail: float


def cost_infinite(traj: Trajectory, cost: CostSpec, tail_tol: float = 1e-8,
                  tail_weight=None) -> InfiniteCost:
    """Infinite-horizon cost: quadrature on the grid plus a tail term.

    The tail is ``1/2 x(t_max)^T W x(t_max)`` for the supplied
    ``tail_weight`` (``P_inf`` gives the optimal continuation, which is exact
    for ``u*_inf`` and a lower bound otherwise).  Without a weight the tail is
    the running cost rate at ``t_max`` divided by the decay rate observed over
    the final tenth of the trajectory.
    """
    xN = traj.states[-1]
    if tail_weight is not None:
        tail = 0.5 * float(xN @ np.asarray(tail_weight) @ xN)
    else:
        tail = _tail_from_decay(traj, cost)
    if not tail <= tail_tol:
        raise PreconditionError(f"tail {tail:.3e} exceeds tail_tol; extend horizon")
    return InfiniteCost(_quad_cost(traj, cost) + tail, tail)


def _tail_from_decay(traj, cost):
    y = traj.states @ cost.C.T
    run = np.einsum("ij,ij->i", y, y)
    k0 = max(0, int(0.9 * (len(run) - 1)))
    if run[-1] == 0.0:
        return 0.0
    if run[k0] <= run[-1]:
        return float("inf")
    rate = np.log(run[k0] / run[-1]) / (traj.times[-1] - traj.times[k0])
    return 0.5 * run[-1] / rate


def direct_transcription_oracle(model: LtiModel, cost: CostSpec, x1, T: float,
                                step: float = 1e-2, method: str = "normal",
                                max_iter: int = 10_000, tol: float = 1e-12) -> np.ndarray:
    """Controls minimizing the CN-discretized finite-horizon cost.

    The state is eliminated (``x = S x1 + H u``) and the resulting
    unconstrained quadratic program is solved through its normal equations,
    or by conjugate gradients with ``method="gradient"``.  Returns an
    ``(N, m)`` array of per-interval controls.
    """
    n, m = model.n, model.m
    N = steps_in(T, step, "horizon")
    if N * m > 20_000:
        raise PreconditionError("too many decision variables for the dense oracle")
    x1 = as_vector(x1, n, "x1")
    cn = CrankNicolson(model.A, step)
    Phi = cn.propagator
    Gam = sla.lu_solve(cn._lu, step * model.B)
    S = np.empty((N + 1, n, n))
    S[0] = np.eye(n)
    for k in range(N):
        S[k + 1] = Phi @ S[k]
    H = np.zeros((N + 1, n, N, m))
    for k in range(N):
        H[k + 1] = np.einsum("ij,jkl->ikl", Phi, H[k])
        H[k + 1, :, k, :] += Gam
    Hs = H.reshape((N + 1) * n, N * m)
    Ss = S.reshape((N + 1) * n, n)
    w = np.full(N + 1, step)
    w[0] = w[-1] = 0.5 * step
    Qblk = np.einsum("k,ij->kij", w, cost.Q)
    Qblk[-1] += cost.E_T
    Qbar = sla.block_diag(*Qblk)
    Rbar = np.kron(np.eye(N), step * cost.R)
    Hess = Hs.T @ Qbar @ Hs + Rbar
    rhs = -Hs.T @ (Qbar @ (Ss @ x1))
    if method == "normal":
        if np.linalg.cond(Hess) > 1e14:
            raise ConvergenceError("normal equations are ill-conditioned")
        u = sla.solve(Hess, rhs, assume_a="pos")
    elif method == "gradient":
        u = _conjugate_gradient(Hess, rhs, max_iter, tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    return u.reshape(N, m)


def _conjugate_gradient(H, b, max_iter, tol):
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    stop = tol * max(1.0, np.sqrt(b @ b))
    for _ in range(max_iter):
        if np.sqrt(rr) <= stop:
            return x
        Hp = H @ p
        alpha = rr / (p @ Hp)
        x += alpha * p
        r -= alpha * Hp
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise ConvergenceError("gradient iteration did not converge")


def sample_disturbance(w, n: int, N: int, step: float, t0: float = 0.0) -> np.ndarray:
    """Per-interval disturbance values, shape ``(N, n)``.

    ``w`` may be None, a constant vector, an ``(N, n)`` array or a callable
    of time (sampled at interval midpoints).
    """
    if w is None:
        return np.zeros((N, n))
    if callable(w):
        ts = t0 + step * (np.arange(N) + 0.5)
        out = np.array([as_vector(w(t), n, "w(t)") for t in ts]).reshape(N, n)
    else:
        arr = np.asarray(w, dtype=float)
        if arr.ndim == 1:
            out = np.broadcast_to(as_vector(arr, n, "w"), (N, n)).copy()
        elif arr.shape == (N, n):
            out = arr.copy()
        else:
            raise DimensionError(f"disturbance has shape {arr.shape}, expected ({N}, {n})")
    if not np.all(np.isfinite(out)):
        raise PreconditionError("disturbance must be bounded")
    return out


def disturbed_inf_horizon(model: LtiModel, cost: CostSpec, sol: RiccatiSolution, w, y0,
                          t_max: float, step: float = DEFAULT_STEP,
                          w_tail=None) -> Trajectory:
    """Limit of the finite-horizon optima under a known disturbance.

    The adjoint correction ``xi(t) = int_t^inf e^{A_inf^T (s-t)} P_inf w(s) ds``
    (so ``-xi' = A_inf^T xi + P_inf w``) is computed exactly backwards over the
    piecewise constant disturbance, starting from the steady value for the
    constant tail ``w_tail`` (default: the last disturbance value).  The state then
    follows ``y' = A_inf y - B R^{-1} B^T xi + w`` by CN, with control
    ``-R^{-1} B^T (P_inf y + xi)``.
    """
    n = model.n
    N = steps_in(t_max, step, "t_max")
    W = sample_disturbance(w, n, N, step)
    if w_tail is None:
        w_tail = W[-1] if N else np.zeros(n)
    w_tail = as_vector(w_tail, n, "w_tail")
    Mt = sol.A_cl.T
    P = sol.P
    E_h, Psi_h = _exp_and_integral(Mt, step)
    E_half, Psi_half = _exp_and_integral(Mt, 0.5 * step)
    xi_mid = np.empty((N, n))
    xi = -np.linalg.solve(Mt, P @ w_tail)
    for k in range(N - 1, -1, -1):
        Pw = P @ W[k]
        xi_mid[k] = E_half @ xi + Psi_half @ Pw
        xi = E_h @ xi + Psi_h @ Pw
    G = input_weight(model, cost)
    cn = CrankNicolson(sol.A_cl, step)
    X = np.empty((N + 1, n))
    X[0] = as_vector(y0, n, "y0")
    for k in range(N):
        X[k + 1] = cn.step(X[k], W[k] - G @ xi_mid[k])
    Rinv_Bt = np.linalg.solve(cost.R, model.B.T)
    U = -(0.5 * (X[:-1] + X[1:]) @ P + xi_mid) @ Rinv_Bt.T
    return Trajectory(step * np.arange(N + 1), X, U)


def _exp_and_integral(M, h):
    """``e^{Mh}`` and ``int_0^h e^{Ms} ds`` from one augmented exponential."""
    n = M.shape[0]
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = M
    aug[:n, n:] = np.eye(n)
    E = mat_exp(aug, h)
    return E[:n, :n], E[:n, n:]
