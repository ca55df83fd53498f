"""Discrete-time receding horizon control.

Dynamics ``x_{t+1} = A x_t + B u_t`` are exact here (no integrator), so
every tolerance in this module is a linear-algebra tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, PreconditionError
from .numerics import as_matrix, as_vector, controllable_rank, fit_exponential_decay, operator_norm
from .report import SweepTable
from .riccati import (
    RANK_TOL,
    CostSpec,
    DareSolution,
    compute_k0_dt,
    drde_iterate,
    feedback_factor,
    solve_dare,
)


@dataclass(frozen=True)
class DtLtiModel:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        B = as_matrix(self.B, "B")
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise DimensionError("A must be n x n and B n x m")
        if controllable_rank(A, B, RANK_TOL) < A.shape[0]:
            raise PreconditionError("(A, B) is not controllable")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]


@dataclass(frozen=True)
class DtTrajectory:
    states: np.ndarray    # (N+1, n)
    controls: np.ndarray  # (N, m)

    def __post_init__(self):
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise DimensionError("need one more state than controls")


def _check(model, cost):
    if cost.C.shape[1] != model.n or cost.R.shape[0] != model.m:
        raise DimensionError("cost does not match model dimensions")


def dt_gains(model: DtLtiModel, cost: CostSpec, T: int, Qs=None):
    """Per-step gains ``K_s = R^{-1} B^T Q_s M_s A`` for ``s = 0..T-1``.

    With these, ``u = -K_s x`` and ``A - B K_s = M_s A``.
    """
    if Qs is None:
        Qs = drde_iterate(model.A, model.B, cost, T)
    RinvBt = np.linalg.solve(cost.R, model.B.T)
    G = model.B @ RinvBt
    return [RinvBt @ Qs[s] @ feedback_factor(G, Qs[s]) @ model.A for s in range(T)]


def run_rhc_dt(model: DtLtiModel, cost: CostSpec, T: int, tau: int, N: int, x0,
               Qs=None) -> DtTrajectory:
    """Algorithm for discrete RHC: windows of ``tau`` steps of the horizon-``T`` optimum.

    Step ``t`` uses the kernel ``Q_{T-1-(t mod tau)}``.
    """
    _check(model, cost)
    if not 1 <= tau <= T:
        raise PreconditionError("need 1 <= tau <= T")
    if N < 0:
        raise PreconditionError("N must be nonnegative")
    K = dt_gains(model, cost, T, Qs)
    X = np.empty((N + 1, model.n))
    U = np.empty((N, model.m))
    X[0] = as_vector(x0, model.n, "x0")
    for t in range(N):
        U[t] = -K[T - 1 - (t % tau)] @ X[t]
        X[t + 1] = model.A @ X[t] + model.B @ U[t]
    return DtTrajectory(X, U)


def infinite_horizon_dt(model: DtLtiModel, cost: CostSpec, dare: DareSolution, N: int,
                        x0) -> DtTrajectory:
    RinvBt = np.linalg.solve(cost.R, model.B.T)
    K = RinvBt @ dare.Q @ dare.M @ model.A
    X = np.empty((N + 1, model.n))
    U = np.empty((N, model.m))
    X[0] = as_vector(x0, model.n, "x0")
    for t in range(N):
        U[t] = -K @ X[t]
        X[t + 1] = model.A @ X[t] + model.B @ U[t]
    return DtTrajectory(X, U)


def qp_oracle_dt(model: DtLtiModel, cost: CostSpec, x_bar, T: int,
                 max_vars: int = 5000) -> np.ndarray:
    """Exact minimizer ``(u_0..u_{T-1})`` of the horizon-``T`` cost, shape ``(T, m)``.

    The states are eliminated and the dense normal equations solved.
    """
    _check(model, cost)
    n, m = model.n, model.m
    if T * m > max_vars:
        raise PreconditionError("too many decision variables for the dense oracle")
    x_bar = as_vector(x_bar, n, "x_bar")
    A, B = model.A, model.B
    # x_t = S_t x_bar + H_t u
    S = [np.eye(n)]
    H = [np.zeros((n, T * m))]
    for t in range(T):
        S.append(A @ S[-1])
        Ht = A @ H[-1]
        Ht[:, t * m:(t + 1) * m] += B
        H.append(Ht)
    Q = cost.Q
    hess = np.kron(np.eye(T), cost.R)
    grad = np.zeros(T * m)
    for t in range(T + 1):
        W = cost.E_T if t == T else Q
        hess += H[t].T @ W @ H[t]
        grad += H[t].T @ W @ (S[t] @ x_bar)
    if np.linalg.cond(hess) > 1e12:
        raise PreconditionError("oracle normal equations are ill-conditioned")
    return np.linalg.solve(hess, -grad).reshape(T, m)


def cost_dt(traj: DtTrajectory, cost: CostSpec, terminal=None) -> float:
    """``1/2 sum_{t<N} (|C x_t|^2 + u_t^T R u_t) + 1/2 x_N^T W x_N``."""
    X, U = traj.states, traj.controls
    Y = X[:-1] @ cost.C.T
    run = np.sum(Y * Y) + np.einsum("ij,jk,ik->", U, cost.R, U)
    W = cost.E_T if terminal is None else terminal
    return 0.5 * float(run + X[-1] @ W @ X[-1])


def k0_dt(dare: DareSolution, model: DtLtiModel, cost: CostSpec) -> float:
    """Constant of the DRDE convergence bound; falls back to the exact recursion
    when the Grammian form is not applicable."""
    try:
        return compute_k0_dt(dare.Q, cost.E_T, dare.MA, model.B, cost.R)
    except PreconditionError:
        return compute_k0_dt(dare.Q, cost.E_T, dare.MA, model.B, cost.R,
                             method="recursion", A=model.A, C=cost.C)


def theta_Ttau(dare: DareSolution, model: DtLtiModel, cost: CostSpec, T: int, tau: int,
               k0: float | None = None) -> float:
    """Contraction factor ``rho + K1 rho^{2(T-tau)-1}`` with ``K1 = ||B R^-1 B^T|| K0``."""
    if k0 is None:
        k0 = k0_dt(dare, model, cost)
    G = model.B @ np.linalg.solve(cost.R, model.B.T)
    rho = dare.rho
    return rho + operator_norm(G) * k0 * rho ** (2 * (T - tau) - 1)


DT_COLUMNS = ["T", "gap", "theta", "certified", "unstable", "max_gap", "cost_gap",
              "cost_gap_quadratic"]


def dt_convergence_report(model: DtLtiModel, cost: CostSpec, T_list, tau: int, N: int,
                          x0) -> SweepTable:
    """Gaps between discrete RHC and the infinite-horizon optimum for each ``T``.

    ``max_gap`` is ``max_t |x_t - x*_t| + |u_t - u*_t|``; ``cost_gap`` the
    difference of the infinite-horizon costs (with the ``Q_inf`` tail).
    """
    T_list = sorted(int(T) for T in T_list)
    if not T_list:
        raise PreconditionError("T_list is empty")
    dare = solve_dare(model.A, model.B, cost)
    k0 = k0_dt(dare, model, cost)
    ref = infinite_horizon_dt(model, cost, dare, N, x0)
    J_ref = cost_dt(ref, cost, dare.Q)
    rows = []
    for T in T_list:
        theta = theta_Ttau(dare, model, cost, T, tau, k0)
        tr = run_rhc_dt(model, cost, T, tau, N, x0)
        unstable = not np.all(np.isfinite(tr.states)) or np.abs(tr.states[-1]).max() > 1e6
        dx = np.linalg.norm(tr.states - ref.states, axis=1)
        du = np.linalg.norm(tr.controls - ref.controls, axis=1)
        gap = float(np.max(dx[:-1] + du)) if N else 0.0
        diff = DtTrajectory(tr.states - ref.states, tr.controls - ref.controls)
        rows.append((T, T - tau, theta, bool(theta < 1), bool(unstable), gap,
                     cost_dt(tr, cost, dare.Q) - J_ref, cost_dt(diff, cost, dare.Q)))
    table = SweepTable("T", DT_COLUMNS, rows,
                       meta={"tau": tau, "N": N, "rho": dare.rho, "K0": k0})
    pts = [(r[1], r[5]) for r in rows if r[5] > 0 and not r[4]]
    if len(pts) >= 2:
        f = fit_exponential_decay(pts)
        table.fit = {"slope": f.slope, "intercept": f.intercept, "r2": f.r2,
                     "predicted_slope": 2.0 * np.log(dare.rho)}
    return table
