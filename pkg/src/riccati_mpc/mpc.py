"""Closed-loop MPC / RHC simulation, limiting trajectories and the
stability-margin evaluators.

The finite-horizon problem is time invariant, so one Riccati path of
length ``T`` serves every window: the window started at ``k*tau`` uses
``P_T(t - k*tau)`` regardless of ``k``.  ``run_mpc`` therefore integrates
the Riccati equation once and precomputes the per-step closed-loop
propagators of a window; each window then costs one matrix-vector product
per step instead of a fresh Riccati solve.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, InstabilityError, PreconditionError
from .horizon import (
    FeedbackLaw,
    Trajectory,
    apply_law,
    finite_horizon_law,
    horizon_path,
    sample_disturbance,
)
from .numerics import (
    CrankNicolson,
    SampledSignal,
    as_matrix,
    as_vector,
    operator_norm,
    rk4_step,
    steps_in,
)
from .riccati import CostSpec, LtiModel, RiccatiSolution, input_weight

#: plant state norm treated as blow-up
BLOWUP = 1e9
#: default for the unquantified generic constant in the MPC bounds
K_GENERIC = 1.0


@dataclass(frozen=True)
class Plant:
    """True dynamics ``y' = f(y, u) + w(t)``.

    ``A``/``B`` are set for affine plants ``f = A y + B u``; those are
    integrated with Crank-Nicolson, anything else with RK4.  ``L`` bounds
    the Lipschitz constant of ``f(y, u) - A y - B u`` w.r.t. the model.
    """

    f: Callable
    n: int
    m: int
    w: object = None
    L: float = 0.0
    A: np.ndarray | None = None
    B: np.ndarray | None = None

    def __post_init__(self):
        f0 = np.asarray(self.f(np.zeros(self.n), np.zeros(self.m)), dtype=float)
        if f0.shape != (self.n,):
            raise DimensionError(f"f must return a length-{self.n} vector")
        if np.max(np.abs(f0), initial=0.0) > 1e-12:
            raise PreconditionError("plant must satisfy f(0, 0) = 0")
        if self.L < 0:
            raise PreconditionError("Lipschitz bound must be nonnegative")

    @classmethod
    def affine(cls, A, B, w=None, model: LtiModel | None = None, L: float | None = None):
        A = as_matrix(A, "A")
        B = as_matrix(B, "B")
        if L is None:
            L = 0.0 if model is None else max(operator_norm(A - model.A), operator_norm(B - model.B))
        return cls(lambda y, u: A @ y + B @ u, A.shape[0], B.shape[1], w, float(L), A, B)

    @classmethod
    def from_model(cls, model: LtiModel, w=None) -> "Plant":
        return cls.affine(model.A, model.B, w, model)

    @property
    def is_affine(self) -> bool:
        return self.A is not None

    def matches(self, model: LtiModel) -> bool:
        """True for the undisturbed exact model."""
        return (self.w is None and self.is_affine
                and np.array_equal(self.A, model.A) and np.array_equal(self.B, model.B))


@dataclass(frozen=True)
class MpcConfig:
    T: float
    tau: float
    step: float = 1e-3
    t_max: float = 20.0
    keep_predictions: bool = False
    stride: int = 10

    def __post_init__(self):
        if not 0 < self.tau <= self.T + 1e-12:
            raise PreconditionError("need 0 < tau <= T")
        steps_in(self.tau, self.step, "tau")
        steps_in(self.T, self.step, "T")
        steps_in(self.t_max, self.step, "t_max")
        if self.stride < 1:
            raise PreconditionError("stride must be >= 1")

    @property
    def gap(self) -> float:
        return self.T - self.tau


@dataclass(frozen=True)
class WindowPrediction:
    t0: float
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray


@dataclass(frozen=True)
class MpcRun:
    trajectory: Trajectory
    window_times: np.ndarray
    predictions: list = field(default_factory=list)

    @property
    def times(self):
        return self.trajectory.times

    @property
    def states(self):
        return self.trajectory.states

    @property
    def controls(self):
        return self.trajectory.controls


def run_mpc(plant: Plant, model: LtiModel, cost: CostSpec, cfg: MpcConfig, y0, *,
            path: SampledSignal | None = None, law: FeedbackLaw | None = None) -> MpcRun:
    """Receding-horizon loop: measure at ``k*tau``, solve on the model, apply for ``tau``.

    Window controls come from the finite-horizon feedback on the model,
    evaluated open loop along the predicted state; they are then applied to
    the plant together with the disturbance.  ``path`` (step ``cfg.step/2``)
    or a prebuilt ``law`` may be supplied to share work across runs.
    """
    if plant.n != model.n or plant.m != model.m:
        raise DimensionError("plant and model dimensions differ")
    h = cfg.step
    if law is None:
        if path is None:
            path = horizon_path(model, cost, cfg.T, h)
        law = finite_horizon_law(model, cost, path, cfg.T, h)
    if abs(law.step - h) > 1e-15 or abs(law.horizon - cfg.T) > 1e-9:
        raise PreconditionError("feedback law does not match the configuration")
    n_tau = steps_in(cfg.tau, h, "tau")
    n_T = len(law.gains)
    N = steps_in(cfg.t_max, h, "t_max")
    exact = plant.matches(model)
    W = None if exact else sample_disturbance(plant.w, plant.n, N, h)
    cn = CrankNicolson(plant.A, h) if plant.is_affine and not exact else None

    X = np.empty((N + 1, model.n))
    U = np.empty((N, model.m))
    X[0] = as_vector(y0, model.n, "y0")
    starts = []
    preds = []
    k0 = 0
    while k0 < N:
        starts.append(k0 * h)
        steps = min(n_tau, N - k0)
        pred_steps = n_T if cfg.keep_predictions else steps
        Xp, Up = apply_law(law, X[k0], pred_steps)
        if cfg.keep_predictions:
            idx = np.arange(0, n_T + 1, cfg.stride)
            preds.append(WindowPrediction(k0 * h, (k0 + idx) * h, Xp[idx], Up[idx[:-1]]))
        U[k0:k0 + steps] = Up[:steps]
        if exact:
            X[k0 + 1:k0 + steps + 1] = Xp[1:steps + 1]
        else:
            _apply_to_plant(plant, cn, X, U, W, k0, steps, h)
        bad = ~(np.abs(X[k0 + 1:k0 + steps + 1]).max(axis=1) <= BLOWUP)
        if bad.any():
            j = k0 + 1 + int(np.argmax(bad))
            raise InstabilityError(
                f"MPC unstable for these parameters (window k={len(starts) - 1})",
                index=len(starts) - 1, t_stable=(j - 1) * h)
        k0 += steps
    traj = Trajectory(h * np.arange(N + 1), X, U)
    return MpcRun(traj, np.array(starts), preds)


def _apply_to_plant(plant, cn, X, U, W, k0, steps, h):
    if cn is not None:
        B = plant.B
        for j in range(k0, k0 + steps):
            X[j + 1] = cn.step(X[j], B @ U[j] + W[j])
        return
    for j in range(k0, k0 + steps):
        u, w = U[j], W[j]
        X[j + 1] = rk4_step(lambda t, y: plant.f(y, u) + w, j * h, X[j], h)


def run_rhc(model: LtiModel, cost: CostSpec, cfg: MpcConfig, y0, **kw) -> MpcRun:
    """MPC on the exact, undisturbed model; the prediction is the trajectory."""
    return run_mpc(Plant.from_model(model), model, cost, cfg, y0, **kw)


def rhc_periodic_feedback(model: LtiModel, cost: CostSpec, cfg: MpcConfig, y0,
                          path: SampledSignal | None = None) -> np.ndarray:
    """RHC states from the tau-periodic closed-loop feedback.

    Independent of ``run_rhc``: the one-window transition matrices are
    built one CN propagator at a time, and the state at ``k*tau + j*h`` is
    ``Psi_j Psi_tau^k y0``.
    """
    h = cfg.step
    if path is None:
        path = horizon_path(model, cost, cfg.T, h)
    n_tau = steps_in(cfg.tau, h, "tau")
    N = steps_in(cfg.t_max, h, "t_max")
    G = input_weight(model, cost)
    n = model.n
    Psi = np.empty((n_tau + 1, n, n))
    Psi[0] = np.eye(n)
    for j in range(n_tau):
        P = path.at(cfg.T - (j + 0.5) * h)
        Psi[j + 1] = CrankNicolson(model.A - G @ P, h).propagator @ Psi[j]
    X = np.empty((N + 1, n))
    y = as_vector(y0, n, "y0")
    for k0 in range(0, N + 1, n_tau):
        for j in range(min(n_tau, N - k0) + 1):
            X[k0 + j] = Psi[j] @ y
        y = Psi[n_tau] @ y
    return X


def limit_trajectory_zinf(plant: Plant, sol: RiccatiSolution, y0, t_max: float,
                          step: float = 1e-3) -> Trajectory:
    """Plant under the frozen infinite-horizon gain: ``z' = f(z, -F_inf z) + w``.

    Controls are recorded at interval midpoints like every other trajectory.
    """
    N = steps_in(t_max, step, "t_max")
    F = sol.F
    W = sample_disturbance(plant.w, plant.n, N, step)
    Z = np.empty((N + 1, plant.n))
    Z[0] = as_vector(y0, plant.n, "y0")
    if plant.is_affine:
        cn = CrankNicolson(plant.A - plant.B @ F, step)
        for k in range(N):
            Z[k + 1] = cn.step(Z[k], W[k])
            _guard(Z[k + 1], k, step)
    else:
        for k in range(N):
            w = W[k]
            Z[k + 1] = rk4_step(lambda t, z: plant.f(z, -F @ z) + w, k * step, Z[k], step)
            _guard(Z[k + 1], k, step)
    V = -0.5 * (Z[:-1] + Z[1:]) @ F.T
    return Trajectory(step * np.arange(N + 1), Z, V)


def _guard(z, k, step):
    if not np.abs(z).max() <= BLOWUP:
        raise InstabilityError("frozen-gain closed loop unstable", index=k + 1, t_stable=k * step)


def _k1(sol: RiccatiSolution, model: LtiModel, cost: CostSpec) -> float:
    return sol.M * operator_norm(input_weight(model, cost)) * sol.K0


def mu_Ttau(sol: RiccatiSolution, model: LtiModel, cost: CostSpec, T: float, tau: float) -> float:
    """RHC decay rate ``mu_inf - K1 exp(-2 mu_inf (T - tau))``, ``K1 = M ||B R^-1 B^T|| K0``."""
    return sol.mu - _k1(sol, model, cost) * np.exp(-2.0 * sol.mu * (T - tau))


def mpc_constants(sol: RiccatiSolution, model: LtiModel, cost: CostSpec):
    """``(K1, K2)`` of the MPC decay rate."""
    RinvBt = np.linalg.solve(cost.R, model.B.T)
    K2p = operator_norm(RinvBt) * (sol.K0 + operator_norm(sol.P))
    return _k1(sol, model, cost), sol.M * (1.0 + K2p)


def mu_LTtau(sol: RiccatiSolution, model: LtiModel, cost: CostSpec, T: float, tau: float,
             L: float, K_generic: float = K_GENERIC) -> float:
    """MPC decay rate with model error ``L``; ``K_generic`` parametrizes the bound family."""
    K1, K2 = mpc_constants(sol, model, cost)
    Kg = K_generic
    return (sol.mu - K1 * np.exp(-2.0 * sol.mu * (T - tau)) - K2 * L
            - Kg * L * (L + 1.0) * tau * np.exp(Kg * (L + 1.0) * tau))


def rhc_stability_envelope(sol, model, cost, T, tau, y0, times) -> np.ndarray:
    """``M_inf exp(-mu_{T-tau} t) |y0|`` on ``times``."""
    mu = mu_Ttau(sol, model, cost, T, tau)
    return sol.M * np.exp(-mu * np.asarray(times)) * np.linalg.norm(y0)


def rhc_gap_bound(sol, model, cost, T, tau, y0, times) -> np.ndarray:
    """Explicit bound on ``|y_RHC - x_inf| + |u_RHC - u_inf|``.

    Form ``e^{-2 mu (T-tau)} (c0 + c1 t) e^{-mu_{T-tau} t} |y0|`` with
    ``c0 = ||R^-1 B^T|| K0 M`` and ``c1 = (||R^-1 B^T P_inf|| + 1) K1 M``.
    """
    t = np.asarray(times, dtype=float)
    RinvBt = np.linalg.solve(cost.R, model.B.T)
    K1 = _k1(sol, model, cost)
    c0 = operator_norm(RinvBt) * sol.K0 * sol.M
    c1 = (operator_norm(RinvBt @ sol.P) + 1.0) * K1 * sol.M
    mu_g = mu_Ttau(sol, model, cost, T, tau)
    return (np.exp(-2.0 * sol.mu * (T - tau)) * (c0 + c1 * t) * np.exp(-mu_g * t)
            * np.linalg.norm(y0))


def mpc_stability_bound(sol, model, cost, T, tau, L, y0, w_inf, times,
                        K_generic: float = K_GENERIC) -> np.ndarray:
    """Input-to-state bound on ``|y_MPC(t)|`` for ``mu_{L,T,tau} > 0``."""
    mu = mu_LTtau(sol, model, cost, T, tau, L, K_generic)
    if mu <= 0:
        raise PreconditionError("bound needs a positive decay rate")
    t = np.asarray(times, dtype=float)
    Kg = K_generic
    gain = Kg * (1.0 + (L + 1.0) * tau * np.exp(Kg * (L + 1.0) * tau))
    return (sol.M * np.exp(-mu * t) * np.linalg.norm(y0)
            + (1.0 - np.exp(-mu * t)) / mu * gain * w_inf)


@dataclass(frozen=True)
class TrajError:
    state: float
    control: float

    @property
    def total(self) -> float:
        return self.state + self.control


METRICS = ("Linf", "L2", "terminal")


def traj_error(a: Trajectory, b: Trajectory, metric: str = "Linf", start: float = 0.0) -> TrajError:
    """State and control differences in the chosen norm, from ``start`` on.

    ``Linf`` is the max Euclidean norm over samples, ``L2`` the trapezoid
    (states) / midpoint (controls) integral norm, ``terminal`` the final
    sample.
    """
    if a.times.shape != b.times.shape or not np.allclose(a.times, b.times, rtol=0, atol=1e-12):
        raise PreconditionError("trajectories are on different grids")
    if a.states.shape != b.states.shape or a.controls.shape != b.controls.shape:
        raise DimensionError("trajectory dimensions differ")
    i0 = int(round((start - a.times[0]) / a.step))
    dx = np.linalg.norm(a.states[i0:] - b.states[i0:], axis=1)
    du = np.linalg.norm(a.controls[i0:] - b.controls[i0:], axis=1)
    if metric == "Linf":
        return TrajError(float(dx.max()), float(du.max(initial=0.0)))
    if metric == "L2":
        h = a.step
        sx = h * (np.sum(dx**2) - 0.5 * (dx[0] ** 2 + dx[-1] ** 2))
        return TrajError(float(np.sqrt(sx)), float(np.sqrt(h * np.sum(du**2))))
    if metric == "terminal":
        return TrajError(float(dx[-1]), float(du[-1]) if du.size else 0.0)
    raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
