"""Benchmark examples (spring-mass chain and its heat-equation analogue),
parameter sweeps and figure datasets.

Sweep rows are independent and may run in worker processes; results are
always assembled in parameter order, so output does not depend on the
degree of parallelism.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InstabilityError, PreconditionError
from .horizon import Trajectory, cost_infinite, disturbed_inf_horizon, simulate_inf_horizon
from .mpc import (
    MpcConfig,
    Plant,
    limit_trajectory_zinf,
    mu_LTtau,
    mu_Ttau,
    rhc_gap_bound,
    run_mpc,
    run_rhc,
    traj_error,
)
from .numerics import fit_exponential_decay, fit_line
from .report import SweepTable, dumps_json, save_text, write_csv
from .riccati import CostSpec, LtiModel, RiccatiSolution, solve_care

#: default step for horizon sweeps
STEP = 1e-3
#: dyadic step used when tau takes values 1/16 ... 1/2 (every tau is a multiple)
DYADIC_STEP = 2.0**-10
ENV_THREADS = "RICCATI_MPC_THREADS"


@dataclass(frozen=True)
class ExampleSpec:
    name: str
    model: LtiModel
    cost: CostSpec
    y0: np.ndarray
    w_bar: np.ndarray | None = None
    A_tilde: np.ndarray | None = None
    mu_range: tuple = (0.0, np.inf)

    def __post_init__(self):
        if self.y0.shape != (self.model.n,):
            raise PreconditionError("y0 does not match the state dimension")


def stiffness(k: float = 100.0, N: int = 11) -> np.ndarray:
    """``k`` times the free-free chain matrix (second differences, corner entries 1)."""
    K = 2.0 * np.eye(N) - np.eye(N, k=1) - np.eye(N, k=-1)
    K[0, 0] = K[-1, -1] = 1.0
    return k * K


def _chain_positions(N=11):
    return np.arange(N) / 10.0 - 0.5


def constant_disturbance(n: int, hot_index: int) -> np.ndarray:
    if not 0 <= hot_index < n:
        raise IndexError(f"hot_index {hot_index} out of range for n={n}")
    w = np.zeros(n)
    w[hot_index] = 1.0
    return w


def build_example1() -> ExampleSpec:
    """Eleven unit masses on springs (k = 100), force on the first mass."""
    N = 11
    K = stiffness(100.0, N)
    Z, I = np.zeros((N, N)), np.eye(N)
    A = np.block([[Z, I], [-K, Z]])
    B = np.concatenate([np.zeros(N), constant_disturbance(N, 0)])[:, None]
    C = 10.0 * np.hstack([I, Z])
    cost = CostSpec(C, np.eye(1), np.zeros((2 * N, 2 * N)))
    y0 = np.concatenate([_chain_positions(N), np.zeros(N)])
    A_tilde = np.block([[Z, I], [-K, 0.3 * I]])
    return ExampleSpec("example1", LtiModel(A, B), cost, y0,
                       constant_disturbance(2 * N, 2 * N - 1), A_tilde, (0.014, 0.016))


def build_example1_perturbed() -> Plant:
    ex = build_example1()
    return Plant.affine(ex.A_tilde, ex.model.B, None, ex.model)


def build_example2() -> ExampleSpec:
    """Heat-equation-like chain ``y' = -K y + e_1 u`` with full observation."""
    N = 11
    K = stiffness(100.0, N)
    A = -K
    B = constant_disturbance(N, 0)[:, None]
    cost = CostSpec(np.eye(N), np.eye(1), np.zeros((N, N)))
    return ExampleSpec("example2", LtiModel(A, B), cost, _chain_positions(N),
                       constant_disturbance(N, N - 1), A + 0.3 * np.eye(N), (0.29, 0.31))


def build_example2_perturbed() -> Plant:
    ex = build_example2()
    return Plant.affine(ex.A_tilde, ex.model.B, None, ex.model)


EXAMPLES = {"example1": build_example1, "example2": build_example2}


def perturbed_plant(ex: ExampleSpec, kind: str) -> Plant:
    """``"w"``: exact dynamics plus constant disturbance; ``"A"``: perturbed system matrix."""
    if kind == "w":
        return Plant.from_model(ex.model, ex.w_bar)
    if kind == "A":
        return Plant.affine(ex.A_tilde, ex.model.B, None, ex.model)
    if kind == "none":
        return Plant.from_model(ex.model)
    raise ValueError(f"unknown perturbation {kind!r}")


def resolve_parallel(parallel: int | None = None) -> int:
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            parallel = int(env)
        except ValueError as exc:
            raise PreconditionError(f"{ENV_THREADS} must be an integer") from exc
    return max(1, int(parallel or 1))


def _map(fn, jobs, parallel):
    parallel = min(resolve_parallel(parallel), len(jobs))
    if parallel <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(fn, jobs))


# --------------------------------------------------------------------------
# RHC horizon sweep

RHC_COLUMNS = ["gap", "T", "u_gap", "y_gap", "bound", "mu_Ttau", "cost_gap",
               "cost_gap_direct", "unstable"]


def _quadratic_gap(a: Trajectory, b: Trajectory, cost: CostSpec) -> float:
    """``J(u_a) - J(u_b)`` for the optimal ``b``: half the cost norm of the difference."""
    diff = Trajectory(a.times, a.states - b.states, a.controls - b.controls)
    return cost_infinite(diff, cost, np.inf, np.zeros_like(cost.Q)).value


def _rhc_row(job):
    ex, sol, tau, gap, step, t_max = job
    T = tau + gap
    ref = simulate_inf_horizon(ex.model, sol, ex.y0, t_max, step)
    mu = mu_Ttau(sol, ex.model, ex.cost, T, tau)
    try:
        run = run_rhc(ex.model, ex.cost, MpcConfig(T, tau, step, t_max), ex.y0)
    except InstabilityError:
        return (gap, T, np.nan, np.nan, np.nan, mu, np.nan, np.nan, True)
    tr = run.trajectory
    err = traj_error(tr, ref, "Linf", start=tau)
    i0 = int(round(tau / step))
    bound = float(np.max(rhc_gap_bound(sol, ex.model, ex.cost, T, tau, ex.y0, tr.times[i0:])))
    J_rhc = cost_infinite(tr, ex.cost, np.inf, sol.P).value
    J_inf = cost_infinite(ref, ex.cost, np.inf, sol.P).value
    return (gap, T, err.control, err.state, bound, mu, _quadratic_gap(tr, ref, ex.cost),
            J_rhc - J_inf, False)


def sweep_rhc_horizon(ex: ExampleSpec, tau: float, gaps, step: float = STEP,
                      t_max: float = 20.0, parallel: int | None = None,
                      sol: RiccatiSolution | None = None) -> SweepTable:
    """RHC against the infinite-horizon optimum for each ``T - tau`` in ``gaps``.

    Gaps are L-infinity norms after one window of burn-in.  The fit is the
    log-linear slope of the control gap against ``T - tau``; the cost-gap
    slope and their ratio are reported alongside.
    """
    gaps = [float(g) for g in gaps]
    if not gaps or any(b <= a for a, b in zip(gaps, gaps[1:])):
        raise PreconditionError("gaps must be nonempty and increasing")
    sol = sol or solve_care(ex.model, ex.cost)
    rows = _map(_rhc_row, [(ex, sol, tau, g, step, t_max) for g in gaps], parallel)
    table = SweepTable("gap", RHC_COLUMNS, rows, meta={
        "example": ex.name, "tau": tau, "step": step, "t_max": t_max, "mu_inf": sol.mu,
        "M_inf": sol.M, "K0": sol.K0, "burn_in": tau})
    ok = [r for r in rows if not r[-1] and r[2] > 0]
    if len(ok) >= 2:
        f = fit_exponential_decay([(r[0], r[2]) for r in ok])
        fc = fit_exponential_decay([(r[0], r[6]) for r in ok])
        table.fit = {"slope": f.slope, "intercept": f.intercept, "r2": f.r2,
                     "slope_over_mu": f.slope / sol.mu, "cost_slope": fc.slope,
                     "cost_r2": fc.r2, "cost_slope_ratio": fc.slope / f.slope}
    return table


# --------------------------------------------------------------------------
# MPC control-horizon sweep

MPC_COLUMNS = ["tau", "T", "u_gap", "y_gap", "mu_LTtau", "unstable"]


def _mpc_row(job):
    ex, sol, kind, tau, gap, step, t_max, K_generic = job
    plant = perturbed_plant(ex, kind)
    T = tau + gap
    mu = mu_LTtau(sol, ex.model, ex.cost, T, tau, plant.L, K_generic)
    try:
        ref = limit_trajectory_zinf(plant, sol, ex.y0, t_max, step)
        run = run_mpc(plant, ex.model, ex.cost, MpcConfig(T, tau, step, t_max), ex.y0)
    except InstabilityError:
        return (tau, T, np.nan, np.nan, mu, True)
    err = traj_error(run.trajectory, ref, "Linf", start=tau)
    return (tau, T, err.control, err.state, mu, False)


def sweep_mpc_tau(ex: ExampleSpec, gap: float, taus, perturbation: str = "w",
                  step: float = DYADIC_STEP, t_max: float = 20.0,
                  parallel: int | None = None, sol: RiccatiSolution | None = None,
                  K_generic: float = 1.0) -> SweepTable:
    """MPC on a perturbed plant against the frozen-gain limit ``(z_inf, v_inf)``.

    For each ``tau`` (with ``T - tau = gap``) the control gap after one
    window of burn-in is recorded; the fit is affine in ``tau``.
    """
    taus = [float(t) for t in taus]
    if not taus or taus[0] <= 0 or any(b <= a for a, b in zip(taus, taus[1:])):
        raise PreconditionError("taus must be positive and increasing")
    sol = sol or solve_care(ex.model, ex.cost)
    jobs = [(ex, sol, perturbation, t, gap, step, t_max, K_generic) for t in taus]
    rows = _map(_mpc_row, jobs, parallel)
    table = SweepTable("tau", MPC_COLUMNS, rows, meta={
        "example": ex.name, "gap": gap, "perturbation": perturbation, "step": step,
        "t_max": t_max, "mu_inf": sol.mu, "L": perturbed_plant(ex, perturbation).L})
    ok = [r for r in rows if not r[-1]]
    if len(ok) >= 2:
        f = fit_line([r[0] for r in ok], [r[2] for r in ok])
        table.fit = {"intercept": f.intercept, "slope": f.slope, "r2": f.r2}
    return table


# --------------------------------------------------------------------------
# figure datasets

FIG3_PANELS = ((0.5, 0.0), (0.5, 1.0), (0.5, 4.0), (0.0625, 4.0))
FIG4_PANELS = (("w", 0.5, 4.0), ("w", 0.0625, 4.0), ("A", 0.5, 4.0), ("A", 0.0625, 4.0))
FIG5_TAUS = (0.0625, 0.125, 0.25, 0.5)
FIG5_GAPS = (1.0, 2.0, 3.0, 4.0)


def _series_rows(panel, tau, gap, times, cols, stride, tag=None):
    rows = []
    for k in range(0, len(times) - 1, stride):
        head = (panel,) if tag is None else (panel, tag)
        rows.append(head + (tau, gap, times[k]) + tuple(c[k] for c in cols))
    return rows


def _prediction_rows(panel, run, stride=1):
    rows = []
    for p in run.predictions:
        for j in range(0, len(p.controls), stride):
            rows.append((panel, p.t0, p.times[j], p.controls[j, 0]))
    return rows


def _fig3(ex, sol, step, t_max, out_stride, pred_stride):
    ref = simulate_inf_horizon(ex.model, sol, ex.y0, t_max, step)
    series, preds, status = [], [], {}
    for i, (tau, gap) in enumerate(FIG3_PANELS):
        cfg = MpcConfig(tau + gap, tau, step, t_max, keep_predictions=True, stride=pred_stride)
        try:
            run = run_rhc(ex.model, ex.cost, cfg, ex.y0)
        except InstabilityError as exc:
            status[f"panel{i}"] = {"unstable": True, "t_stable": exc.t_stable}
            continue
        status[f"panel{i}"] = {"unstable": False,
                               "max_abs_y": float(np.abs(run.states).max())}
        series += _series_rows(i, tau, gap, run.times,
                               [run.controls[:, 0], ref.controls[:, 0]], out_stride)
        preds += _prediction_rows(i, run)
    return ([("fig3.csv", ["panel", "tau", "gap", "t", "u_rhc", "u_inf"], series),
             ("fig3_predictions.csv", ["panel", "window_t0", "t", "u_pred"], preds)], status)


def _fig4(ex, sol, step, t_max, out_stride, pred_stride):
    series, preds, status = [], [], {}
    refs = {}
    for kind in ("w", "A"):
        plant = perturbed_plant(ex, kind)
        if kind == "w":
            u_inf = disturbed_inf_horizon(ex.model, ex.cost, sol, ex.w_bar, ex.y0, t_max, step)
        else:
            # optimal control of the perturbed system itself
            model_t = LtiModel(ex.A_tilde, ex.model.B)
            sol_t = solve_care(model_t, ex.cost)
            u_inf = simulate_inf_horizon(model_t, sol_t, ex.y0, t_max, step)
        try:
            v_inf = limit_trajectory_zinf(plant, sol, ex.y0, t_max, step)
        except InstabilityError:
            v_inf = None
        refs[kind] = (plant, u_inf, v_inf)
    for i, (kind, tau, gap) in enumerate(FIG4_PANELS):
        plant, u_inf, v_inf = refs[kind]
        cfg = MpcConfig(tau + gap, tau, step, t_max, keep_predictions=True, stride=pred_stride)
        try:
            run = run_mpc(plant, ex.model, ex.cost, cfg, ex.y0)
        except InstabilityError as exc:
            status[f"panel{i}"] = {"unstable": True, "t_stable": exc.t_stable}
            continue
        status[f"panel{i}"] = {"unstable": False, "max_abs_y": float(np.abs(run.states).max()),
                               "v_inf_bounded": v_inf is not None}
        v = v_inf.controls[:, 0] if v_inf is not None else np.full(len(run.controls), np.nan)
        series += _series_rows(i, tau, gap, run.times,
                               [run.controls[:, 0], u_inf.controls[:, 0], v], out_stride, kind)
        preds += _prediction_rows(i, run)
    cols = ["panel", "case", "tau", "gap", "t", "u_mpc", "u_inf", "v_inf"]
    return ([("fig4.csv", cols, series),
             ("fig4_predictions.csv", ["panel", "window_t0", "t", "u_pred"], preds)], status)


def fig5_tables(parallel=None, step=None, t_max=20.0):
    """The three Example-2 sweeps: horizon (RHC), tau with disturbance, tau with perturbed A."""
    ex = build_example2()
    sol = solve_care(ex.model, ex.cost)
    return {
        "fig5a": sweep_rhc_horizon(ex, 0.5, FIG5_GAPS, step or STEP, t_max, parallel, sol),
        "fig5b": sweep_mpc_tau(ex, 4.0, FIG5_TAUS, "w", step or DYADIC_STEP, t_max, parallel, sol),
        "fig5c": sweep_mpc_tau(ex, 4.0, FIG5_TAUS, "A", step or DYADIC_STEP, t_max, parallel, sol),
    }


def reproduce_figures(which, outdir, *, step: float | None = None, t_max: float | None = None,
                      parallel: int | None = None, out_stride: int = 8,
                      pred_stride: int = 64) -> list[Path]:
    """Write the datasets behind the figures as CSV (plus a JSON status file).

    ``fig3``/``fig4`` use the spring-mass chain with ``t_max = 60`` by
    default; ``fig5`` runs the sweeps on the heat-like chain.
    """
    which = [which] if isinstance(which, str) else list(which)
    outdir = Path(outdir)
    written = []
    for name in which:
        if name in ("fig3", "fig4"):
            ex = build_example1()
            sol = solve_care(ex.model, ex.cost)
            h = step or DYADIC_STEP
            tm = t_max or 60.0
            build = _fig3 if name == "fig3" else _fig4
            files, status = build(ex, sol, h, tm, out_stride, pred_stride)
            header = {"figure": name, "example": ex.name, "step": h, "t_max": tm,
                      "out_stride": out_stride, "pred_stride": pred_stride}
            for fname, cols, rows in files:
                written.append(save_text(outdir / fname, write_csv(cols, rows, header)))
            written.append(save_text(outdir / f"{name}_status.json",
                                     dumps_json({**header, "panels": status})))
        elif name == "fig5":
            tables = fig5_tables(parallel, step, t_max or 20.0)
            for key, tab in tables.items():
                written.append(save_text(outdir / f"{key}.csv", tab.to_csv({"figure": key})))
                written.append(save_text(outdir / f"{key}_fit.json",
                                         dumps_json({"fit": tab.fit, "meta": tab.meta})))
        else:
            raise ValueError(f"unknown figure {name!r}")
    return written
