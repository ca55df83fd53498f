import numpy as np
import pytest

from conftest import scalar
from riccati_mpc import horizon as hz
from riccati_mpc import mpc
from riccati_mpc.errors import DimensionError, InstabilityError, PreconditionError
from riccati_mpc.experiments import DYADIC_STEP, sweep_rhc_horizon
from riccati_mpc.riccati import solve_care


@pytest.fixture(scope="module")
def ex2_inf(ex2, ex2_sol):
    return hz.simulate_inf_horizon(ex2.model, ex2_sol, ex2.y0, 20.0, 1e-3)


def test_exact_terminal_rhc_is_infinite_horizon(ex2, ex2_sol, ex2_inf):
    cost = ex2.cost.with_terminal(ex2_sol.P)
    run = mpc.run_rhc(ex2.model, cost, mpc.MpcConfig(1.0, 0.5, 1e-3, 20.0), ex2.y0)
    err = mpc.traj_error(run.trajectory, ex2_inf)
    assert err.state <= 1e-5 and err.control <= 1e-5


def test_zero_disturbance_plant_matches_rhc(ex2):
    # exact-model shortcut vs integrating the plant with the window controls
    cfg = mpc.MpcConfig(2.5, 0.5, 1e-3, 10.0)
    a = mpc.run_rhc(ex2.model, ex2.cost, cfg, ex2.y0)
    plant = mpc.Plant.affine(ex2.model.A, ex2.model.B, np.zeros(ex2.model.n))
    assert not plant.matches(ex2.model)
    b = mpc.run_mpc(plant, ex2.model, ex2.cost, cfg, ex2.y0)
    assert np.abs(a.states - b.states).max() <= 1e-10 * np.abs(a.states).max()
    assert np.array_equal(a.controls[:500], b.controls[:500])


def test_rhc_equals_periodic_feedback(ex2):
    cfg = mpc.MpcConfig(2.5, 0.5, 1e-3, 10.0)
    path = hz.horizon_path(ex2.model, ex2.cost, cfg.T, cfg.step)
    run = mpc.run_rhc(ex2.model, ex2.cost, cfg, ex2.y0, path=path)
    X = mpc.rhc_periodic_feedback(ex2.model, ex2.cost, cfg, ex2.y0, path)
    assert np.abs(run.states - X).max() <= 1e-8


def test_window_handoff_is_exact():
    model, cost = scalar()
    cfg = mpc.MpcConfig(1.25, 0.25, 1e-3, 5.0, keep_predictions=True, stride=1)
    run = mpc.run_mpc(mpc.Plant.from_model(model, [0.1]), model, cost, cfg, [1.0])
    n_tau = 250
    for k, p in enumerate(run.predictions):
        assert p.t0 == pytest.approx(k * 0.25)
        assert np.array_equal(p.states[0], run.states[k * n_tau])
    # controls jump only at window starts
    jumps = np.abs(np.diff(run.controls[:, 0]))
    at_start = np.zeros(len(jumps), bool)
    at_start[n_tau - 1::n_tau] = True
    assert jumps[~at_start].max() <= 2e-3
    assert jumps[at_start].max() > 10 * jumps[~at_start].max()


def test_rhc_envelope_holds():
    # nontrivial K0 (E_T = 0), scalar a = 1
    model, cost = scalar(a=1.0)
    sol = solve_care(model, cost)
    for gap in (1.0, 2.0, 3.0):
        T = gap + 0.25
        assert mpc.mu_Ttau(sol, model, cost, T, 0.25) > 0
        run = mpc.run_rhc(model, cost, mpc.MpcConfig(T, 0.25, 1e-3, 10.0), [1.0])
        env = mpc.rhc_stability_envelope(sol, model, cost, T, 0.25, [1.0], run.times)
        assert np.all(np.abs(run.states[:, 0]) <= env + 1e-6)


def test_rhc_envelope_on_example2(ex2, ex2_sol):
    # the certified rate is negative here; the inequality must still hold
    run = mpc.run_rhc(ex2.model, ex2.cost, mpc.MpcConfig(4.5, 0.5, 1e-3, 20.0), ex2.y0)
    env = mpc.rhc_stability_envelope(ex2_sol, ex2.model, ex2.cost, 4.5, 0.5, ex2.y0, run.times)
    assert np.all(np.linalg.norm(run.states, axis=1) <= env + 1e-6)


@pytest.fixture(scope="module")
def ex2_gap_sweeps(ex2, ex2_sol):
    return {tau: sweep_rhc_horizon(ex2, tau, [0, 1, 2, 3, 4], sol=ex2_sol, parallel=1)
            for tau in (0.5, 0.25)}


def test_control_gap_nonincreasing_in_gap(ex2_gap_sweeps):
    for tab in ex2_gap_sweeps.values():
        g = tab.column("u_gap")
        assert not tab.column("unstable").any()
        assert np.all(np.diff(g) <= 0)


def test_halving_tau_stays_in_fitted_envelope(ex2_gap_sweeps, ex2_sol):
    # envelope C exp(-2 mu (T - tau)) fitted on tau = 1/2; tau = 1/4 must not be
    # visibly different: within a factor 2 of it on the whole grid
    ref, half = ex2_gap_sweeps[0.5], ex2_gap_sweeps[0.25]
    decay = np.exp(-2 * ex2_sol.mu * ref.column("gap"))
    C = np.max(ref.column("u_gap") / decay)
    assert np.all(ref.column("u_gap") <= C * decay * (1 + 1e-12))
    assert np.all(half.column("u_gap") <= 2 * C * decay)


def test_mu_Ttau_scalar_closed_form():
    model, cost = scalar()
    sol = solve_care(model, cost)
    assert mpc._k1(sol, model, cost) == pytest.approx(2.0)
    for gap in (0.1, 0.5, 1.0, 3.0):
        expected = sol.mu - 2 * np.exp(-2 * sol.mu * gap)
        assert mpc.mu_Ttau(sol, model, cost, gap + 0.5, 0.5) == pytest.approx(expected, rel=1e-12)
    # positivity threshold ln(2) / (2 mu) with the fitted mu = 0.99
    g0 = np.log(2 / sol.mu) / (2 * sol.mu)
    assert mpc.mu_Ttau(sol, model, cost, g0 + 1e-6, 0.0) > 0 > mpc.mu_Ttau(sol, model, cost, g0 - 1e-6, 0.0)
    assert mpc.mu_Ttau(sol, model, cost, 60.0, 0.5) == pytest.approx(sol.mu, rel=1e-12)
    exact = solve_care(model, cost.with_terminal(sol.P))
    assert mpc.mu_Ttau(exact, model, cost, 0.5, 0.5) == exact.mu


def test_mu_LTtau_limits_and_monotonicity(ex2, ex2_sol):
    args = (ex2_sol, ex2.model, ex2.cost)
    assert mpc.mu_LTtau(*args, 4.5, 0.5, 0.0) == mpc.mu_Ttau(*args, 4.5, 0.5)
    K1, K2 = mpc.mpc_constants(*args)
    lim = ex2_sol.mu - K1 * np.exp(-2 * ex2_sol.mu * 4.0) - K2 * 0.3
    assert mpc.mu_LTtau(*args, 4.0 + 1e-9, 1e-9, 0.3) == pytest.approx(lim, abs=1e-8)
    Ls = np.linspace(0, 1, 11)
    taus = np.linspace(0.05, 1, 11)
    vals = np.array([[mpc.mu_LTtau(*args, 4.0 + t, t, L) for t in taus] for L in Ls])
    assert np.all(np.diff(vals, axis=0) < 0)
    assert np.all(np.diff(vals[1:], axis=1) < 0)


def test_traj_error_metrics():
    t = np.linspace(0, 2, 2001)
    a = hz.Trajectory(t, np.zeros((2001, 1)), np.zeros((2000, 1)))
    b = hz.Trajectory(t, np.full((2001, 1), 0.5), np.zeros((2000, 1)))
    assert mpc.traj_error(a, a).total == 0.0
    assert mpc.traj_error(a, b, "L2").state == pytest.approx(0.5 * np.sqrt(2), rel=1e-12)
    s = hz.Trajectory(t, np.sin(3 * t)[:, None], np.zeros((2000, 1)))
    assert mpc.traj_error(a, s).state == np.abs(np.sin(3 * t)).max()
    assert mpc.traj_error(a, b, "terminal").state == 0.5
    with pytest.raises(ValueError):
        mpc.traj_error(a, b, "L1")
    with pytest.raises(PreconditionError):
        mpc.traj_error(a, hz.Trajectory(t + 1, a.states, a.controls))


def test_limit_trajectory_without_disturbance(ex2, ex2_sol, ex2_inf):
    z = mpc.limit_trajectory_zinf(mpc.Plant.from_model(ex2.model), ex2_sol, ex2.y0, 20.0, 1e-3)
    assert np.abs(z.states - ex2_inf.states).max() < 1e-12
    assert np.abs(z.controls - ex2_inf.controls).max() < 1e-12


def test_limit_trajectory_scalar_steady_state():
    model, cost = scalar()
    sol = solve_care(model, cost)
    z = mpc.limit_trajectory_zinf(mpc.Plant.from_model(model, [0.1]), sol, [1.0], 40.0)
    assert z.states[-1, 0] == pytest.approx(0.1, abs=1e-12)
    assert z.controls[-1, 0] == pytest.approx(-0.1, abs=1e-12)
    # the RK4 route for a non-affine plant agrees
    plant = mpc.Plant(lambda y, u: u, 1, 1, [0.1])
    zr = mpc.limit_trajectory_zinf(plant, sol, [1.0], 40.0)
    assert np.abs(zr.states - z.states).max() < 1e-6


def test_scalar_mpc_steady_state_tends_to_limit():
    # a=0, w = 0.1: the window control is open loop along the undisturbed
    # prediction, so the steady state is 0.1 / (1 - tau/2) + O(tau^2)
    model, cost = scalar()
    errs = []
    for tau in (2.0**-4, 2.0**-6, 2.0**-8):
        cfg = mpc.MpcConfig(8.0 + tau, tau, DYADIC_STEP, 20.0)
        run = mpc.run_mpc(mpc.Plant.from_model(model, [0.1]), model, cost, cfg, [1.0])
        errs.append(abs(run.states[-1, 0] - 0.1))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-3
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


def test_iss_bound_holds():
    model, cost = scalar()
    sol = solve_care(model, cost)
    cfg = mpc.MpcConfig(2.25, 0.25, 1e-3, 20.0)
    for a in (0.0, 0.1):
        plant = mpc.Plant.affine([[a]], [[1.0]], [0.1], model)
        assert plant.L == pytest.approx(a)
        assert mpc.mu_LTtau(sol, model, cost, cfg.T, cfg.tau, plant.L) > 0
        run = mpc.run_mpc(plant, model, cost, cfg, [1.0])
        bound = mpc.mpc_stability_bound(sol, model, cost, cfg.T, cfg.tau, plant.L, [1.0], 0.1,
                                        run.times)
        assert np.all(np.abs(run.states[:, 0]) <= bound + 1e-12)
    with pytest.raises(PreconditionError):
        mpc.mpc_stability_bound(sol, model, cost, 0.25, 0.25, 0.0, [1.0], 0.1, [0.0])


def test_rhc_gap_bound_holds_where_certified():
    model, cost = scalar(a=1.0)
    sol = solve_care(model, cost)
    inf = hz.simulate_inf_horizon(model, sol, [1.0], 10.0, 1e-3)
    for gap in (1.0, 3.0):
        assert mpc.mu_Ttau(sol, model, cost, gap + 0.25, 0.25) > 0
        run = mpc.run_rhc(model, cost, mpc.MpcConfig(gap + 0.25, 0.25, 1e-3, 10.0), [1.0])
        bound = mpc.rhc_gap_bound(sol, model, cost, gap + 0.25, 0.25, [1.0], run.times)
        dx = np.abs(run.states[:-1, 0] - inf.states[:-1, 0])
        du = np.abs(run.controls[:, 0] - inf.controls[:, 0])
        assert np.all(dx + du <= bound[:-1] + 1e-6)


def test_nonlinear_plant_rk4():
    model, cost = scalar()
    plant = mpc.Plant(lambda y, u: u - 0.1 * y**3, 1, 1, L=0.3)
    run = mpc.run_mpc(plant, model, cost, mpc.MpcConfig(2.5, 0.5, 1e-3, 10.0), [1.0])
    lin = mpc.run_rhc(model, cost, mpc.MpcConfig(2.5, 0.5, 1e-3, 10.0), [1.0])
    assert abs(run.states[-1, 0]) < 1e-3
    assert 0 < np.abs(run.states - lin.states).max() < 0.05


def test_plant_and_config_validation():
    model, cost = scalar()
    with pytest.raises(PreconditionError):
        mpc.Plant(lambda y, u: y + 1.0, 1, 1)
    with pytest.raises(DimensionError):
        mpc.Plant(lambda y, u: np.zeros(2), 1, 1)
    with pytest.raises(PreconditionError):
        mpc.MpcConfig(1.0, 2.0)
    with pytest.raises(PreconditionError):
        mpc.MpcConfig(1.0, 0.0625, 1e-3)
    with pytest.raises(DimensionError):
        mpc.run_mpc(mpc.Plant.affine(np.eye(2), np.ones((2, 1))), model, cost,
                    mpc.MpcConfig(1.0, 0.5), [1.0])


def test_unstable_configuration_raises():
    # strongly unstable plant, no lookahead beyond a very short window
    model, cost = scalar(a=3.0)
    with pytest.raises(InstabilityError) as exc:
        mpc.run_rhc(model, cost, mpc.MpcConfig(0.05, 0.05, 1e-3, 20.0), [1.0])
    assert exc.value.t_stable > 0
    assert "unstable" in str(exc.value)
