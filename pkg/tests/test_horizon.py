import numpy as np
import pytest
from scipy.integrate import quad

from conftest import random_instance, scalar
from riccati_mpc import horizon as hz
from riccati_mpc.errors import DimensionError, PreconditionError
from riccati_mpc.numerics import operator_norm
from riccati_mpc.riccati import LtiModel, solve_care


def _resolved_instances(rng, count, h):
    out = []
    while len(out) < count:
        model, cost, x = random_instance(rng, scale=0.5)
        sol = solve_care(model, cost)
        if h * operator_norm(sol.A_cl) <= 0.2:
            out.append((model, cost, x))
    return out


def test_finite_horizon_matches_direct_transcription():
    rng = np.random.default_rng(21)
    h, T = 1e-2, 1.0
    for model, cost, x in _resolved_instances(rng, 12, h):
        path = hz.horizon_path(model, cost, T, h)
        tr = hz.simulate_finite_horizon(model, cost, path, x, T, h)
        u = hz.direct_transcription_oracle(model, cost, x, T, h)
        assert np.abs(tr.controls - u).max() <= 1e-3 * max(1.0, np.abs(u).max())


def test_oracle_gap_is_second_order():
    model = LtiModel([[0.0, 1.0], [-30.0, -1.0]], [[0.0], [1.0]])
    cost = hz.CostSpec(np.eye(2) * 3, [[0.2]], np.eye(2))
    x = np.array([1.0, -1.0])
    gaps = []
    for h in (1e-2, 5e-3):
        tr = hz.simulate_finite_horizon(model, cost, hz.horizon_path(model, cost, 1.0, h), x, 1.0, h)
        gaps.append(np.abs(tr.controls - hz.direct_transcription_oracle(model, cost, x, 1.0, h)).max())
    assert gaps[0] / gaps[1] == pytest.approx(4.0, rel=0.15)


def test_oracle_solvers_agree():
    rng = np.random.default_rng(1)
    model, cost, x = random_instance(rng, n_max=4)
    a = hz.direct_transcription_oracle(model, cost, x, 0.5, 1e-2)
    b = hz.direct_transcription_oracle(model, cost, x, 0.5, 1e-2, method="gradient")
    assert np.allclose(a, b, atol=1e-9 * max(1, np.abs(a).max()))
    assert np.all(hz.direct_transcription_oracle(model, cost, np.zeros(model.n), 0.5, 1e-2) == 0)


def test_value_function_identity():
    # optimal cost from x1 equals x1^T P(T) x1 / 2
    model, cost = scalar(a=0.5, e=0.3)
    T, h = 2.0, 1e-3
    path = hz.horizon_path(model, cost, T, h)
    tr = hz.simulate_finite_horizon(model, cost, path, [1.3], T, h)
    J = hz.cost_finite(tr, cost)
    assert J == pytest.approx(0.5 * 1.3**2 * path.at(T)[0, 0], rel=1e-6)


def test_bellman_restart():
    # re-solving from the optimal state at t1 reproduces the tail of the trajectory
    rng = np.random.default_rng(3)
    model, cost, x = random_instance(rng, n_max=4, scale=0.5)
    T, t1, h = 2.0, 0.75, 1e-3
    path = hz.horizon_path(model, cost, T, h)
    full = hz.simulate_finite_horizon(model, cost, path, x, T, h)
    k1 = int(round(t1 / h))
    rest = hz.simulate_finite_horizon(model, cost, path, full.states[k1], T - t1, h)
    assert np.abs(rest.states - full.states[k1:]).max() <= 1e-6 * max(1, np.abs(x).max())
    assert np.abs(rest.controls - full.controls[k1:]).max() <= 1e-6 * max(1, np.abs(x).max())


def test_infinite_horizon_cost_is_quadratic_form(ex2, ex2_sol):
    tr = hz.simulate_inf_horizon(ex2.model, ex2_sol, ex2.y0, 40.0, 1e-3)
    J = hz.cost_infinite(tr, ex2.cost, 1e-8, ex2_sol.P)
    # second-order quadrature on the stiff transient: h ||A|| is about 0.4
    assert J.value == pytest.approx(0.5 * ex2.y0 @ ex2_sol.P @ ex2.y0, rel=1e-4)
    with pytest.raises(PreconditionError):
        hz.cost_infinite(tr.window(0.0, 1.0), ex2.cost, 1e-8, ex2_sol.P)


def test_terminal_p_inf_gives_infinite_horizon_control(ex2, ex2_sol):
    cost = ex2.cost.with_terminal(ex2_sol.P)
    T, h = 2.0, 1e-3
    fin = hz.simulate_finite_horizon(ex2.model, cost, hz.horizon_path(ex2.model, cost, T, h),
                                     ex2.y0, T, h)
    inf = hz.simulate_inf_horizon(ex2.model, ex2_sol, ex2.y0, T, h)
    assert np.abs(fin.controls - inf.controls).max() < 1e-10
    assert np.abs(fin.states - inf.states).max() < 1e-10


def test_disturbed_without_disturbance_is_plain_optimum(ex2, ex2_sol):
    a = hz.simulate_inf_horizon(ex2.model, ex2_sol, ex2.y0, 5.0, 1e-3)
    b = hz.disturbed_inf_horizon(ex2.model, ex2.cost, ex2_sol, None, ex2.y0, 5.0, 1e-3)
    assert np.abs(a.states - b.states).max() < 1e-12
    assert np.abs(a.controls - b.controls).max() < 1e-12


def test_disturbed_scalar_steady_state():
    # a = 0: xi = w, the control cancels the disturbance, y -> 0
    model, cost = scalar()
    sol = solve_care(model, cost)
    tr = hz.disturbed_inf_horizon(model, cost, sol, [0.1], [0.5], 30.0, 1e-3)
    assert tr.states[-1, 0] == pytest.approx(0.0, abs=1e-10)
    assert tr.controls[-1, 0] == pytest.approx(-0.1, abs=1e-10)


def test_disturbed_adjoint_against_quadrature():
    model, cost = scalar()
    sol = solve_care(model, cost)
    w = lambda t: np.array([np.sin(t)])
    h, t_max = 1e-3, 8.0
    tr = hz.disturbed_inf_horizon(model, cost, sol, w, [0.5], t_max, h, w_tail=[0.0])
    # with A_inf = -1, P_inf = 1: xi(t) = int_t^tmax e^{-(s-t)} sin(s) ds (tail w = 0)
    for t in (0.0, 1.0, 3.0, 6.0):
        xi, _ = quad(lambda s: np.exp(-(s - t)) * np.sin(s), t, t_max, epsabs=1e-12)
        k = int(round(t / h))
        y_mid = 0.5 * (tr.states[k, 0] + tr.states[k + 1, 0])
        # u = -(P y + xi) at the midpoint
        xi_num = -tr.controls[k, 0] - y_mid
        xi_q, _ = quad(lambda s: np.exp(-(s - t - h / 2)) * np.sin(s), t + h / 2, t_max)
        assert xi_num == pytest.approx(xi_q, abs=1e-6)
        assert abs(xi - xi_q) < 1e-3


def test_disturbed_optimum_beats_frozen_gain():
    # anticipating the disturbance can only lower the cost
    from riccati_mpc.mpc import Plant, limit_trajectory_zinf

    model, cost = scalar(a=0.3)
    sol = solve_care(model, cost)
    w = lambda t: np.array([np.exp(-0.5 * t)])
    h, t_max = 1e-3, 40.0
    opt = hz.disturbed_inf_horizon(model, cost, sol, w, [1.0], t_max, h, w_tail=[0.0])
    frozen = limit_trajectory_zinf(Plant.from_model(model, w), sol, [1.0], t_max, h)
    J_opt = hz.cost_infinite(opt, cost, 1e-8, sol.P).value
    J_frz = hz.cost_infinite(frozen, cost, 1e-8, sol.P).value
    assert J_opt < J_frz


def test_trajectory_validation():
    with pytest.raises(DimensionError):
        hz.Trajectory(np.arange(3.0), np.zeros((3, 1)), np.zeros((3, 1)))
    with pytest.raises(PreconditionError):
        hz.Trajectory(np.array([0.0, 1.0, 1.5]), np.zeros((3, 1)), np.zeros((2, 1)))
    with pytest.raises(PreconditionError):
        hz.finite_horizon_gain(hz.horizon_path(*scalar(), 1.0, 1e-2), 1.0, 1.5)
