import numpy as np
import pytest

from beamlab.core import DisturbanceSpec, Params, make_grid, trace_third_deriv_at_1
from beamlab.dynamics import (
    BandedLU,
    BoundaryTraces,
    BeamOperator,
    SimulationError,
    SubsystemKind,
    assemble_operator,
    cantilever_equilibrium,
    control_input,
    equilibrium_residual,
    estimate_disturbance,
    initial_state,
    published_scenario,
    run,
    step,
    time_derivative,
    total_disturbance,
)

P = Params(5.0, 1.0, 2.0, 1.0, 2.0)


def test_interior_stencil_weights():
    h = 0.1
    np.testing.assert_allclose(BeamOperator.interior_stencil(h) * h**4, [1, -4, 6, -4, 1])


@pytest.mark.parametrize("kind", list(SubsystemKind))
def test_fourth_difference_vanishes_on_cubics_inside(kind):
    g = make_grid(16)
    op = assemble_operator(kind, g, P)
    y = 1.0 + 2 * g.x - g.x**2 + 0.5 * g.x**3
    d4 = op.fourth_difference(y)
    # rows two or more nodes away from either end use the plain five-point stencil
    np.testing.assert_allclose(d4[2:op.n - 3], 0.0, atol=1e-6)


def test_interior_rows_equal_five_point_stencil():
    g = make_grid(16)
    op = assemble_operator(SubsystemKind.PlantW, g, P)
    y = np.sin(3 * g.x) * (g.x > 0)
    stencil = BeamOperator.interior_stencil(g.h)
    direct = np.array([stencil @ y[j - 2:j + 3] for j in range(3, 14)])
    np.testing.assert_allclose(op.fourth_difference(y)[2:13], direct, rtol=1e-10, atol=1e-8)


def test_mirror_clamp_on_parabola_is_second_order():
    for N in (16, 32, 64):
        g = make_grid(N)
        op = assemble_operator(SubsystemKind.PlantW, g, P, clamp="mirror")
        assert abs(op.fourth_difference(g.x**2)[0]) <= 10 * g.h**2


def test_unknown_kind_and_clamp_rejected():
    g = make_grid(10)
    with pytest.raises(ValueError):
        assemble_operator("Wobbly", g, P)
    with pytest.raises(ValueError):
        assemble_operator(SubsystemKind.PlantW, g, P, clamp="glued")


def test_stiffness_symmetric_positive_definite():
    g = make_grid(12)
    for kind in SubsystemKind:
        K = assemble_operator(kind, g, P).stiffness
        np.testing.assert_allclose(K, K.T, atol=0)
        assert np.min(np.linalg.eigvalsh(K)) > 0


def test_banded_lu_matches_dense_solve_and_flags_singular():
    rng = np.random.default_rng(0)
    A = np.diag(rng.uniform(2, 3, 8)) + np.diag(rng.uniform(-1, 1, 7), 1) + np.diag(rng.uniform(-1, 1, 7), -1)
    b = rng.normal(size=8)
    np.testing.assert_allclose(BandedLU(A).solve(b), np.linalg.solve(A, b), rtol=1e-12)
    S = A.copy()
    S[:, 3] = 0.0
    with pytest.raises(SimulationError):
        BandedLU(S)


def test_zero_state_stays_zero():
    zero = lambda x: 0.0 * x
    init = {k: zero for k in ("w", "w_t", "l", "l_t", "z", "z_t")}
    res = run(published_scenario(T=0.05, initial=init, disturbance=DisturbanceSpec()))
    for name in ("E_w", "E_lhat", "E_zhat", "u", "F_hat"):
        assert np.max(np.abs(res.column(name))) == 0.0


def test_zero_horizon_gives_single_initial_row():
    res = run(published_scenario(T=0.0))
    assert len(res.rows) == 1
    assert res.rows[0].t == 0.0
    assert res.rows[0].E_w == pytest.approx(4.0, abs=1e-12)
    assert res.rows[0].F == pytest.approx(np.cos(1.0))


def test_total_disturbance_at_start():
    sc = published_scenario()
    assert total_disturbance(1.0, 0.0, sc.disturbance) == pytest.approx(0.5403023, abs=1e-7)


def test_runs_are_deterministic():
    a = run(published_scenario(T=0.2, stride=10))
    b = run(published_scenario(T=0.2, stride=10))
    for name in ("E_w", "u", "F_hat", "eta"):
        np.testing.assert_array_equal(a.column(name), b.column(name))


def test_observer_invariant_is_exact():
    res = run(published_scenario(T=0.5, stride=25))
    assert np.all(res.column("res_z1") == 0.0)


def test_time_derivative_rules():
    s = [0.0, 1.0, 4.0]
    assert time_derivative(s, 0, 0.5) == (2.0, True)
    assert time_derivative(s, 1, 0.5) == (2.0, True)
    # BDF2 on t^2 sampled at 0, 1, 2 (dt = 1) is exact: 4
    v, startup = time_derivative([0.0, 1.0, 4.0], 2, 1.0)
    assert v == pytest.approx(4.0) and not startup


def test_control_law_static_shear_only():
    tr = BoundaryTraces()
    for _ in range(3):
        tr.append(0.7, 0.0, 0.0, 0.0)
    u, startup = control_input(tr, 2, P, 1e-3)
    assert u == pytest.approx(-0.7) and not startup


def test_estimator_static_value():
    tr = BoundaryTraces()
    for _ in range(3):
        tr.append(1.25, 0.3, 0.0, 0.0)
    F_hat, _ = estimate_disturbance(tr, 2, P, 1e-3)
    assert F_hat == pytest.approx(1.25)


def test_initial_control_from_first_step_traces():
    sc = published_scenario(T=2 * 5e-4, stride=1)
    res = run(sc)
    s0 = initial_state(sc)
    s1 = step(s0, sc)
    g, dt = sc.grid, sc.dt

    def traces(s):
        zt1 = s.zhat.v[-1] + s.lhat.v[-1]
        zx3 = trace_third_deriv_at_1(s.z, g)
        return zx3, zt1, trace_third_deriv_at_1(s.l, g) - zx3

    zx0, zt0, d0 = traces(s0)
    _, zt1, d1 = traces(s1)
    assert abs(zx0) <= 1e-9  # z = 2x has no shear
    u0 = -zx0 + P.m * (zt1 - zt0) / dt - P.alpha * s0.w.v[-1] + P.beta * (d1 - d0) / dt
    assert res.rows[0].u == pytest.approx(u0, rel=1e-9, abs=1e-9)
    assert res.rows[0].startup


def test_eta_consistent_with_initial_data():
    sc = published_scenario(T=0.0)
    s = initial_state(sc)
    g = sc.grid
    expected = -trace_third_deriv_at_1(s.w.y, g) + P.m / P.beta * s.w.v[-1] + trace_third_deriv_at_1(s.zhat.y, g)
    assert s.w.eta == pytest.approx(expected, abs=1e-9)
    assert run(sc).rows[0].eta == pytest.approx(expected, abs=1e-9)


def test_open_loop_conserves_discrete_energy():
    sc = published_scenario(N=32, dt=1e-3, T=0.2, mode="open_loop", disturbance=DisturbanceSpec(), stride=20)
    E = run(sc).column("E_discrete")
    assert np.max(np.abs(E - E[0])) <= 1e-10 * E[0]


def test_cantilever_profile_solves_static_problem():
    F, gamma = 1.0, 2.0
    w = np.polynomial.Polynomial([0, 0, 0.5, -1 / 6]) * F
    x = np.linspace(0, 1, 7)
    np.testing.assert_allclose(cantilever_equilibrium(x, F, gamma)[0], w(x), atol=1e-15)
    assert w.deriv(4)(0.3) == 0.0
    assert w(0) == 0 and w.deriv()(0) == 0 and w.deriv(2)(1) == pytest.approx(0.0)
    assert w.deriv(3)(1) == pytest.approx(-F)


def test_equilibrium_is_discrete_fixed_point():
    assert equilibrium_residual(P, make_grid(32), 5e-4, F=1.0) <= 1e-8


def test_scenario_validation():
    with pytest.raises(ValueError):
        published_scenario(mode="sideways")
    with pytest.raises(ValueError):
        published_scenario(dt=0.0)
    with pytest.raises(ValueError):
        published_scenario(initial={"q": lambda x: x})
