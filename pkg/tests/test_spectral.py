import math

import numpy as np
import pytest
from scipy.optimize import brentq

from beamlab.core import Params, make_grid
from beamlab.dynamics import BeamSubsystem, SubsystemKind, assemble_operator
from beamlab.spectral import (
    NEWTON_TOL,
    OperatorId,
    OverflowGuardError,
    SpectralError,
    asymptotic_gap,
    char_residual,
    characteristic,
    count_roots_in_box,
    find_roots,
    low_modes,
    newton,
    normalized_vector,
    scaled_eigenfunction,
    seed,
    seed_box,
    spectral_abscissa,
)

P = Params(5.0, 1.0, 2.0, 1.0, 2.0)

# 30-digit roots from an independent mpmath findroot on the unscaled equations
A2_ROOTS = {
    1: 3.8676969843634594 + 0.23596033566438647j,
    3: 10.209350235424302 + 0.097047480931236101j,
}
ZHAT_ROOTS = {
    1: 3.842923789733064 + 0.23867004043611563j,
    3: 10.199632401195077 + 0.097229797837907278j,
}
A2_SLOW_TAU = 0.69205532434011392 + 0.024886911749149376j
J1_FIRST = 3.92660231204791877823853334363


@pytest.fixture(scope="module")
def a2():
    return find_roots(OperatorId.A2Op, P, 1, 40)


@pytest.fixture(scope="module")
def zhat():
    return find_roots(OperatorId.ZhatOp, P, 1, 40)


def test_operator_parsing():
    assert OperatorId.parse("a2") is OperatorId.A2Op
    assert OperatorId.parse("ZhatOp") is OperatorId.ZhatOp
    with pytest.raises(SpectralError):
        OperatorId.parse("b3")


def test_zhat_vanishes_at_origin():
    assert characteristic(OperatorId.ZhatOp, 0.0, P) == 0


def test_ref_j1_root_against_bisection():
    f = lambda t: math.cosh(t) * math.sin(t) - math.sinh(t) * math.cos(t)
    oracle = brentq(f, 3.5, 4.5, xtol=1e-15)
    assert oracle == pytest.approx(J1_FIRST, abs=1e-12)
    assert abs(char_residual(OperatorId.RefJ1, 3.9266023, P)) <= 1e-7
    tau, _, ok = newton(OperatorId.RefJ1, 3.9, P)
    assert ok and abs(tau - oracle) <= 1e-10


def test_zhat_residual_near_asymptote_is_small():
    r = abs(char_residual(OperatorId.ZhatOp, 20.25 * math.pi, P))
    assert r <= 1.0 / 20


@pytest.mark.parametrize("n", [1, 3])
def test_roots_match_high_precision_oracle(a2, zhat, n):
    assert abs(a2[n - 1].tau - A2_ROOTS[n]) <= 1e-10
    assert abs(zhat[n - 1].tau - ZHAT_ROOTS[n]) <= 1e-10


def test_a2_tenth_root_near_seed(a2):
    e = a2[9]
    assert e.n == 10
    assert abs(e.tau - 10.25 * math.pi) <= 0.05
    assert -2.5 < e.lam.real < 0


def test_seed_tracks_asymptote():
    assert seed(OperatorId.ZhatOp, 10, P).real == pytest.approx(10.25 * math.pi)


@pytest.mark.parametrize("op", ["a2", "zhat"])
def test_forty_roots_certified_and_stable(op, a2, zhat):
    entries = a2 if op == "a2" else zhat
    assert [e.n for e in entries] == list(range(1, 41))
    assert all(e.certified and e.converged for e in entries)
    assert max(e.residual for e in entries) <= 1e-10
    assert max(e.lam.real for e in entries) < 0


def test_box_counts():
    assert count_roots_in_box(OperatorId.ZhatOp, P, seed_box(12)) == 1
    wide = (seed_box(12)[0], seed_box(13)[1], -1.0, 1.0)
    assert count_roots_in_box(OperatorId.ZhatOp, P, wide) == 2
    assert count_roots_in_box(OperatorId.ZhatOp, P, (20.0, 20.5, 2.0, 2.5)) == 0


def test_slow_tip_mode_agrees_with_oracle_and_discretization():
    slow = [e for e in low_modes(OperatorId.A2Op, P) if abs(e.tau - A2_SLOW_TAU) < 1e-6]
    assert len(slow) == 1
    lam = slow[0].lam
    sub = BeamSubsystem(assemble_operator(SubsystemKind.WtildeTip, make_grid(128), P), 1e-3)
    ev = np.linalg.eigvals(sub.A)
    nearest = ev[np.argmin(np.abs(ev - lam))]
    assert abs(nearest - lam) <= 1e-4
    assert spectral_abscissa(slow) == pytest.approx(lam.real)


def test_discrete_zhat_spectrum_approaches_roots(zhat):
    sub = BeamSubsystem(assemble_operator(SubsystemKind.ZhatDamped, make_grid(128), P), 1e-3)
    ev = np.linalg.eigvals(sub.A)
    for e in zhat[:3]:
        assert np.min(np.abs(ev - e.lam)) <= 2e-2 * abs(e.lam)


def test_reference_roots_are_undamped():
    for op in (OperatorId.RefJ1, OperatorId.RefJ0):
        entries = find_roots(op, P, 1, 10)
        assert all(abs(e.lam.real) <= 1e-8 for e in entries)


def test_overflow_guard():
    with pytest.raises(OverflowGuardError):
        characteristic(OperatorId.A2Op, 800.0 + 0.1j, P)


def test_conjugate_reflection_symmetry(zhat):
    # real coefficients in lambda: i conj(tau) is also a root
    for e in zhat[:5]:
        t = 1j * np.conj(e.tau)
        scale = (1 + abs(t) ** 2) * math.exp(abs(t))
        assert abs(characteristic(OperatorId.ZhatOp, t, P)) <= 1e-10 * scale


def test_eigenfunction_boundary_values(zhat):
    tau = zhat[4].tau
    for x in (0.0, 1.0):
        assert abs(scaled_eigenfunction(OperatorId.ZhatOp, tau, np.array([x]), P)[0]) <= 1e-9


def test_normalized_norm_tends_to_two(zhat):
    nsq = normalized_vector(OperatorId.ZhatOp, zhat[39].tau, P).norm_sq()
    assert abs(nsq - 2.0) <= 0.1


def test_gap_to_template_shrinks(zhat):
    g10 = asymptotic_gap(OperatorId.ZhatOp, zhat[9], P)
    g20 = asymptotic_gap(OperatorId.ZhatOp, zhat[19], P)
    assert g20 <= 0.7 * g10


def test_newton_tolerance_constant_is_tight():
    assert NEWTON_TOL <= 1e-10


@pytest.mark.parametrize("op", ["zhat", "a2"])
def test_boundary_components_shrink_like_one_over_n(op, a2, zhat):
    entries = a2 if op == "a2" else zhat
    for e in entries[4::5]:
        vec = normalized_vector(op, e.tau, P)
        assert abs(vec.slope) * e.n <= 0.1
        if vec.tip is not None:
            assert abs(vec.tip) * e.n <= 0.5
