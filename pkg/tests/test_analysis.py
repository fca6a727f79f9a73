import numpy as np
import pytest

from beamlab.analysis import (
    AnalysisError,
    DecayRegressor,
    VerificationReport,
    boundedness_metric,
    envelope,
    estimator_error_curve,
    fit_decay,
    spectral_cross_check,
)
from beamlab.core import DisturbanceSpec
from beamlab.dynamics import published_scenario, run
from beamlab.spectral import SpectrumEntry, OperatorId

T = np.linspace(0.0, 10.0, 1001)


def test_fit_recovers_exponential():
    fit = fit_decay(T, 3.0 * np.exp(-2.0 * T))
    assert fit.rate == pytest.approx(-2.0, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert fit.amplitude == pytest.approx(3.0, rel=1e-10)
    assert fit.window == (2.0, 10.0)


def test_fit_of_constant_is_flat():
    fit = fit_decay(T, np.full_like(T, 5.0))
    assert fit.rate == 0.0 and fit.r2 == 0.0


def test_fit_drops_underflowed_rows():
    E = np.exp(-40.0 * T)
    fit = fit_decay(T, E, window=(0.0, 0.75))
    assert fit.rate == pytest.approx(-40.0, rel=1e-10)


def test_fit_needs_enough_rows():
    with pytest.raises(AnalysisError):
        fit_decay(T[:5], np.exp(-T[:5]))
    with pytest.raises(AnalysisError):
        fit_decay(T, np.ones(3))


def test_regressor_api():
    reg = DecayRegressor(window=(0.0, 10.0)).fit(T[:, None], np.exp(-0.5 * T))
    assert reg.rate_ == pytest.approx(-0.5)
    np.testing.assert_allclose(reg.predict([[0.0], [2.0]]), [1.0, np.exp(-1.0)], rtol=1e-10)
    assert reg.score(T[:, None], np.exp(-0.5 * T)) == pytest.approx(1.0)
    assert reg.get_params() == {"window": (0.0, 10.0)}


def test_boundedness_verdicts():
    cols = {"osc": np.sin(5 * T), "grow": T * np.sin(5 * T), "decay": np.exp(-T) * np.cos(T)}
    out = boundedness_metric(T, cols)
    assert out["osc"].bounded
    assert out["decay"].bounded
    assert not out["grow"].bounded
    assert out["osc"].sup == pytest.approx(1.0, abs=1e-3)


def test_envelope_block_maxima():
    tb, vb = envelope(T, np.abs(np.sin(T)), block=np.pi)
    assert np.all(vb[:-1] > 0.99)  # the last block is partial
    assert len(tb) == 4


def test_estimator_curve_only_for_disturbance_loop():
    res = run(published_scenario(T=0.01, mode="appendix_loop"))
    with pytest.raises(AnalysisError):
        estimator_error_curve(res)


def test_estimator_error_zero_without_data():
    zero = lambda x: 0.0 * x
    init = {k: zero for k in ("w", "w_t", "l", "l_t", "z", "z_t")}
    res = run(published_scenario(T=0.2, stride=10, initial=init, disturbance=DisturbanceSpec()))
    curve = estimator_error_curve(res, window=(0.0, 0.2), block=0.01)
    assert np.all(curve.error == 0.0)
    assert curve.fit is None


def _entry(lam):
    return SpectrumEntry(OperatorId.A2Op, 1, 0j, lam, 0.0, 0j, 0.0, 0.0, 0.0, 1)


def test_spectral_cross_check():
    fit = fit_decay(T, np.exp(-4.0 * T))
    ok = spectral_cross_check(fit, [_entry(-2.0 + 5j), _entry(-3.0 + 1j)])
    assert ok.agrees and ok.ratio == pytest.approx(1.0)
    bad = spectral_cross_check(fit, [_entry(-0.1 + 1j)])
    assert not bad.agrees
    with pytest.raises(AnalysisError):
        spectral_cross_check(fit)


def test_report_text():
    rep = VerificationReport()
    rep.add("a", "C1", True, 1e-12, "<= 1e-10")
    rep.add("b", "C7", False, 0.4, "<= 0.05")
    assert not rep.passed
    assert [c.name for c in rep.failures] == ["b"]
    text = rep.to_text()
    assert text.startswith("verdict = fail\n")
    assert "[a]\ncriterion = C1\nstatus = pass" in text
