"""The eight acceptance criteria at their stated tolerances, one test each."""
import math
import time

import numpy as np

from beamlab.analysis import boundedness_metric, estimator_error_curve, fit_decay
from beamlab.core import DisturbanceSpec, Params, energy_H1, make_grid
from beamlab.dynamics import Scenario, cantilever_equilibrium, equilibrium_residual, published_scenario, run
from beamlab.spectral import OperatorId, asymptotic_gap, count_roots_in_box, find_roots, normalized_vector, seed_box

P = Params(m=5.0, alpha=1.0, beta=2.0, c=1.0, gamma=2.0)


def timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


def loglog_slope(n, d):
    return float(np.polyfit(np.log(n), np.log(d), 1)[0])


def l2(y, x):
    return float(np.sqrt(np.trapezoid(np.asarray(y) ** 2, x)))


def test_criterion_1_conservation(record_criterion):
    sc = published_scenario(N=64, dt=2.5e-4, T=1.0, mode="open_loop", disturbance=DisturbanceSpec(), stride=40)
    res, elapsed = timed(run, sc)
    E = res.column("E_discrete")
    drift = float(np.max(np.abs(E - E[0])) / E[0])
    ok = drift <= 1e-10 and elapsed <= 5.0
    record_criterion(1, ok, f"drift={drift:.2e} runtime={elapsed:.2f}s")
    assert drift <= 1e-10
    assert elapsed <= 5.0


def damped_checks(op):
    entries, elapsed = timed(find_roots, op, P, 1, 40)
    big = [e for e in entries if e.n >= 5]
    n = np.array([e.n for e in big], dtype=float)
    out = {
        "residual": max(e.residual for e in entries),
        "re_max": max(e.lam.real for e in entries),
        "runtime": elapsed,
        "count": len(entries),
    }
    dev_re = np.array([abs(e.lam.real + 2.0 / P.c) for e in big])
    out["C_re"] = float(np.max(n * dev_re))
    out["trend_re"] = loglog_slope(n, n * dev_re)
    out["tau_gap"] = max(e.n * abs(e.tau - (e.n + 0.25) * math.pi) for e in big)
    if op is OperatorId.A2Op:
        dev_im = np.array([abs(e.lam.imag - (((e.n + 0.25) * math.pi) ** 2 + 1.0 / P.m)) for e in big])
        out["C_im"] = float(np.max(n * dev_im))
        out["trend_im"] = loglog_slope(n, n * dev_im)
    return entries, out


def test_criterion_2_a2_spectrum(record_criterion):
    _, r = damped_checks(OperatorId.A2Op)
    checks = [
        r["count"] == 40,
        r["residual"] <= 1e-10,
        r["re_max"] < 0,
        r["tau_gap"] <= 0.5,
        math.isfinite(r["C_re"]) and r["trend_re"] <= 0.1,
        math.isfinite(r["C_im"]) and r["trend_im"] <= 0.1,
        r["runtime"] <= 10.0,
    ]
    record_criterion(2, all(checks), f"residual={r['residual']:.1e} maxRe={r['re_max']:.3f} "
                     f"n|dtau|={r['tau_gap']:.3f} C_re={r['C_re']:.3f} C_im={r['C_im']:.3f} "
                     f"runtime={r['runtime']:.2f}s")
    assert all(checks), r


def test_criterion_3_zhat_spectrum(record_criterion):
    _, r = damped_checks(OperatorId.ZhatOp)
    boxes = [count_roots_in_box(OperatorId.ZhatOp, P, seed_box(n)) for n in range(5, 41)]
    checks = [
        r["count"] == 40,
        r["residual"] <= 1e-10,
        r["re_max"] < 0,
        math.isfinite(r["C_re"]) and r["trend_re"] <= 0.1,
        all(b == 1 for b in boxes),
    ]
    record_criterion(3, all(checks), f"residual={r['residual']:.1e} maxRe={r['re_max']:.3f} "
                     f"C_re={r['C_re']:.3f} boxes_equal_1={sum(b == 1 for b in boxes)}/36")
    assert all(checks), (r, boxes)


def test_criterion_4_riesz_structure(record_criterion):
    entries = find_roots(OperatorId.ZhatOp, P, 1, 40)
    nsq = normalized_vector(OperatorId.ZhatOp, entries[39].tau, P).norm_sq()
    sel = [e for e in entries if 8 <= e.n <= 40]
    gaps = np.array([asymptotic_gap(OperatorId.ZhatOp, e, P) for e in sel])
    decreasing = bool(np.all(np.diff(gaps) < 0))
    expo = loglog_slope([e.n for e in sel], gaps)
    checks = [abs(nsq - 2.0) <= 0.1, decreasing, -1.5 <= expo <= -0.5]
    record_criterion(4, all(checks), f"norm40^2={nsq:.4f} decreasing={decreasing} exponent={expo:.3f}")
    assert all(checks)


def test_criterion_5_appendix_decay(record_criterion):
    sc = Scenario(params=P, grid=make_grid(64), dt=2.5e-4, T=10.0, mode="appendix_loop",
                  disturbance=DisturbanceSpec(), stride=40)
    res, elapsed = timed(run, sc)
    H = res.appendix_energy()
    fit = fit_decay(res.t, H, (2.0, 10.0))
    ratio = H[-1] / H[0]
    checks = [fit.rate < 0, fit.r2 >= 0.9, ratio <= 1e-2, elapsed <= 30.0]
    record_criterion(5, all(checks), f"rate={fit.rate:.3f} r2={fit.r2:.3f} E10/E0={ratio:.1e} "
                     f"runtime={elapsed:.1f}s")
    assert all(checks)


def test_criterion_6_disturbance_loop(record_criterion):
    failures, notes, total = [], [], 0.0
    for N, dt in ((10, 1.0 / 2000.0), (64, 2.5e-4)):
        res, elapsed = timed(run, published_scenario(N=N, dt=dt, T=10.0, stride=int(round(0.01 / dt))))
        total += elapsed
        fit = fit_decay(res.t, res.column("E_w"), (2.0, 10.0))
        if not (fit.rate < 0 and fit.r2 >= 0.9):
            failures.append(f"N={N} E_w fit")
        cols = {k: res.column(k) for k in ("E_lhat", "E_zhat", "u", "phi_vel")}
        for name, b in boundedness_metric(res.t, cols).items():
            if not b.bounded:
                failures.append(f"N={N} {name} unbounded")
        if np.any(res.column("res_z1") != 0.0):
            failures.append(f"N={N} invariant")
        ratio = estimator_error_curve(res).ratio
        if not 0.7 <= ratio <= 1.3:
            failures.append(f"N={N} estimator rate ratio {ratio:.3f}")
        notes.append(f"N={N}: rate={fit.rate:.3f} r2={fit.r2:.3f} est_ratio={ratio:.3f}")
    if total > 60.0:
        failures.append(f"runtime {total:.1f}s")
    record_criterion(6, not failures, "; ".join(notes) + (f" | failed: {', '.join(failures)}" if failures else ""))
    assert not failures


def test_criterion_7_constant_disturbance(record_criterion):
    g = make_grid(64)
    resid = equilibrium_residual(P, g, 2.5e-4, F=1.0)
    sc = Scenario(params=P, grid=g, dt=2.5e-4, T=10.0, mode="appendix_loop_constant_F",
                  disturbance=DisturbanceSpec(external_kind="constant", constant=1.0), stride=400)
    res, elapsed = timed(run, sc)
    w_star, _ = cantilever_equilibrium(g.x, 1.0, P.gamma)
    ref = l2(w_star, g.x)
    rel = l2(res.state.w.y - w_star, g.x) / ref
    checks = [resid <= 1e-8, ref > 0, rel <= 0.05, elapsed <= 30.0]
    record_criterion(7, all(checks), f"residual={resid:.1e} |w*|={ref:.4f} rel_error={rel:.3f} "
                     f"runtime={elapsed:.1f}s")
    assert resid <= 1e-8
    assert ref > 0
    assert rel <= 0.05
    assert elapsed <= 30.0


def test_criterion_8_grid_convergence(record_criterion):
    vals = []
    for N, dt in ((32, 5e-4), (64, 2.5e-4), (128, 1.25e-4)):
        res = run(published_scenario(N=N, dt=dt, T=5.0, stride=int(round(5.0 / dt))))
        vals.append(res.rows[-1].E_w)
    order = math.log2(abs(vals[0] - vals[1]) / abs(vals[1] - vals[2]))
    record_criterion(8, order >= 1.7, f"order={order:.3f} E_w(5)={vals[0]:.6f},{vals[1]:.6f},{vals[2]:.6f}")
    assert order >= 1.7
