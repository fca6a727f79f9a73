"""Verification suites run by ``beamlab verify``.

Each suite appends checks to a :class:`VerificationReport`; check names carry
the acceptance criterion they implement (C1..C8).
"""
from __future__ import annotations

import math
import time

import numpy as np

from .analysis import VerificationReport, boundedness_metric, estimator_error_curve, fit_decay
from .core import DisturbanceSpec, Params, make_grid
from .dynamics import Scenario, cantilever_equilibrium, equilibrium_residual, published_scenario, run
from .spectral import OperatorId, asymptotic_gap, find_roots, normalized_vector

PUBLISHED = Params(5.0, 1.0, 2.0, 1.0, 2.0)
VERIFY_GRID = (64, 2.5e-4)
PRESET_GRID = (10, 1.0 / 2000.0)


def _timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


def _power_fit(n, d):
    """Exponent and the constant max(n * d) of a deviation sequence."""
    n = np.asarray(n, dtype=float)
    d = np.asarray(d, dtype=float)
    slope = float(np.polyfit(np.log(n), np.log(d), 1)[0])
    return slope, float(np.max(n * d))


# ------------------------------------------------------------------ suites


def suite_conservation(rep: VerificationReport):
    N, dt = VERIFY_GRID
    sc = published_scenario(N=N, dt=dt, T=1.0, mode="open_loop", disturbance=DisturbanceSpec(), stride=40)
    res, elapsed = _timed(run, sc)
    E = res.column("E_discrete")
    drift = float(np.max(np.abs(E - E[0])) / E[0])
    rep.add("conservation_drift", "C1", drift <= 1e-10, drift, "<= 1e-10")
    rep.add("conservation_runtime", "C1", elapsed <= 5.0, elapsed, "<= 5 s")


def _damped_checks(rep, op, crit, check_tau):
    entries, elapsed = _timed(find_roots, op, PUBLISHED, 1, 40)
    res = max(e.residual for e in entries)
    rep.add(f"{op.value}_residual", crit, res <= 1e-10, res, "<= 1e-10")
    re_max = max(e.lam.real for e in entries)
    rep.add(f"{op.value}_negative", crit, re_max < 0, re_max, "< 0", source="closed-form")
    cert = all(e.certified for e in entries)
    rep.add(f"{op.value}_certified", crit, cert, sum(e.certified for e in entries), "40 of 40")
    big = [e for e in entries if e.n >= 5]
    n = [e.n for e in big]
    if check_tau:
        worst = max(abs(e.tau - (e.n + 0.25) * math.pi) * e.n for e in big)
        rep.add(f"{op.value}_tau_gap", crit, worst <= 0.5, worst, "n |tau_n - p pi| <= 0.5", source="closed-form")
    expo, C = _power_fit(n, [abs(e.lam.real + 2.0 / PUBLISHED.c) for e in big])
    rep.add(f"{op.value}_re_lambda_C", crit, math.isfinite(C) and expo <= -0.9, C,
            "C = max n |Re lam + 2/c| finite, exponent <= -0.9", source="closed-form", detail=f"exponent={expo:.3f}")
    if op is OperatorId.A2Op:
        im = [abs(e.lam.imag - (((e.n + 0.25) * math.pi) ** 2 + 1.0 / PUBLISHED.m)) for e in big]
        expo, C = _power_fit(n, im)
        rep.add(f"{op.value}_im_lambda_C", crit, math.isfinite(C) and expo <= -0.9, C,
                "C = max n |Im lam - (p pi)^2 - 1/m| finite, exponent <= -0.9", source="closed-form",
                detail=f"exponent={expo:.3f}")
        rep.add(f"{op.value}_runtime", crit, elapsed <= 10.0, elapsed, "<= 10 s")
    else:
        boxes = [e.box_count for e in big]
        rep.add(f"{op.value}_box_counts", crit, all(b == 1 for b in boxes), sum(b == 1 for b in boxes),
                "count 1 in every seed box, n = 5..40")
    return entries


def suite_spectral(rep: VerificationReport):
    _damped_checks(rep, OperatorId.A2Op, "C2", check_tau=True)
    zhat = _damped_checks(rep, OperatorId.ZhatOp, "C3", check_tau=False)
    last = [e for e in zhat if e.n == 40][0]
    nsq = normalized_vector(OperatorId.ZhatOp, last.tau, PUBLISHED).norm_sq()
    rep.add("zhat_norm_40", "C4", abs(nsq - 2.0) <= 0.1, nsq, "|.|^2 within 0.1 of 2", source="closed-form")
    sel = [e for e in zhat if 8 <= e.n <= 40]
    gaps = [asymptotic_gap(OperatorId.ZhatOp, e, PUBLISHED) for e in sel]
    decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
    expo, _ = _power_fit([e.n for e in sel], gaps)
    rep.add("zhat_gap_decreasing", "C4", decreasing, gaps[-1], "strictly decreasing over n = 8..40")
    rep.add("zhat_gap_exponent", "C4", -1.5 <= expo <= -0.5, expo, "in [-1.5, -0.5]", source="closed-form")
    rows = " ".join(f"{e.n}:{g:.3e}" for e, g in zip(sel, gaps))
    rep.checks[-1].detail = f"gaps {rows}"


def appendix_scenario(mode="appendix_loop", F=0.0, N=None, dt=None, T=10.0, stride=40):
    N = N or VERIFY_GRID[0]
    dt = dt or VERIFY_GRID[1]
    dist = DisturbanceSpec(external_kind="constant", constant=F) if mode == "appendix_loop_constant_F" else DisturbanceSpec()
    return Scenario(params=PUBLISHED, grid=make_grid(N), dt=dt, T=T, mode=mode, disturbance=dist, stride=stride)


def suite_decay(rep: VerificationReport):
    res, elapsed = _timed(run, appendix_scenario())
    H = res.appendix_energy()
    fit = fit_decay(res.t, H, (2.0, 10.0))
    rep.add("appendix_rate", "C5", fit.rate < 0 and fit.r2 >= 0.9, fit.rate, "rate < 0 with r2 >= 0.9",
            detail=f"r2={fit.r2:.4f}")
    rep.add("appendix_ratio", "C5", H[-1] <= 1e-2 * H[0], H[-1] / H[0], "E(10) <= 1e-2 E(0)")
    rep.add("appendix_runtime", "C5", elapsed <= 30.0, elapsed, "<= 30 s")

    t_total = 0.0
    for N, dt in (PRESET_GRID, VERIFY_GRID):
        res, el = _timed(run, published_scenario(N=N, dt=dt, T=10.0, stride=int(round(0.01 / dt))))
        t_total += el
        tag = f"N{N}"
        fit = fit_decay(res.t, res.column("E_w"), (2.0, 10.0))
        rep.add(f"loop_{tag}_Ew_decay", "C6", fit.rate < 0 and fit.r2 >= 0.9, fit.rate,
                "rate < 0 with r2 >= 0.9", detail=f"r2={fit.r2:.4f}")
        cols = {k: res.column(k) for k in ("E_lhat", "E_zhat", "u", "phi_vel")}
        for name, b in boundedness_metric(res.t, cols).items():
            rep.add(f"loop_{tag}_{name}_bounded", "C6", b.bounded, b.trend, f"tail trend <= {b.threshold:.3e}")
        z1 = float(np.max(np.abs(res.column("res_z1"))))
        rep.add(f"loop_{tag}_z1_invariant", "C6", z1 == 0.0, z1, "== 0 exactly")
    rep.add("loop_runtime", "C6", t_total <= 60.0, t_total, "<= 60 s")

    vals = []
    for N, dt in ((32, 5e-4), (64, 2.5e-4), (128, 1.25e-4)):
        r = run(published_scenario(N=N, dt=dt, T=5.0, stride=int(round(5.0 / dt))))
        vals.append(r.rows[-1].E_w)
    order = math.log2(abs(vals[0] - vals[1]) / abs(vals[1] - vals[2]))
    rep.add("grid_order", "C8", order >= 1.7, order, ">= 1.7", detail="E_w(5) at N = 32, 64, 128")


def suite_estimator(rep: VerificationReport):
    for N, dt in (PRESET_GRID, VERIFY_GRID):
        res = run(published_scenario(N=N, dt=dt, T=10.0, stride=int(round(0.01 / dt))))
        curve = estimator_error_curve(res)
        ratio = curve.ratio
        rep.add(f"estimator_N{N}_rate_ratio", "C6", 0.7 <= ratio <= 1.3, ratio,
                "squared error rate within 30% of observer energy rate on [1, 8]",
                detail=f"error_rate={curve.fit.rate:.4f} observer_rate={curve.zhat_fit.rate:.4f}")


def suite_equilibrium(rep: VerificationReport):
    N, dt = VERIFY_GRID
    g = make_grid(N)
    resid = equilibrium_residual(PUBLISHED, g, dt, F=1.0)
    rep.add("equilibrium_residual", "C7", resid <= 1e-8, resid, "<= 1e-8 per step", source="closed-form")
    res, elapsed = _timed(run, appendix_scenario("appendix_loop_constant_F", F=1.0))
    w_star, _ = cantilever_equilibrium(g.x, 1.0, PUBLISHED.gamma)
    ref = float(np.sqrt(np.trapezoid(w_star**2, g.x)))
    err = float(np.sqrt(np.trapezoid((res.state.w.y - w_star) ** 2, g.x)))
    rep.add("equilibrium_profile_nonzero", "C7", ref > 0, ref, "> 0")
    rep.add("equilibrium_convergence", "C7", err <= 0.05 * ref, err / ref, "<= 0.05 relative L2 at t = 10")
    rep.add("equilibrium_runtime", "C7", elapsed <= 30.0, elapsed, "<= 30 s")


SUITES = {
    "conservation": suite_conservation,
    "spectral": suite_spectral,
    "decay": suite_decay,
    "estimator": suite_estimator,
    "equilibrium": suite_equilibrium,
}


def run_suite(name: str, threads: int = 1) -> VerificationReport:
    if name != "all" and name not in SUITES:
        raise KeyError(name)
    names = list(SUITES) if name == "all" else [name]
    if threads > 1 and len(names) > 1:
        from concurrent.futures import ThreadPoolExecutor

        parts = []
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_single, n) for n in names]
            parts = [f.result() for f in futures]
        rep = VerificationReport()
        for p in parts:
            rep.checks.extend(p.checks)
        return rep
    rep = VerificationReport()
    for n in names:
        SUITES[n](rep)
    return rep


def _single(name):
    rep = VerificationReport()
    SUITES[name](rep)
    return rep
