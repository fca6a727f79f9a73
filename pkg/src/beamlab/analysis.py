"""Verdicts on simulated traces and computed spectra."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

MIN_ROWS = 10
FLOOR = 1e-14
BOUNDED_FACTOR = 1e-3
ENVELOPE_BLOCK = 0.5


class AnalysisError(ValueError):
    pass


@dataclass
class DecayFit:
    rate: float
    intercept: float
    r2: float
    window: tuple

    @property
    def amplitude(self):
        return math.exp(self.intercept)


def _window(t, window):
    t = np.asarray(t, dtype=float)
    if window is None:
        T = t[-1]
        return (T / 5.0, T)
    return (float(window[0]), float(window[1]))


def fit_decay(t, E, window=None) -> DecayFit:
    """Least-squares fit of ``log E = intercept + rate * t`` on ``window`` (default [T/5, T]).

    Rows where ``E`` has dropped below ``1e-14 * E[0]`` are discarded.
    """
    t = np.asarray(t, dtype=float)
    E = np.asarray(E, dtype=float)
    if t.shape != E.shape or t.size == 0:
        raise AnalysisError("time and value columns must be nonempty and aligned")
    lo, hi = _window(t, window)
    ref = E[0] if E[0] > 0 else np.max(E)
    keep = (t >= lo - 1e-12) & (t <= hi + 1e-12) & (E > FLOOR * ref) & np.isfinite(E)
    if np.count_nonzero(keep) < MIN_ROWS:
        raise AnalysisError(f"only {np.count_nonzero(keep)} usable rows in window [{lo}, {hi}]")
    tt, yy = t[keep], np.log(E[keep])
    A = np.column_stack([np.ones_like(tt), tt])
    (b, a), *_ = np.linalg.lstsq(A, yy, rcond=None)
    resid = yy - (b + a * tt)
    ss_tot = float(np.sum((yy - yy.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    # a flat series has no variance to explain: report zero goodness of fit
    r2 = 0.0 if ss_tot <= 1e-24 * max(1.0, yy.size) else max(0.0, 1.0 - ss_res / ss_tot)
    if ss_tot <= 1e-24 * max(1.0, yy.size):
        a = 0.0
    return DecayFit(float(a), float(b), float(min(r2, 1.0)), (lo, hi))


class DecayRegressor(BaseEstimator, RegressorMixin):
    """Estimator wrapper around :func:`fit_decay`: ``X`` is the time column, ``y`` the energy."""

    def __init__(self, window=None):
        self.window = window

    def fit(self, X, y):
        t = np.asarray(X, dtype=float).reshape(-1)
        self.fit_ = fit_decay(t, y, self.window)
        self.rate_ = self.fit_.rate
        self.intercept_ = self.fit_.intercept
        return self

    def predict(self, X):
        t = np.asarray(X, dtype=float).reshape(-1)
        return np.exp(self.intercept_ + self.rate_ * t)

    def score(self, X, y, sample_weight=None):
        # goodness of fit is judged on the log scale, like the fit itself
        return fit_decay(np.asarray(X, dtype=float).reshape(-1), y, self.window).r2


@dataclass
class Boundedness:
    sup: float
    trend: float
    threshold: float
    bounded: bool


def boundedness_metric(t, columns: dict) -> dict:
    """Per column: sup of |value|, tail-half trend, verdict.

    The trend is the slope of a linear fit to the running supremum of |value|
    over the tail half, so a bounded oscillation whose peaks stop growing has
    zero trend.  A column counts as bounded when the slope is at most
    ``1e-3 * sup / T``.
    """
    t = np.asarray(t, dtype=float)
    if t.size == 0:
        raise AnalysisError("empty trace")
    span = float(t[-1] - t[0]) or 1.0
    tail = t >= t[0] + 0.5 * span
    out = {}
    for name, col in columns.items():
        v = np.maximum.accumulate(np.abs(np.asarray(col, dtype=float)))
        sup = float(v[-1])
        if np.count_nonzero(tail) >= 2:
            slope = float(np.polyfit(t[tail], v[tail], 1)[0])
        else:
            slope = 0.0
        thr = BOUNDED_FACTOR * sup / span
        out[name] = Boundedness(sup, slope, thr, bool(slope <= thr + 1e-300))
    return out


def envelope(t, v, block=ENVELOPE_BLOCK):
    """Block maxima of ``v`` over consecutive time blocks; returns (block times, maxima)."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    edges = np.arange(t[0], t[-1] + block, block)
    tb, vb = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (t >= a) & (t < b)
        if np.any(sel):
            k = np.argmax(v[sel])
            tb.append(t[sel][k])
            vb.append(v[sel][k])
    return np.array(tb), np.array(vb)


@dataclass
class EstimatorCurve:
    t: np.ndarray
    error: np.ndarray
    zhat_xxx1: np.ndarray
    fit: DecayFit | None
    zhat_fit: DecayFit | None = None

    @property
    def ratio(self):
        if self.fit is None or self.zhat_fit is None or self.zhat_fit.rate == 0:
            return float("nan")
        return self.fit.rate / self.zhat_fit.rate


def estimator_error_curve(result, window=(1.0, 8.0), block=ENVELOPE_BLOCK) -> EstimatorCurve:
    """Error column ``|F_hat - F|`` with a decay fit of its squared block envelope.

    The squared envelope is compared with the observer energy, which is also
    quadratic; its fit is attached as ``zhat_fit``.
    """
    if result.scenario.mode != "disturbance_loop":
        raise AnalysisError("estimator error is defined for the disturbance loop only")
    t = result.column("t")
    err = np.abs(result.column("F_hat") - result.column("F"))
    zx = np.abs(result.column("zhat_xxx1"))
    startup = np.array([r.startup for r in result.rows])
    sel = ~startup
    fit = zfit = None
    try:
        tb, eb = envelope(t[sel], err[sel] ** 2, block)
        fit = fit_decay(tb, eb, window)
    except AnalysisError:
        fit = None
    try:
        zfit = fit_decay(t, result.column("E_zhat"), window)
    except AnalysisError:
        zfit = None
    return EstimatorCurve(t, err, zx, fit, zfit)


@dataclass
class CrossCheck:
    fitted_rate: float
    abscissa: float
    ratio: float
    agrees: bool
    candidates_used: int
    note: str = ""


def spectral_cross_check(decay: DecayFit, certified=(), candidates=(), factor=2.0) -> CrossCheck:
    """Compare a fitted energy decay rate with twice the spectral abscissa of the supplied eigenvalues."""
    lams = [e.lam for e in certified] + [e.lam for e in candidates]
    if not lams:
        raise AnalysisError("no eigenvalues supplied")
    absc = max(l.real for l in lams)
    ratio = decay.rate / (2.0 * absc) if absc != 0 else float("inf")
    ok = bool(1.0 / factor <= ratio <= factor)
    note = "includes non-certified candidates" if candidates else ""
    return CrossCheck(decay.rate, absc, ratio, ok, len(candidates), note)


# ------------------------------------------------------------------ reports


@dataclass
class Check:
    name: str
    criterion: str
    passed: bool
    value: float
    threshold: str
    source: str = "numerical"
    detail: str = ""


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)

    def add(self, name, criterion, passed, value, threshold, source="numerical", detail=""):
        self.checks.append(Check(name, criterion, bool(passed), float(value), str(threshold), source, detail))
        return self.checks[-1]

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c.passed]

    def to_text(self):
        lines = [f"verdict = {'pass' if self.passed else 'fail'}", f"checks = {len(self.checks)}",
                 f"failed = {len(self.failures)}"]
        for c in self.checks:
            lines.append("")
            lines.append(f"[{c.name}]")
            lines.append(f"criterion = {c.criterion}")
            lines.append(f"status = {'pass' if c.passed else 'fail'}")
            lines.append(f"value = {c.value:.6e}")
            lines.append(f"threshold = {c.threshold}")
            lines.append(f"source = {c.source}")
            if c.detail:
                lines.append(f"detail = {c.detail}")
        return "\n".join(lines) + "\n"
