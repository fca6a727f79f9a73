"""Characteristic functions of the beam operators, certified complex roots,
closed-form eigenfunctions and their normalized asymptotic comparison.

Conventions
-----------
Eigenvalues are written ``lam = 1j * tau**2``.  Only the representative with
``Re tau > 0`` and ``Im lam >= 0`` is stored; the conjugate eigenvalue belongs
to the root ``1j * conj(tau)``.

Residuals are reported scaled by ``(1 + |tau|^2) exp(|Re tau|)`` so that the
same threshold works for every mode index.  Newton itself runs on the analytic
function ``exp(-tau) * f(tau)``, which has the same zeros.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import Params

GUARD = 700.0
RESIDUAL_TOL = 1e-10
NEWTON_TOL = 1e-12
STEP_TOL = 1e-13
MAX_NEWTON = 50
DEDUP_TOL = 1e-8
QUAD_POINTS = 2049


class SpectralError(ValueError):
    pass


class OverflowGuardError(SpectralError):
    pass


class ContourError(SpectralError):
    pass


class OperatorId(Enum):
    ZhatOp = "zhat"
    A2Op = "a2"
    RefJ1 = "ref-j1"
    RefJ0 = "ref-j0"
    ClosedLoopCandidate = "closed-loop"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        for op in cls:
            if name in (op.value, op.name):
                return op
        raise SpectralError(f"unknown operator {name!r}")

    @property
    def damped(self):
        return self in (OperatorId.ZhatOp, OperatorId.A2Op)

    @property
    def reference(self):
        return self in (OperatorId.RefJ1, OperatorId.RefJ0)

    @property
    def has_tip(self):
        return self in (OperatorId.A2Op, OperatorId.RefJ0)


@dataclass
class SpectrumEntry:
    op: OperatorId
    n: int
    tau: complex
    lam: complex
    residual: float
    seed: complex
    seed_gap: float
    tau_gap: float
    lambda_gap: float
    newton_iters: int
    converged: bool = True
    certified: bool = False
    box_count: int | None = None
    note: str = ""

    @property
    def re_lambda(self):
        return self.lam.real


# ------------------------------------------------------------------ functions


def _check_guard(tau):
    re = np.abs(np.real(tau))
    if np.any(re > GUARD):
        raise OverflowGuardError(f"|Re tau| = {float(np.max(re)):.1f} exceeds {GUARD}")


def _damper(tau, params):
    return 1j * params.c * tau * tau + params.gamma


def characteristic(op, tau, params: Params | None = None):
    """Unscaled characteristic function; accepts scalars or arrays."""
    op = OperatorId.parse(op)
    params = params or Params()
    tau = np.asarray(tau, dtype=complex)
    _check_guard(tau)
    ch, sh = np.cosh(tau), np.sinh(tau)
    cs, sn = np.cos(tau), np.sin(tau)
    mixed = ch * sn - sh * cs
    m = params.m
    if op is OperatorId.ZhatOp:
        out = _damper(tau, params) * mixed + 2.0 * tau * sn * sh
    elif op is OperatorId.A2Op:
        lhs = 2.0 * m * tau**2 * sh * sn + tau * mixed
        out = lhs - _damper(tau, params) * (1.0 + ch * cs - m * tau * mixed)
    elif op is OperatorId.RefJ1:
        out = mixed
    elif op is OperatorId.RefJ0:
        out = 1.0 + ch * cs - m * tau * mixed
    else:
        out = tau * (1.0 + ch * cs) * (1.0 + 1j * params.beta * tau**2) - (m * tau - 1j * params.alpha) * mixed
    return out[()] if out.ndim == 0 else out


def residual_scale(tau):
    tau = np.asarray(tau, dtype=complex)
    return (1.0 + np.abs(tau) ** 2) * np.exp(np.abs(tau.real))


def char_residual(op, tau, params: Params | None = None):
    """Characteristic function divided by ``(1 + |tau|^2) exp(|Re tau|)``."""
    return characteristic(op, tau, params) / residual_scale(tau)


def _analytic(op, tau, params):
    return characteristic(op, tau, params) * np.exp(-np.asarray(tau, dtype=complex))


def _derivative(fun, z, radius=1e-3, points=8):
    # Cauchy integral on a small circle: exact for polynomials below `points`
    # degree, so the error is O(radius**points) and no cancellation occurs.
    k = np.arange(points)
    w = np.exp(2j * np.pi * k / points)
    vals = fun(z + radius * w)
    return complex(np.sum(vals / w) / (points * radius))


# ------------------------------------------------------------------ asymptotes


def seed(op, n, params: Params | None = None) -> complex:
    op = OperatorId.parse(op)
    params = params or Params()
    p = n + 0.25
    if op is OperatorId.ZhatOp:
        return complex(p * math.pi, 1.0 / (params.c * p * math.pi))
    if op is OperatorId.A2Op:
        return _tau_from_lambda(asymptote_lambda(op, n, params))
    if op is OperatorId.ClosedLoopCandidate:
        return complex((n + 0.5) * math.pi, 0.0)
    return complex(p * math.pi, 0.0)


def asymptote_tau(op, n) -> complex:
    return complex((n + 0.25) * math.pi, 0.0)


def asymptote_lambda(op, n, params: Params | None = None) -> complex:
    op = OperatorId.parse(op)
    params = params or Params()
    pp = ((n + 0.25) * math.pi) ** 2
    if op is OperatorId.ZhatOp:
        return complex(-2.0 / params.c, pp)
    if op is OperatorId.A2Op:
        return complex(-2.0 / params.c, pp + 1.0 / params.m)
    if op.reference:
        return complex(0.0, pp)
    return complex("nan")


def _tau_from_lambda(lam):
    tau = cmath.sqrt(-1j * lam)
    return tau if tau.real >= 0 else -tau


def canonical(tau: complex) -> complex:
    """Representative root with Re tau > 0 and Im lambda >= 0."""
    tau = complex(tau)
    candidates = (tau, -tau, 1j * tau.conjugate(), -1j * tau.conjugate())
    # tau -> i conj(tau) maps lam to conj(lam), so both members of the pair are
    # collected; the sector |arg tau| <= pi/4 holds the Im lam >= 0 member
    for c in candidates:
        if c.real > 0 and abs(c.imag) <= c.real + 1e-14:
            return c
    return tau


# ------------------------------------------------------------------ Newton


def newton(op, z0, params: Params | None = None, max_iter=MAX_NEWTON):
    """Newton iteration on ``exp(-tau) f(tau)``; returns (tau, iterations, converged)."""
    params = params or Params()
    op = OperatorId.parse(op)

    def fun(z):
        return _analytic(op, z, params)

    z = complex(z0)
    for it in range(1, max_iter + 1):
        val = complex(fun(z))
        if abs(char_residual(op, z, params)) <= NEWTON_TOL and it > 1:
            return z, it - 1, True
        d = _derivative(fun, z)
        if d == 0 or not np.isfinite(d):
            return z, it, False
        dz = val / d
        z -= dz
        if abs(dz) < STEP_TOL * max(1.0, abs(z)):
            return z, it, True
    return z, max_iter, abs(char_residual(op, z, params)) <= NEWTON_TOL


# ------------------------------------------------------------------ argument principle


def _edge_winding(fun, a, b, depth=0, fa=None, fb=None):
    fa = fun(a) if fa is None else fa
    fb = fun(b) if fb is None else fb
    step = cmath.phase(fb / fa)
    if abs(step) < math.pi / 8 or depth > 40:
        return step
    mid = 0.5 * (a + b)
    fm = fun(mid)
    return _edge_winding(fun, a, mid, depth + 1, fa, fm) + _edge_winding(fun, mid, b, depth + 1, fm, fb)


def winding_number(op, box, params: Params | None = None, samples=64):
    """Winding number of ``f`` along the boundary of ``box = (re_lo, re_hi, im_lo, im_hi)``.

    Phase increments are summed over a base sampling that is bisected until
    every increment is below pi/8.  Returns the real-valued count.
    """
    params = params or Params()
    op = OperatorId.parse(op)
    x0, x1, y0, y1 = box
    corners = [complex(x0, y0), complex(x1, y0), complex(x1, y1), complex(x0, y1)]

    def fun(z):
        return complex(_analytic(op, z, params))

    total = 0.0
    min_scaled = math.inf
    for a, b in zip(corners, corners[1:] + corners[:1]):
        pts = a + (b - a) * np.linspace(0.0, 1.0, samples + 1)
        vals = _analytic(op, pts, params)
        min_scaled = min(min_scaled, float(np.min(np.abs(char_residual(op, pts, params)))))
        for i in range(samples):
            total += _edge_winding(fun, pts[i], pts[i + 1], 0, vals[i], vals[i + 1])
    return total / (2.0 * math.pi), min_scaled


def count_roots_in_box(op, params: Params | None, box, retries=5, near=1e-6) -> int:
    """Number of roots inside a rectangle of the tau-plane by the argument principle."""
    x0, x1, y0, y1 = box
    for attempt in range(retries + 1):
        jitter = 1e-3 * attempt
        b = (x0 - jitter, x1 + jitter, y0 - jitter, y1 + jitter)
        w, closest = winding_number(op, b, params)
        if closest <= near:
            continue
        k = round(w)
        if abs(w - k) <= 1e-3:
            return int(k)
    raise ContourError(f"contour of box {box} stays too close to a root")


def seed_box(n, half_width=math.pi / 2, half_height=1.0):
    c = (n + 0.25) * math.pi
    return (c - half_width, c + half_width, -half_height, half_height)


# ------------------------------------------------------------------ root finding


def _entry(op, n, tau, sd, iters, ok, params):
    tau = canonical(tau)
    lam = 1j * tau * tau
    res = abs(complex(char_residual(op, tau, params)))
    tau_gap = abs(tau - asymptote_tau(op, n)) if n >= 1 else float("nan")
    lam_gap = abs(lam - asymptote_lambda(op, n, params)) if n >= 1 else float("nan")
    return SpectrumEntry(op, n, tau, lam, res, sd, abs(tau - sd), tau_gap, lam_gap, iters, ok)


def scan_roots(op, params: Params | None = None, re_max=5 * math.pi, im_max=3.0, nx=160, ny=60):
    """Roots from Newton runs seeded at local minima of the scaled residual on a coarse grid."""
    params = params or Params()
    op = OperatorId.parse(op)
    xs = np.linspace(re_max / nx, re_max, nx)
    ys = np.linspace(-im_max, im_max, ny)
    Z = xs[None, :] + 1j * ys[:, None]
    V = np.abs(char_residual(op, Z, params))
    roots = []
    for i in range(1, ny - 1):
        for j in range(1, nx - 1):
            patch = V[i - 1 : i + 2, j - 1 : j + 2]
            if V[i, j] > patch.min():
                continue
            tau, _, ok = newton(op, Z[i, j], params)
            if not ok or abs(tau) < 1e-3:
                continue
            tau = canonical(tau)
            if tau.real > re_max + 1.0:
                continue
            if all(abs(tau - r) > DEDUP_TOL for r in roots):
                roots.append(tau)
    return sorted(roots, key=lambda z: (z.real, z.imag))


def find_roots(op, params: Params | None = None, n_lo=1, n_hi=40, certify=True, low_scan=True):
    """Roots for mode indices ``n_lo..n_hi``.

    Newton starts from the asymptotic seed; for the first few modes, where
    the asymptotes are poor, roots from a coarse residual scan inside the
    seed box take precedence.  A root farther than pi/2 from its seed is
    kept but flagged as rejected.
    """
    params = params or Params()
    op = OperatorId.parse(op)
    if n_lo < 1 or n_hi < n_lo:
        raise SpectralError("need 1 <= n_lo <= n_hi")
    scanned = scan_roots(op, params) if low_scan and n_lo <= 4 else []
    entries = []
    for n in range(n_lo, n_hi + 1):
        sd = seed(op, n, params)
        tau, iters, ok = newton(op, sd, params)
        tau = canonical(tau)
        if n <= 4 and scanned:
            x0, x1, y0, y1 = seed_box(n)
            inside = [r for r in scanned if x0 < r.real < x1 and y0 < r.imag < y1]
            if inside and (not ok or abs(tau - sd) > math.pi / 2):
                tau = min(inside, key=lambda r: abs(r - sd))
                tau, iters, ok = newton(op, tau, params)
        e = _entry(op, n, tau, sd, iters, ok, params)
        if not ok:
            e.note = "not converged"
        elif e.seed_gap > math.pi / 2:
            e.note = "rejected: far from seed"
        entries.append(e)
    _dedupe(entries)
    if certify:
        for e in entries:
            certify_entry(e, params)
    return entries


def _dedupe(entries):
    for i, e in enumerate(entries):
        for prev in entries[:i]:
            if abs(e.tau - prev.tau) <= DEDUP_TOL and not e.note:
                e.note = f"duplicate of n={prev.n}"


def certify_entry(e: SpectrumEntry, params: Params | None = None):
    """Attach the argument-principle count and the certification verdict."""
    if e.op is OperatorId.ClosedLoopCandidate:
        e.certified = False
        if not e.note:
            e.note = "non-certified"
        return e
    try:
        e.box_count = count_roots_in_box(e.op, params, seed_box(e.n))
    except ContourError as exc:
        e.box_count = None
        e.note = e.note or str(exc)
    inside = seed_box(e.n)
    in_box = inside[0] < e.tau.real < inside[1] and inside[2] < e.tau.imag < inside[3]
    e.certified = bool(e.converged and not e.note and e.residual <= RESIDUAL_TOL
                       and e.box_count == 1 and in_box)
    return e


def low_modes(op, params: Params | None = None, n_lo=1):
    """Scan roots lying below the first seed box (not indexed by the asymptotes)."""
    cut = seed_box(n_lo)[0]
    out = []
    for tau in scan_roots(op, params):
        if tau.real < cut:
            out.append(_entry(OperatorId.parse(op), 0, tau, tau, 0, True, params or Params()))
    return out


def spectral_abscissa(entries) -> float:
    vals = [e.lam.real for e in entries if e.converged]
    return max(vals) if vals else float("nan")


# ------------------------------------------------------------------ eigenfunctions

# e^{-tau} f(x) = sum of coefficient * basis; basis kinds:
#   "S": e^{-tau} sinh(tau (x - s)), "C": e^{-tau} cosh(tau (x - s)),
#   "sin": sin(tau (x - s)), "cos": cos(tau (x - s)).


def _hyp(tau, y, kind):
    # e^{-tau} sinh(tau y), e^{-tau} cosh(tau y) for y in [-1, 1] without overflow
    a = np.exp(tau * (y - 1.0))
    b = np.exp(-tau * (y + 1.0))
    return 0.5 * (a - b) if kind == "S" else 0.5 * (a + b)


def _terms(op, tau, params):
    op = OperatorId.parse(op)
    if op is OperatorId.ClosedLoopCandidate:
        raise SpectralError("no closed-form eigenfunction for the closed-loop candidate")
    q = 0.0 if op.reference else 2.0 * tau / _damper(tau, params)
    sn, cs = cmath.sin(tau), cmath.cos(tau)
    em = cmath.exp(-tau)
    S1, C1 = _hyp(tau, 1.0, "S"), _hyp(tau, 1.0, "C")
    if op in (OperatorId.ZhatOp, OperatorId.RefJ1):
        return [
            (1.0, "S", 1.0),
            (sn, "C", 0.0),
            (-cs + q * sn, "S", 0.0),
            (em, "sin", 1.0),
            (S1, "cos", 0.0),
            (-C1 - q * S1, "sin", 0.0),
        ]
    return [
        (-1.0, "S", 1.0),
        (sn, "C", 0.0),
        (-cs + q * sn, "S", 0.0),
        (-(S1 + em * sn), "cos", 0.0),
        (C1 + em * cs + q * S1, "sin", 0.0),
    ]


_DERIV = {"S": ("C", 1.0), "C": ("S", 1.0), "sin": ("cos", 1.0), "cos": ("sin", -1.0)}


def _basis(tau, kind, shift, x):
    y = np.asarray(x, dtype=float) - shift
    if kind in ("S", "C"):
        return _hyp(tau, y, kind)
    return np.sin(tau * y) if kind == "sin" else np.cos(tau * y)


def scaled_eigenfunction(op, tau, x, params: Params | None = None, derivative=0):
    """``exp(-tau) f^{(k)}(x)`` for the closed-form eigenfunction ``f``."""
    params = params or Params()
    _check_guard(tau)
    tau = complex(tau)
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape, dtype=complex)
    for coef, kind, shift in _terms(op, tau, params):
        k, factor = kind, 1.0
        for _ in range(derivative):
            k, sgn = _DERIV[k]
            factor *= sgn * tau
        out += coef * factor * _basis(tau, k, shift, x)
    return out


@dataclass
class NormalizedVector:
    x: np.ndarray
    curvature: np.ndarray  # (2/tau^2) e^{-tau} f''
    velocity: np.ndarray  # (2/tau^2) e^{-tau} lam f
    slope: complex  # (2/tau^2) e^{-tau} gamma f'(0)
    tip: complex | None = None  # (2/tau^2) e^{-tau} m lam f(1)
    scalars: list = field(default_factory=list)

    def norm_sq(self):
        total = np.trapezoid(np.abs(self.curvature) ** 2, self.x) + np.trapezoid(np.abs(self.velocity) ** 2, self.x)
        total += abs(self.slope) ** 2
        if self.tip is not None:
            total += abs(self.tip) ** 2
        return float(total)


def eigenfunction_eval(op, tau, x, params: Params | None = None):
    """Components (f'', lam f, boundary) of the eigenvector, all scaled by 2/(tau^2 e^tau)."""
    vec = normalized_vector(op, tau, params, x=np.atleast_1d(np.asarray(x, dtype=float)))
    return vec.curvature, vec.velocity, vec.slope


def normalized_vector(op, tau, params: Params | None = None, x=None):
    params = params or Params()
    op = OperatorId.parse(op)
    tau = complex(tau)
    if x is None:
        x = np.linspace(0.0, 1.0, QUAD_POINTS)
    lam = 1j * tau * tau
    k = 2.0 / (tau * tau)
    gamma = 0.0 if op.reference else params.gamma
    curv = k * scaled_eigenfunction(op, tau, x, params, derivative=2)
    vel = k * lam * scaled_eigenfunction(op, tau, x, params)
    slope = complex(k * gamma * scaled_eigenfunction(op, tau, np.array([0.0]), params, derivative=1)[0])
    tip = None
    if op.has_tip:
        tip = complex(k * params.m * lam * scaled_eigenfunction(op, tau, np.array([1.0]), params)[0])
    return NormalizedVector(np.asarray(x, dtype=float), curv, vel, slope, tip)


def template(op, n, x):
    """Leading-order asymptote of the normalized eigenvector built from exp(-p pi x), sin, cos."""
    op = OperatorId.parse(op)
    p = (n + 0.25) * math.pi
    e = np.exp(-p * x)
    sc = np.sin(p * x) - np.cos(p * x)
    if op in (OperatorId.ZhatOp, OperatorId.RefJ1):
        return -e + sc, 1j * (-e - sc)
    return e - sc, 1j * (e + sc)


def asymptotic_gap(op, entry: SpectrumEntry, params: Params | None = None) -> float:
    """Distance between the normalized eigenvector and its asymptotic template."""
    vec = normalized_vector(op, entry.tau, params)
    g1, g2 = template(op, entry.n, vec.x)
    total = np.trapezoid(np.abs(vec.curvature - g1) ** 2, vec.x) + np.trapezoid(np.abs(vec.velocity - g2) ** 2, vec.x)
    total += abs(vec.slope) ** 2
    if vec.tip is not None:
        total += abs(vec.tip) ** 2
    return float(math.sqrt(total))
