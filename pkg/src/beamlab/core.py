"""Domain types, grid, boundary-trace stencils and energy functionals.

Fields are plain float arrays sampled on the nodes ``x_j = j*h``.  Helper
functions validate shapes so that the rest of the package can stay terse.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MIN_RESOLUTION = 8


class ResolutionError(ValueError):
    pass


@dataclass(frozen=True)
class Params:
    """Physical and tuning constants: tip mass and the four gains."""

    m: float = 5.0
    alpha: float = 1.0
    beta: float = 2.0
    c: float = 1.0
    gamma: float = 2.0

    def __post_init__(self):
        for name in ("m", "alpha", "beta", "c", "gamma"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"parameter {name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class Grid:
    N: int
    h: float
    x: np.ndarray = field(repr=False, compare=False)

    @property
    def size(self):
        return self.N + 1


def make_grid(N) -> Grid:
    if int(N) != N:
        raise ResolutionError(f"resolution must be an integer, got {N!r}")
    N = int(N)
    if N < MIN_RESOLUTION:
        raise ResolutionError(f"resolution N={N} is below the minimum {MIN_RESOLUTION}")
    x = np.arange(N + 1, dtype=float) / N
    x[-1] = 1.0
    x.flags.writeable = False
    return Grid(N=N, h=1.0 / N, x=x)


def as_field(values, grid: Grid, name="field") -> np.ndarray:
    """Return ``values`` as a float vector of length N+1, checking finiteness."""
    arr = np.asarray(values, dtype=float)
    if arr.shape != (grid.size,):
        raise ValueError(f"{name} has shape {arr.shape}, expected ({grid.size},)")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def sample(profile, grid: Grid) -> np.ndarray:
    """Sample a callable, a scalar or an array on the grid nodes."""
    if callable(profile):
        out = np.broadcast_to(np.asarray(profile(grid.x), dtype=float), grid.x.shape)
        return np.array(out)
    arr = np.asarray(profile, dtype=float)
    if arr.ndim == 0:
        return np.full(grid.size, float(arr))
    return as_field(arr, grid).copy()


# ---------------------------------------------------------------- states


@dataclass(frozen=True)
class WState:
    """Plant displacement, velocity and the boundary variable eta."""

    y: np.ndarray
    v: np.ndarray
    eta: float = 0.0


@dataclass(frozen=True)
class TipState:
    """Beam with a tip mass; ``slope`` is the damper-end slope carried by the closure."""

    y: np.ndarray
    v: np.ndarray
    p: float
    slope: float = 0.0


@dataclass(frozen=True)
class DampedState:
    y: np.ndarray
    v: np.ndarray
    slope: float = 0.0


# ---------------------------------------------------------------- stencils


def _check_len(f, grid, minimum=4):
    f = np.asarray(f, dtype=float)
    if f.shape != (grid.size,):
        raise ValueError(f"field has shape {f.shape}, expected ({grid.size},)")
    if grid.size < minimum:
        raise ResolutionError("grid too coarse for the one-sided stencil")
    return f


def trace_first_deriv_at_0(f, grid: Grid) -> float:
    f = _check_len(f, grid)
    return float((-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * grid.h))


def trace_second_deriv_at_0(f, grid: Grid) -> float:
    f = _check_len(f, grid)
    return float((2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / grid.h**2)


def trace_second_deriv_at_1(f, grid: Grid) -> float:
    f = _check_len(f, grid)
    return float((2.0 * f[-1] - 5.0 * f[-2] + 4.0 * f[-3] - f[-4]) / grid.h**2)


THIRD_AT_1 = np.array([1.5, -7.0, 12.0, -9.0, 2.5])


def trace_third_deriv_at_1(f, grid: Grid) -> float:
    f = _check_len(f, grid, minimum=5)
    return float(THIRD_AT_1 @ f[-5:] / grid.h**3)


def second_derivative(f, grid: Grid) -> np.ndarray:
    """Node values of f'': central differences inside, one-sided at both ends."""
    f = _check_len(f, grid)
    d2 = np.empty_like(f)
    d2[1:-1] = (f[:-2] - 2.0 * f[1:-1] + f[2:]) / grid.h**2
    d2[0] = trace_second_deriv_at_0(f, grid)
    d2[-1] = trace_second_deriv_at_1(f, grid)
    return d2


def trapezoid(values, grid: Grid) -> float:
    return float(np.trapezoid(values, dx=grid.h))


# ---------------------------------------------------------------- energies


def _bending_kinetic(y, v, grid):
    y = as_field(y, grid, "displacement")
    v = as_field(v, grid, "velocity")
    return trapezoid(second_derivative(y, grid) ** 2, grid) + trapezoid(v**2, grid)


def energy_H1(w, wt, params: Params, grid: Grid) -> float:
    """Plant energy: bending plus kinetic plus the tip-mass term |m w_t(1)|^2 / m."""
    wt = as_field(wt, grid, "velocity")
    eta = params.m * wt[-1]
    return _bending_kinetic(w, wt, grid) + eta**2 / params.m


def energy_H2(y, v, p, params: Params, grid: Grid) -> float:
    """Energy of a damper-end beam with tip mass and tip momentum ``p``."""
    slope = trace_first_deriv_at_0(y, grid)
    return _bending_kinetic(y, v, grid) + params.gamma * slope**2 + float(p) ** 2 / params.m


def energy_Hbb(z, params: Params, grid: Grid, v=None) -> float:
    """Energy of the pinned-pinned damped beam; accepts a state or a displacement plus ``v``."""
    if v is None:
        y, v = z.y, z.v
    else:
        y = z
    slope = trace_first_deriv_at_0(y, grid)
    return _bending_kinetic(y, v, grid) + params.gamma * slope**2


# ---------------------------------------------------------------- variable changes

Pair = tuple  # (displacement, velocity)


def _pair(p, grid, name):
    return as_field(p[0], grid, name), as_field(p[1], grid, name + "_t")


def to_transformed(w: Pair, l: Pair, z: Pair, grid: Grid):
    """Map (w, l, z) to (w, lhat = l - w, zhat = z - l + w), displacement and velocity alike."""
    w, l, z = _pair(w, grid, "w"), _pair(l, grid, "l"), _pair(z, grid, "z")
    lhat = (l[0] - w[0], l[1] - w[1])
    zhat = (z[0] - lhat[0], z[1] - lhat[1])
    return w, lhat, zhat


def reconstruct(w: Pair, lhat: Pair, zhat: Pair, grid: Grid):
    """Inverse of :func:`to_transformed`.

    ``z`` is assembled as ``zhat + (l - w)`` so that, with ``zhat(1) = 0``,
    the identity ``z(1) = l(1) - w(1)`` holds bit for bit.
    """
    w, lhat, zhat = _pair(w, grid, "w"), _pair(lhat, grid, "lhat"), _pair(zhat, grid, "zhat")
    l = (lhat[0] + w[0], lhat[1] + w[1])
    z = (zhat[0] + (l[0] - w[0]), zhat[1] + (l[1] - w[1]))
    return w, l, z


# ---------------------------------------------------------------- disturbances

INTERNAL_KINDS = ("none", "cos_tip", "table")
EXTERNAL_KINDS = ("none", "sinusoid", "constant", "table")


@dataclass(frozen=True)
class DisturbanceSpec:
    """Total disturbance F = v(w(1)) + d(t).

    ``internal_table`` maps tip displacement to v and ``external_table`` maps
    time to d; both are interpolated linearly and held constant outside their range.
    """

    internal_kind: str = "none"
    external_kind: str = "none"
    amplitude: float = 1.0
    frequency: float = 1.0
    constant: float = 0.0
    internal_table: tuple | None = None
    external_table: tuple | None = None

    def __post_init__(self):
        if self.internal_kind not in INTERNAL_KINDS:
            raise ValueError(f"unknown internal disturbance {self.internal_kind!r}")
        if self.external_kind not in EXTERNAL_KINDS:
            raise ValueError(f"unknown external disturbance {self.external_kind!r}")
        if self.internal_kind == "table" and self.internal_table is None:
            raise ValueError("internal table disturbance needs internal_table")
        if self.external_kind == "table" and self.external_table is None:
            raise ValueError("external table disturbance needs external_table")

    @property
    def depends_on_state(self):
        return self.internal_kind != "none"

    def internal(self, w_tip: float) -> float:
        if self.internal_kind == "cos_tip":
            return float(np.cos(w_tip))
        if self.internal_kind == "table":
            xs, vs = self.internal_table
            return float(np.interp(w_tip, xs, vs))
        return 0.0

    def external(self, t: float) -> float:
        kind = self.external_kind
        if kind == "sinusoid":
            return float(self.amplitude * np.sin(self.frequency * t))
        if kind == "constant":
            return float(self.constant)
        if kind == "table":
            ts, ds = self.external_table
            return float(np.interp(t, ts, ds))
        return 0.0

    def __call__(self, w_tip: float, t: float) -> float:
        return self.internal(w_tip) + self.external(t)


def published_disturbance() -> DisturbanceSpec:
    return DisturbanceSpec("cos_tip", "sinusoid", amplitude=1.0, frequency=3.0)


def polynomial(coeffs: Sequence[float]) -> Callable:
    """Profile ``sum(c_k x^k)`` from ascending coefficients."""
    coeffs = [float(c) for c in coeffs]
    return lambda x: np.polynomial.polynomial.polyval(x, coeffs) + 0.0 * x
