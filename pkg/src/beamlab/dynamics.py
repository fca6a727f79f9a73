"""Method-of-lines beam subsystems and the closed-loop time integrator.

Every subsystem is written as a linear first-order system ``q' = A q + B r``
in the unknowns (boundary slope, interleaved displacement/velocity pairs,
boundary variable eta) and advanced with the implicit midpoint rule.  The
midpoint matrix is banded and factored once per run.

Ghost-node closures
-------------------
* clamped end: ghost ``y[-1] = (1 + kappa) y[1]`` with ``kappa = 2h/(3-h)``;
  this keeps the stiffness symmetric and reproduces the statically loaded
  cantilever exactly (``kappa = 0`` is the plain mirror ghost).
* moment-free end: ghost ``y[N+1] = 2 y[N] - y[N-1]``.
* damper end ``y_xx(0) = c y_xt(0) + gamma y_x(0)``: the ghost is carried as a
  central-difference slope ``s`` with ``c s' = D0 - gamma_eff s``; the slope
  stiffness is ``gamma_eff = gamma / (1 - gamma h^2 / 6)`` so that static
  profiles under a tip load are exact.

The stiffness is assembled as ``D^T W D`` from the second differences ``D``, so
the scheme carries an exact discrete energy (see ``discrete_energy``).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import sparse
from scipy.linalg import lapack

from .core import (
    DampedState,
    DisturbanceSpec,
    Grid,
    Params,
    TipState,
    WState,
    energy_H1,
    energy_H2,
    energy_Hbb,
    make_grid,
    published_disturbance,
    polynomial,
    reconstruct,
    sample,
    trace_second_deriv_at_1,
    trace_third_deriv_at_1,
    THIRD_AT_1,
)


class SimulationError(RuntimeError):
    pass


class SubsystemKind(Enum):
    PlantW = "PlantW"
    ZhatDamped = "ZhatDamped"
    LhatTip = "LhatTip"
    WtildeTip = "WtildeTip"
    PlantAppendixW = "PlantAppendixW"


GRID_DAMPING = 10.0
# full steps replaced by two backward Euler half steps (closed loops only)
STARTUP_STEPS = 2

MODES = ("disturbance_loop", "appendix_loop", "appendix_loop_constant_F", "open_loop")


def clamp_kappa(h):
    return 2.0 * h / (3.0 - h)


def damper_gamma(gamma, h):
    return gamma / (1.0 - gamma * h * h / 6.0)


# ---------------------------------------------------------------- operators


@dataclass
class BeamOperator:
    """Spatial operator of one subsystem on the free nodes ``1..n``.

    ``stiffness`` acts on ``(y_1..y_n[, slope])``; ``mass`` is the lumped mass
    of the free nodes.  ``damper`` holds the boundary coupling row of the
    damper end, which the integrator treats implicitly.
    """

    kind: SubsystemKind
    grid: Grid
    params: Params
    n: int
    left: str
    right: str
    D: np.ndarray
    weights: np.ndarray
    stiffness: np.ndarray
    mass: np.ndarray
    tip_mass: float
    damper: dict | None = None

    @property
    def has_slope(self):
        return self.left == "damper"

    @staticmethod
    def interior_stencil(h):
        return np.array([1.0, -4.0, 6.0, -4.0, 1.0]) / h**4

    def unknowns(self, y_full, slope=0.0):
        u = np.asarray(y_full, dtype=float)[1 : self.n + 1]
        return np.append(u, slope) if self.has_slope else u.copy()

    def fourth_difference(self, y_full, slope=0.0):
        """Elastic force per unit length at the free nodes; interior rows equal the 5-point stencil."""
        return self.stiffness[: self.n] @ self.unknowns(y_full, slope) / self.grid.h

    def second_differences(self, y_full, slope=0.0):
        return self.D @ self.unknowns(y_full, slope)


def assemble_operator(kind, grid: Grid, params: Params, feedback=True, clamp="static") -> BeamOperator:
    if isinstance(kind, str):
        kind = SubsystemKind(kind)
    if not isinstance(kind, SubsystemKind):
        raise ValueError(f"unknown subsystem kind {kind!r}")
    N, h = grid.N, grid.h
    if kind in (SubsystemKind.PlantW, SubsystemKind.PlantAppendixW):
        left, right = "clamped", ("robin" if feedback else "tip")
    elif kind is SubsystemKind.ZhatDamped:
        left, right = "damper", "pinned"
    else:
        left, right = "damper", "tip"
    n = N - 1 if right == "pinned" else N
    ns = 1 if left == "damper" else 0

    D = np.zeros((N, n + ns))
    for j in range(1, N):
        D[j, j - 1] -= 2.0
        if j - 2 >= 0:
            D[j, j - 2] += 1.0
        if j < n:
            D[j, j] += 1.0
    weights = np.full(N, h)
    if left == "clamped":
        if clamp == "static":
            kappa = clamp_kappa(h)
        elif clamp == "mirror":
            kappa = 0.0
        else:
            raise ValueError(f"unknown clamp closure {clamp!r}")
        D[0, 0] = 2.0 + kappa
        weights[0] = h / (2.0 + kappa)
    else:
        D[0, 0] = 2.0
        D[0, n] = -2.0 * h
        weights[0] = h / 2.0
    D /= h * h
    K = D.T @ (weights[:, None] * D)
    damper = None
    if left == "damper":
        g_eff = damper_gamma(params.gamma, h)
        K[n, n] += g_eff
        damper = {"c": params.c, "gamma_eff": g_eff}
    K = 0.5 * (K + K.T)

    tip_mass = 0.0
    if right == "tip":
        tip_mass = params.m
    mass = np.full(n, h)
    if right != "pinned":
        mass[-1] = h / 2.0 + tip_mass
    return BeamOperator(kind, grid, params, n, left, right, D, weights, K, mass, tip_mass, damper)


# ---------------------------------------------------------------- banded midpoint stepper


class BandedLU:
    def __init__(self, a, labels=None):
        rows, cols = np.nonzero(a)
        self.kl = int(max(0, np.max(rows - cols)))
        self.ku = int(max(0, np.max(cols - rows)))
        n = a.shape[0]
        ab = np.zeros((2 * self.kl + self.ku + 1, n))
        ab[self.kl + self.ku + rows - cols, cols] = a[rows, cols]
        self.lu, self.piv, info = lapack.dgbtrf(ab, self.kl, self.ku)
        if info != 0:
            where = labels[info - 1] if labels is not None and info > 0 else info
            raise SimulationError(f"singular midpoint matrix at row {where}")

    def solve(self, b):
        x, info = lapack.dgbtrs(self.lu, self.kl, self.ku, b, self.piv)
        if info != 0:
            raise SimulationError(f"banded solve failed (info={info})")
        return x


class BeamSubsystem:
    """First-order form of a beam operator plus the implicit midpoint stepper.

    Drivers ``r = (tip_force, eta_source)`` enter the tip velocity row and
    the eta row.
    """

    def __init__(self, op: BeamOperator, dt: float, grid_damping: float = 0.0):
        self.op = op
        self.dt = dt
        self.grid_damping = grid_damping
        self.euler_startup = False
        p = op.params
        n = op.n
        self.off = 1 if op.has_slope else 0
        self.iy = self.off + 2 * np.arange(n)
        self.iv = self.iy + 1
        self.has_eta = op.right == "robin"
        self.size = self.off + 2 * n + (1 if self.has_eta else 0)
        self.ieta = self.size - 1 if self.has_eta else None
        ucols = np.append(self.iy, 0) if op.has_slope else self.iy

        A = np.zeros((self.size, self.size))
        A[self.iy, self.iv] = 1.0
        K = op.stiffness
        A[np.ix_(self.iv, ucols)] = -K[:n, :] / op.mass[:, None]
        if grid_damping:
            # filter -sigma (M^-1 K)^2 v: rate ~ (kh)^8, negligible on resolved modes
            sigma = grid_damping * op.grid.h**8
            MK = K[:n, :n] / op.mass[:, None]
            A[np.ix_(self.iv, self.iv)] -= sigma * (MK @ MK)
        if op.has_slope:
            A[0, ucols] = -K[n, :] / p.c
        B = np.zeros((self.size, 2))
        tip_v = self.iv[-1]
        if op.right != "pinned":
            B[tip_v, 0] = 1.0 / op.mass[-1]
        if self.has_eta:
            A[tip_v, tip_v] -= (p.m / p.beta) / op.mass[-1]
            A[tip_v, self.ieta] = 1.0 / op.mass[-1]
            A[self.ieta, tip_v] = (p.m / p.beta - p.alpha) / p.beta
            A[self.ieta, self.ieta] = -1.0 / p.beta
            B[self.ieta, 1] = 1.0 / p.beta
        self.A, self.B = A, B
        labels = self._labels()
        eye = np.eye(self.size)
        self.lu = BandedLU(eye - 0.5 * dt * A, labels)
        self.dtA = sparse.csr_matrix(dt * A)
        self.dtB = dt * B

    def _labels(self):
        labels = [""] * self.size
        if self.op.has_slope:
            labels[0] = "damper slope row (x=0)"
        for j, (a, b) in enumerate(zip(self.iy, self.iv), start=1):
            labels[a] = f"displacement node {j}"
            labels[b] = f"velocity node {j}" + (" (tip row)" if j == self.op.n and self.op.right != "pinned" else "")
        if self.has_eta:
            labels[self.ieta] = "eta boundary row (x=1)"
        return labels

    def _rate(self, q, tip_force, eta_source):
        """dt * (A q + B r)."""
        out = self.dtA @ q
        if tip_force:
            out += self.dtB[:, 0] * tip_force
        if eta_source:
            out += self.dtB[:, 1] * eta_source
        return out

    def step(self, q, tip_force=0.0, eta_source=0.0):
        # increment form of the midpoint rule: (I - dt/2 A) dq = dt (A q + B r);
        # only the residual is fed to the solve, which keeps static states exact
        if self.euler_startup:
            return self._two_euler_halves(q, tip_force, eta_source)
        return q + self.lu.solve(self._rate(q, tip_force, eta_source))

    def _two_euler_halves(self, q, tip_force, eta_source):
        # backward Euler with step dt/2 shares the factored matrix I - (dt/2) A
        half = q + self.lu.solve(0.5 * self._rate(q, tip_force, eta_source))
        return half + self.lu.solve(0.5 * self._rate(half, tip_force, eta_source))

    # packing between node fields and the unknown vector
    def pack(self, y, v, slope=0.0, eta=0.0):
        q = np.zeros(self.size)
        q[self.iy] = np.asarray(y, dtype=float)[1 : self.op.n + 1]
        q[self.iv] = np.asarray(v, dtype=float)[1 : self.op.n + 1]
        if self.op.has_slope:
            q[0] = slope
        if self.has_eta:
            q[self.ieta] = eta
        return q

    def fields(self, q):
        N = self.op.grid.N
        y = np.zeros(N + 1)
        v = np.zeros(N + 1)
        y[1 : self.op.n + 1] = q[self.iy]
        v[1 : self.op.n + 1] = q[self.iv]
        return y, v

    def slope(self, q):
        return float(q[0]) if self.op.has_slope else 0.0

    def eta(self, q):
        return float(q[self.ieta]) if self.has_eta else 0.0

    def tip(self, q):
        """Tip displacement, tip velocity (zero for pinned ends)."""
        if self.op.right == "pinned":
            return 0.0, 0.0
        return float(q[self.iy[-1]]), float(q[self.iv[-1]])

    def third_at_1(self, q):
        """One-sided w_xxx(1) from the last five nodes."""
        N = self.op.grid.N
        vals = np.zeros(5)
        for k in range(5):
            j = N - 4 + k
            if 1 <= j <= self.op.n:
                vals[k] = q[self.iy[j - 1]]
        return float(THIRD_AT_1 @ vals / self.op.grid.h**3)

    def discrete_energy(self, q):
        """Quadratic energy carried by the scheme: stiffness form plus lumped kinetic energy."""
        u = q[self.iy]
        if self.op.has_slope:
            u = np.append(u, q[0])
        v = q[self.iv]
        # sum of squared second differences rather than u^T K u, which cancels badly
        d2 = self.op.D @ u
        pot = np.sum(self.op.weights * d2 * d2)
        if self.op.damper is not None:
            pot += self.op.damper["gamma_eff"] * u[-1] ** 2
        return float(pot + np.sum(self.op.mass * v * v))


# ---------------------------------------------------------------- scenario


def _zero(x):
    return 0.0 * x


DEFAULT_INITIAL = {
    "w": polynomial([0, 0, 1]),
    "w_t": _zero,
    "l": polynomial([0, 0, 0, 1]),
    "l_t": _zero,
    "z": polynomial([0, 2]),
    "z_t": _zero,
    "what": polynomial([0, 0, 0, 1]),
    "what_t": _zero,
}


@dataclass
class Scenario:
    params: Params = field(default_factory=Params)
    grid: Grid = field(default_factory=lambda: make_grid(10))
    dt: float = 1.0 / 2000.0
    T: float = 10.0
    mode: str = "disturbance_loop"
    initial: dict = field(default_factory=dict)
    disturbance: DisturbanceSpec = field(default_factory=published_disturbance)
    stride: int = 1
    snapshot_times: tuple = ()
    grid_damping: float = GRID_DAMPING
    startup_steps: int = STARTUP_STEPS

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.T < 0:
            raise ValueError("T must be nonnegative")
        if self.T > 0 and self.T < self.dt * (1 - 1e-12):
            raise ValueError("T must be at least dt")
        if int(self.stride) < 1:
            raise ValueError("stride must be a positive integer")
        unknown = set(self.initial) - set(DEFAULT_INITIAL)
        if unknown:
            raise ValueError(f"unknown initial profiles {sorted(unknown)}")

    @property
    def steps(self):
        return int(round(self.T / self.dt))

    def profile(self, name):
        return sample(self.initial.get(name, DEFAULT_INITIAL[name]), self.grid)

    def effective_disturbance(self):
        if self.mode == "appendix_loop":
            return DisturbanceSpec()
        return self.disturbance


def published_scenario(N=10, dt=1.0 / 2000.0, T=10.0, **kw) -> Scenario:
    """The published numerical scenario: m=5, c=alpha=1, beta=gamma=2, w=x^2, l=x^3, z=2x."""
    return Scenario(params=Params(5.0, 1.0, 2.0, 1.0, 2.0), grid=make_grid(N), dt=dt, T=T, **kw)


def verification_scenario(**kw) -> Scenario:
    kw.setdefault("N", 64)
    kw.setdefault("dt", 2.5e-4)
    return published_scenario(**kw)


def cantilever_equilibrium(x, F, gamma):
    """Static profiles of plant and estimation error under a constant disturbance."""
    w = (-(x**3) / 6.0 + x**2 / 2.0) * F
    wt = (x**3 / 6.0 - x**2 / 2.0 - x / gamma) * F
    return w, wt


# ---------------------------------------------------------------- signals


def total_disturbance(w_tip, t, spec: DisturbanceSpec) -> float:
    return spec(w_tip, t)


def time_derivative(series, k, dt):
    """d/dt of a sampled trace at level ``k``: BDF2, first-order at startup.

    Returns ``(value, startup)``; level 0 uses the forward difference to level 1.
    """
    if k >= 2:
        return (3.0 * series[k] - 4.0 * series[k - 1] + series[k - 2]) / (2.0 * dt), False
    if k == 1:
        return (series[1] - series[0]) / dt, True
    if len(series) > 1:
        return (series[1] - series[0]) / dt, True
    return 0.0, True


@dataclass
class BoundaryTraces:
    """Per-step scalar traces needed by the control law and the estimator."""

    z_xxx: list = field(default_factory=list)
    z_t: list = field(default_factory=list)
    w_t: list = field(default_factory=list)
    l_minus_z_xxx: list = field(default_factory=list)

    def append(self, z_xxx, z_t, w_t, l_minus_z_xxx):
        self.z_xxx.append(z_xxx)
        self.z_t.append(z_t)
        self.w_t.append(w_t)
        self.l_minus_z_xxx.append(l_minus_z_xxx)


def estimate_disturbance(traces: BoundaryTraces, k, params: Params, dt):
    """F_hat = z_xxx(1) - m z_tt(1), with z_tt(1) differenced from stored z_t(1)."""
    ztt, startup = time_derivative(traces.z_t, k, dt)
    return traces.z_xxx[k] - params.m * ztt, startup


def control_input(traces: BoundaryTraces, k, params: Params, dt):
    """Estimator-based control law evaluated from reconstructed l and z traces.

    ``w_t`` holds ``l_t(1) - z_t(1)``, which equals the plant tip velocity.
    """
    ztt, s1 = time_derivative(traces.z_t, k, dt)
    dlz, s2 = time_derivative(traces.l_minus_z_xxx, k, dt)
    u = -traces.z_xxx[k] + params.m * ztt - params.alpha * traces.w_t[k] + params.beta * dlz
    return u, s1 or s2


# ---------------------------------------------------------------- closed loop


@dataclass
class TraceRow:
    t: float
    E_w: float
    E_lhat: float
    E_zhat: float
    eta: float
    phi_vel: float
    phi_pos: float
    u: float
    F: float
    F_hat: float
    wt1: float
    res_z1: float
    res_moment: float
    startup: bool = False
    zhat_xxx1: float = float("nan")
    E_discrete: float = float("nan")


CSV_COLUMNS = ("t", "E_w", "E_lhat", "E_zhat", "eta", "phi_vel", "phi_pos", "u", "F", "F_hat", "wt1", "res_z1", "res_moment")


@dataclass
class ClosedLoopState:
    """Transformed state plus cached reconstructions.

    In the appendix modes ``lhat`` carries the estimation error w~ and
    ``zhat`` is ``None``.
    """

    t: float
    w: WState
    zhat: DampedState | None
    lhat: TipState
    l: np.ndarray | None = None
    z: np.ndarray | None = None
    u: float = float("nan")
    F: float = float("nan")
    F_hat: float = float("nan")
    phi: float = float("nan")
    k: int = 0
    traces: BoundaryTraces = field(default_factory=BoundaryTraces, repr=False)
    forces: list = field(default_factory=list, repr=False)


@dataclass
class RunResult:
    rows: list
    state: ClosedLoopState
    snapshots: dict
    scenario: Scenario

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def t(self):
        return self.column("t")

    def appendix_energy(self):
        """Squared norm of the appendix closed-loop state: plant part with the
        eta weight beta^2/(m + alpha beta), plus the H2 energy of the error w~."""
        p = self.scenario.params
        plant = self.column("E_w") - p.m * self.column("wt1") ** 2
        weight = p.beta**2 / (p.m + p.alpha * p.beta)
        return plant + weight * self.column("eta") ** 2 + self.column("E_lhat")


class ClosedLoop:
    """Owns the factored subsystems of one scenario and advances the coupled state."""

    def __init__(self, sc: Scenario):
        self.sc = sc
        g, p, dt = sc.grid, sc.params, sc.dt
        self.dist = sc.effective_disturbance()
        self.appendix = sc.mode.startswith("appendix")
        self.open = sc.mode == "open_loop"
        gd = sc.grid_damping
        if self.open:
            self.W = BeamSubsystem(assemble_operator(SubsystemKind.PlantW, g, p, feedback=False), dt)
            self.Z = self.L = None
        elif self.appendix:
            self.W = BeamSubsystem(assemble_operator(SubsystemKind.PlantAppendixW, g, p), dt, gd)
            self.L = BeamSubsystem(assemble_operator(SubsystemKind.WtildeTip, g, p), dt, gd)
            self.Z = None
        else:
            self.W = BeamSubsystem(assemble_operator(SubsystemKind.PlantW, g, p), dt, gd)
            self.Z = BeamSubsystem(assemble_operator(SubsystemKind.ZhatDamped, g, p), dt, gd)
            self.L = BeamSubsystem(assemble_operator(SubsystemKind.LhatTip, g, p), dt, gd)

    # -------------------------------------------------------- initial data
    def initial_vectors(self):
        sc, g, p = self.sc, self.sc.grid, self.sc.params
        x = g.x
        w, wt = sc.profile("w"), sc.profile("w_t")
        w[0] = wt[0] = 0.0
        if self.open:
            return {"w": self.W.pack(w, wt)}
        if self.appendix:
            what, what_t = sc.profile("what"), sc.profile("what_t")
            e, et = what - w, what_t - wt
            e[0] = et[0] = 0.0
            eta = -trace_third_deriv_at_1(w, g) - trace_third_deriv_at_1(e, g) + p.m / p.beta * wt[-1]
            return {"w": self.W.pack(w, wt, eta=eta), "l": self.L.pack(e, et, slope=initial_slope(e, g))}
        l, lt, z, zt = sc.profile("l"), sc.profile("l_t"), sc.profile("z"), sc.profile("z_t")
        lh, lht = l - w, lt - wt
        zh, zht = z - lh, zt - lht
        # z(1) = l(1) - w(1) is a constraint of the observer; move any mismatch
        # into lhat along a linear profile so that z itself is unchanged.
        dz, dzt = zh[-1], zht[-1]
        zh, zht = zh - dz * x, zht - dzt * x
        lh, lht = lh + dz * x, lht + dzt * x
        lh[0] = lht[0] = 0.0
        zh[0] = zh[-1] = zht[0] = zht[-1] = 0.0
        eta = -trace_third_deriv_at_1(w, g) + p.m / p.beta * wt[-1] + trace_third_deriv_at_1(zh, g)
        return {
            "w": self.W.pack(w, wt, eta=eta),
            "z": self.Z.pack(zh, zht, slope=initial_slope(zh, g)),
            "l": self.L.pack(lh, lht, slope=initial_slope(lh, g)),
        }

    # -------------------------------------------------------- one step
    def advance(self, q, t, F_now, k=None):
        """Advance ``q`` (dict of unknown vectors) from ``t`` to ``t + dt``; returns (q_new, F_new).

        ``k`` is the index of the step being taken; the first ``startup_steps``
        of a closed loop use backward Euler halves to damp stiff grid modes
        excited by boundary-incompatible initial data.
        """
        if k is None:
            k = int(round(t / self.sc.dt)) + 1
        startup = (not self.open) and k <= self.sc.startup_steps
        for sub in (self.W, self.Z, self.L):
            if sub is not None:
                sub.euler_startup = startup
        dt, p, dist = self.sc.dt, self.sc.params, self.dist
        t1 = t + dt
        if self.open:
            w1 = self.W.step(q["w"], tip_force=F_now)
            F1 = dist(self.W.tip(w1)[0], t1)
            if dist.depends_on_state:
                w1 = self.W.step(q["w"], tip_force=0.5 * (F_now + F1))
                F1 = dist(self.W.tip(w1)[0], t1)
            elif F1 != F_now:
                w1 = self.W.step(q["w"], tip_force=0.5 * (F_now + F1))
            return {"w": w1}, F1
        if not self.appendix:
            z0 = q["z"]
            z1 = self.Z.step(z0)
            b = 0.5 * (self.Z.third_at_1(z0) + self.Z.third_at_1(z1))
            w1 = self.W.step(q["w"], tip_force=-b)
            # w does not depend on lhat, so the disturbance at the new level is
            # already known and the single correction pass is exact.
            F1 = dist(self.W.tip(w1)[0], t1)
            l1 = self.L.step(q["l"], tip_force=-0.5 * (F_now + F1))
            return {"w": w1, "z": z1, "l": l1}, F1

        def sweep(F_mid, F_new):
            e1 = self.L.step(q["l"], tip_force=-F_mid)
            e0 = q["l"]
            x0, x1 = self.L.third_at_1(e0), self.L.third_at_1(e1)
            v0, v1 = self.L.tip(e0)[1], self.L.tip(e1)[1]
            b = -0.5 * (x0 + x1)
            src = b - p.alpha * 0.5 * (v0 + v1) + F_new
            w1 = self.W.step(q["w"], tip_force=-b, eta_source=src)
            return e1, w1

        if dist.depends_on_state:
            e1, w1 = sweep(F_now, F_now)
            F1 = dist(self.W.tip(w1)[0], t1)
            F_mid = 0.5 * (F_now + F1)
            e1, w1 = sweep(F_mid, F_mid)
            F1 = dist(self.W.tip(w1)[0], t1)
        else:
            F1 = dist(0.0, t1)
            F_mid = 0.5 * (F_now + F1)
            e1, w1 = sweep(F_mid, F_mid)
        return {"w": w1, "l": e1}, F1

    # -------------------------------------------------------- observation
    def fields(self, q):
        """Node fields: plant (w, w_t), and for the loops the estimator fields."""
        w, wt = self.W.fields(q["w"])
        out = {"w": (w, wt)}
        if self.open:
            return out
        lh, lht = self.L.fields(q["l"])
        if self.appendix:
            out["wtilde"] = (lh, lht)
            out["what"] = (lh + w, lht + wt)
            return out
        zh, zht = self.Z.fields(q["z"])
        _, l, z = reconstruct((w, wt), (lh, lht), (zh, zht), self.sc.grid)
        out.update(lhat=(lh, lht), zhat=(zh, zht), l=l, z=z)
        return out

    def boundary_traces(self, q):
        g = self.sc.grid
        f = self.fields(q)
        w, wt = f["w"]
        if self.open:
            return 0.0, 0.0, wt[-1], 0.0
        if self.appendix:
            what, what_t = f["what"]
            return 0.0, what_t[-1], wt[-1], trace_third_deriv_at_1(what, g)
        l, lt = f["l"]
        z, zt = f["z"]
        zx3 = trace_third_deriv_at_1(z, g)
        return zx3, zt[-1], lt[-1] - zt[-1], trace_third_deriv_at_1(l, g) - zx3

    def state(self, q, t, k, traces, F):
        f = self.fields(q)
        w, wt = f["w"]
        wstate = WState(w, wt, self.W.eta(q["w"]))
        if self.open:
            lstate = TipState(np.zeros_like(w), np.zeros_like(w), 0.0)
            return ClosedLoopState(t, wstate, None, lstate, k=k, traces=traces, F=F)
        p = self.sc.params
        lh, lht = f["wtilde"] if self.appendix else f["lhat"]
        lstate = TipState(lh, lht, p.m * lht[-1], self.L.slope(q["l"]))
        if self.appendix:
            return ClosedLoopState(t, wstate, None, lstate, l=f["what"][0], k=k, traces=traces, F=F,
                                   phi=p.m * lht[-1])
        zh, zht = f["zhat"]
        zstate = DampedState(zh, zht, self.Z.slope(q["z"]))
        return ClosedLoopState(t, wstate, zstate, lstate, l=f["l"][0], z=f["z"][0], k=k, traces=traces, F=F,
                               phi=p.m * lht[-1])

    def row(self, q, t, k, traces, F):
        g, p, dt = self.sc.grid, self.sc.params, self.sc.dt
        f = self.fields(q)
        w, wt = f["w"]
        E_w = energy_H1(w, wt, p, g)
        nan = float("nan")
        res_moment = trace_second_deriv_at_1(w, g)
        E_disc = self.W.discrete_energy(q["w"])
        if self.open:
            return TraceRow(t, E_w, nan, nan, nan, nan, nan, 0.0, F, nan, wt[-1], nan, res_moment,
                            False, nan, E_disc)
        eta = self.W.eta(q["w"])
        if self.appendix:
            e, et = f["wtilde"]
            what_t = f["what"][1]
            dx3, startup = time_derivative(traces.l_minus_z_xxx, k, dt)
            u = -p.alpha * what_t[-1] + p.beta * dx3
            return TraceRow(t, E_w, energy_H2(e, et, p.m * et[-1], p, g), nan, eta, p.m * et[-1], p.m * e[-1],
                            u, F, nan, wt[-1], nan, res_moment, startup, nan, E_disc)
        lh, lht = f["lhat"]
        zh, zht = f["zhat"]
        l, z = f["l"][0], f["z"][0]
        u, s1 = control_input(traces, k, p, dt)
        F_hat, s2 = estimate_disturbance(traces, k, p, dt)
        res_z1 = z[-1] - (l[-1] - w[-1])
        return TraceRow(t, E_w, energy_H2(lh, lht, p.m * lht[-1], p, g), energy_Hbb(zh, p, g, v=zht), eta,
                        p.m * lht[-1], p.m * lh[-1], u, F, F_hat, wt[-1], res_z1, res_moment, s1 or s2,
                        trace_third_deriv_at_1(zh, g), E_disc)


def initial_slope(y, grid: Grid) -> float:
    """Central-difference slope at x=0 whose ghost value extends the data as a cubic."""
    return float((-4.0 * y[0] + 7.0 * y[1] - 4.0 * y[2] + y[3]) / (2.0 * grid.h))


def _snapshot_steps(sc: Scenario):
    out = {}
    for ts in sc.snapshot_times:
        k = int(round(float(ts) / sc.dt))
        if 0 <= k <= sc.steps:
            out.setdefault(k, []).append(float(ts))
    return out


def _snapshot(loop: ClosedLoop, q, t, store):
    f = loop.fields(q)
    store[("w", t)] = f["w"][0].copy()
    if loop.appendix:
        store[("what", t)] = f["what"][0].copy()
    elif not loop.open:
        store[("l", t)] = f["l"][0].copy()
        store[("z", t)] = f["z"][0].copy()


def run(sc: Scenario) -> RunResult:
    loop = ClosedLoop(sc)
    q = loop.initial_vectors()
    n = sc.steps
    stride = int(sc.stride)
    snap_steps = _snapshot_steps(sc)
    traces = BoundaryTraces()
    traces.append(*loop.boundary_traces(q))
    F = loop.dist(loop.W.tip(q["w"])[0], 0.0)
    rows, snaps = [], {}
    pending = None  # row 0 needs the first step for its startup difference
    if 0 in snap_steps:
        for ts in snap_steps[0]:
            _snapshot(loop, q, ts, snaps)
    q0, F0 = q, F
    for k in range(1, n + 1):
        try:
            q, F = loop.advance(q, (k - 1) * sc.dt, F, k)
        except SimulationError:
            raise
        except (FloatingPointError, np.linalg.LinAlgError) as exc:  # pragma: no cover
            raise SimulationError(f"step {k} failed: {exc}") from exc
        traces.append(*loop.boundary_traces(q))
        if k == 1:
            rows.append(loop.row(q0, 0.0, 0, traces, F0))
        if k % stride == 0 or k == n:
            row = loop.row(q, k * sc.dt, k, traces, F)
            if not np.isfinite(row.E_w):
                raise SimulationError(f"non-finite energy at step {k}")
            rows.append(row)
        if k in snap_steps:
            for ts in snap_steps[k]:
                _snapshot(loop, q, ts, snaps)
    if n == 0:
        rows.append(loop.row(q0, 0.0, 0, traces, F0))
    state = loop.state(q, n * sc.dt, n, traces, F)
    return RunResult(rows, state, snaps, sc)


def step(state: ClosedLoopState, sc: Scenario) -> ClosedLoopState:
    """Advance a closed-loop state by one time step of the scenario."""
    loop = ClosedLoop(sc)
    q = {"w": loop.W.pack(state.w.y, state.w.v, eta=state.w.eta)}
    if not loop.open:
        q["l"] = loop.L.pack(state.lhat.y, state.lhat.v, slope=state.lhat.slope)
    if state.zhat is not None and loop.Z is not None:
        q["z"] = loop.Z.pack(state.zhat.y, state.zhat.v, slope=state.zhat.slope)
    F = state.F if np.isfinite(state.F) else loop.dist(state.w.y[-1], state.t)
    traces = replace(state.traces, z_xxx=list(state.traces.z_xxx), z_t=list(state.traces.z_t),
                     w_t=list(state.traces.w_t), l_minus_z_xxx=list(state.traces.l_minus_z_xxx))
    if not traces.z_t:
        traces.append(*loop.boundary_traces(q))
    q1, F1 = loop.advance(q, state.t, F, state.k + 1)
    traces.append(*loop.boundary_traces(q1))
    new = loop.state(q1, state.t + sc.dt, state.k + 1, traces, F1)
    k = len(traces.z_t) - 1
    if not loop.open and not loop.appendix:
        new.u, _ = control_input(traces, k, sc.params, sc.dt)
        new.F_hat, _ = estimate_disturbance(traces, k, sc.params, sc.dt)
    return new


def initial_state(sc: Scenario) -> ClosedLoopState:
    loop = ClosedLoop(sc)
    q = loop.initial_vectors()
    traces = BoundaryTraces()
    traces.append(*loop.boundary_traces(q))
    return loop.state(q, 0.0, 0, traces, loop.dist(loop.W.tip(q["w"])[0], 0.0))


def equilibrium_residual(params: Params, grid: Grid, dt: float, F: float = 1.0) -> float:
    """Max change of the unknowns over one step started at the constant-disturbance equilibrium."""
    sc = Scenario(params=params, grid=grid, dt=dt, T=dt, mode="appendix_loop_constant_F",
                  disturbance=DisturbanceSpec(external_kind="constant", constant=F))
    w_star, e_star = cantilever_equilibrium(grid.x, F, params.gamma)
    sc.initial.update(w=w_star, what=w_star + e_star)
    loop = ClosedLoop(sc)
    q = loop.initial_vectors()
    q1, _ = loop.advance(q, 0.0, F, k=sc.startup_steps + 1)
    return max(float(np.max(np.abs(q1[key] - q[key]))) for key in q)
