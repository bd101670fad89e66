"""Model predictive contouring control with gate-localized contour weights."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import _ocp
from .dynamics import QuadParams, QuadState
from .track import Track

log = logging.getLogger(__name__)

STATUS_NAMES = {_ocp.STATUS_CONVERGED: "converged", _ocp.STATUS_MAX_ITER: "iteration_limit", _ocp.STATUS_FAILED: "failed"}


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamVector:
    """Tunable MPCC weights: per-gate Gaussian heights/widths plus four scalars.

    Flat layout: ``[h_0, w_0, ..., h_{n-1}, w_{n-1}, q_nom, r_dv, r_df, mu]``.
    """

    heights: np.ndarray
    widths: np.ndarray
    q_nom: float
    r_dv: float
    r_df: float
    mu: float

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float64).ravel()
        w = np.asarray(self.widths, dtype=np.float64).ravel()
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "widths", w)
        if h.shape != w.shape:
            raise ValueError("heights and widths must have one entry per gate")
        if np.any(h < 0):
            raise ValueError("Gaussian heights must be non-negative")
        if np.any(w <= 0):
            raise ValueError("Gaussian widths must be positive")
        if not (self.q_nom > 0 and self.r_dv > 0 and self.r_df > 0):
            raise ValueError("q_nom, r_dv and r_df must be positive")
        if not self.mu >= 0:
            raise ValueError("mu must be non-negative")

    @property
    def n_gates(self) -> int:
        return len(self.heights)

    def to_array(self) -> np.ndarray:
        inter = np.empty(2 * self.n_gates)
        inter[0::2] = self.heights
        inter[1::2] = self.widths
        return np.concatenate([inter, [self.q_nom, self.r_dv, self.r_df, self.mu]])

    @classmethod
    def from_array(cls, a) -> "ParamVector":
        a = np.asarray(a, dtype=np.float64).ravel()
        if len(a) < 6 or len(a) % 2:
            raise ValueError(f"parameter vector length {len(a)} is not 2*n_gates + 4")
        return cls(a[0:-4:2].copy(), a[1:-4:2].copy(), float(a[-4]), float(a[-3]), float(a[-2]), float(a[-1]))

    def scaled(self, c: float) -> "ParamVector":
        return ParamVector(self.heights * c, self.widths, self.q_nom * c, self.r_dv * c, self.r_df * c, self.mu * c)


@dataclass(frozen=True)
class ParamBounds:
    """Search-space box per parameter class."""

    height: tuple[float, float] = (0.0, 5000.0)
    width: tuple[float, float] = (0.05, 5.0)
    q_nom: tuple[float, float] = (0.1, 100.0)
    r_dv: tuple[float, float] = (1e-4, 10.0)
    r_df: tuple[float, float] = (1e-4, 10.0)
    mu: tuple[float, float] = (0.01, 10.0)

    def __post_init__(self):
        floors = {"height": 0.0, "width": 0.0, "q_nom": 0.0, "r_dv": 0.0, "r_df": 0.0, "mu": 0.0}
        strict = {"width", "q_nom", "r_dv", "r_df"}
        for f in fields(self):
            lo, hi = (float(v) for v in getattr(self, f.name))
            object.__setattr__(self, f.name, (lo, hi))
            if not lo < hi:
                raise ValueError(f"bounds.{f.name}: lower bound must be below upper bound")
            if lo < floors[f.name] or (f.name in strict and lo <= 0):
                raise ValueError(f"bounds.{f.name}: lower bound {lo} violates the parameter's domain")

    def arrays(self, n_gates: int):
        lo = np.empty(2 * n_gates + 4)
        hi = np.empty_like(lo)
        lo[0:-4:2], hi[0:-4:2] = self.height
        lo[1:-4:2], hi[1:-4:2] = self.width
        for i, name in enumerate(("q_nom", "r_dv", "r_df", "mu")):
            lo[-4 + i], hi[-4 + i] = getattr(self, name)
        return lo, hi


@dataclass(frozen=True)
class OcpConfig:
    horizon: int = 20
    dt: float = 0.05
    lag_weight: float = 1.0
    rate_weights: tuple[float, float, float] = (0.1, 0.1, 0.1)
    progress_rate_max: float = 15.0
    max_iterations: int = 3
    tolerance: float = 1e-6
    rate_bound_penalty: float = 100.0
    # Levenberg-Marquardt ridge, relative to the largest Hessian diagonal entry
    damping: float = 1e-4
    # None -> taken from the platform parameters
    thrust_bounds: tuple[float, float] | None = None
    body_rate_max: tuple[float, float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "rate_weights", tuple(float(v) for v in self.rate_weights))
        if self.thrust_bounds is not None:
            object.__setattr__(self, "thrust_bounds", tuple(float(v) for v in self.thrust_bounds))
            if not self.thrust_bounds[0] < self.thrust_bounds[1]:
                raise ValueError("ocp.thrust_bounds: lower bound must be below the upper bound")
        if self.body_rate_max is not None:
            object.__setattr__(self, "body_rate_max", tuple(float(v) for v in self.body_rate_max))
            if min(self.body_rate_max) <= 0:
                raise ValueError("ocp.body_rate_max must be positive")
        if self.horizon < 2:
            raise ValueError("ocp.horizon must be at least 2")
        if not self.dt > 0:
            raise ValueError("ocp.dt must be positive")
        if not self.lag_weight > 0:
            raise ValueError("ocp.lag_weight must be positive")
        if len(self.rate_weights) != 3 or min(self.rate_weights) < 0:
            raise ValueError("ocp.rate_weights must be three non-negative numbers")
        if not self.progress_rate_max > 0:
            raise ValueError("ocp.progress_rate_max must be positive")
        if self.max_iterations < 1:
            raise ValueError("ocp.max_iterations must be at least 1")
        if not self.tolerance > 0:
            raise ValueError("ocp.tolerance must be positive")
        if self.rate_bound_penalty < 0:
            raise ValueError("ocp.rate_bound_penalty must be non-negative")
        if self.damping < 0:
            raise ValueError("ocp.damping must be non-negative")

    def kernel_array(self, quad: QuadParams) -> np.ndarray:
        fmin, fmax = self.thrust_bounds or (quad.thrust_min, quad.thrust_max)
        wmax = self.body_rate_max or quad.body_rate_max
        return np.array(
            [
                self.horizon,
                self.dt,
                self.lag_weight,
                *self.rate_weights,
                fmin,
                fmax,
                self.progress_rate_max,
                *wmax,
                self.rate_bound_penalty,
                self.max_iterations,
                self.tolerance,
                self.damping,
            ],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class AugmentedState:
    quad: QuadState
    theta: float = 0.0
    v_theta: float = 0.0


@dataclass(frozen=True)
class OcpSolution:
    thrusts: np.ndarray  # (N, 4)
    progress_rates: np.ndarray  # (N + 1,) v_theta over the horizon
    states: np.ndarray  # (N + 1, 13)
    thetas: np.ndarray  # (N + 1,)
    cost: float
    status: str
    iterations: int
    kkt: float
    merit_trace: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))

    @property
    def progress_increments(self) -> np.ndarray:
        return np.diff(self.progress_rates)

    @property
    def decision_vector(self) -> np.ndarray:
        z = np.empty((len(self.thrusts), 5))
        z[:, :4] = self.thrusts
        z[:, 4] = self.progress_rates[1:]
        return z.ravel()

    def shifted(self) -> np.ndarray:
        """Decision vector moved one stage ahead, last stage repeated."""
        z = self.decision_vector.reshape(-1, 5)
        return np.vstack([z[1:], z[-1:]]).ravel()


# ---------------------------------------------------------------------------
# Cost pieces
# ---------------------------------------------------------------------------


def contour_weight(theta: float, phi: ParamVector, track: Track) -> float:
    """Nominal contour weight plus one Gaussian bump per gate (arc-length wrapped)."""
    q, _ = _ocp.contour_weight(
        float(theta), track.gate_thetas, phi.heights, phi.widths, phi.q_nom, track.path.length, track.path.closed
    )
    return q


def stage_cost(x: AugmentedState, f, f_prev, dv: float, phi: ParamVector, track: Track, config: OcpConfig, quad: QuadParams | None = None) -> float:
    """Cost of one horizon stage.

    ``f``/``f_prev`` are this and the previous stage's rotor thrusts and ``dv``
    the progress-rate increment chosen at this stage (pass zeros for the
    terminal stage).
    """
    quad = quad or QuadParams()
    cfg = config.kernel_array(quad)
    xa = x.quad.as_array()
    r = np.empty(_ocp.NR_STAGE)
    _ocp.stage_residual(
        xa, float(x.theta), track.path.breaks, track.path.coefs, track.path.length, track.path.closed,
        track.gate_thetas, phi.heights, phi.widths, phi.q_nom, cfg, r, np.empty((0, 13)), np.empty(_ocp.NR_STAGE),
    )
    df = np.asarray(f, dtype=np.float64) - np.asarray(f_prev, dtype=np.float64)
    return float(r @ r + phi.r_dv * dv * dv + phi.r_df * (df @ df) - phi.mu * x.v_theta)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


class OcpProblem:
    """Packs a (track, platform, config, weights) instance for the kernels."""

    def __init__(self, track: Track, quad: QuadParams, config: OcpConfig, phi: ParamVector):
        if phi.n_gates != track.n_gates:
            raise ValueError(f"parameter vector has {phi.n_gates} gates, track has {track.n_gates}")
        self.track = track
        self.quad = quad
        self.config = config
        self.phi = phi
        self.model = quad.as_array()
        self.cfg = config.kernel_array(quad)
        self.tail = np.array([phi.q_nom, phi.r_dv, phi.r_df, phi.mu])
        p = track.path
        self._path = (p.breaks, p.coefs, p.length, p.closed)
        self._gates = (track.gate_thetas, phi.heights.copy(), phi.widths.copy())

    @property
    def n_decision(self) -> int:
        return 5 * self.config.horizon

    def with_config(self, **changes) -> "OcpProblem":
        return OcpProblem(self.track, self.quad, replace(self.config, **changes), self.phi)

    def hover_guess(self, v0: float = 0.0) -> np.ndarray:
        z = np.empty((self.config.horizon, 5))
        z[:, :4] = self.quad.hover_thrust
        z[:, 4] = v0
        return z.ravel()

    def bounds(self):
        N = self.config.horizon
        lb = np.tile([self.cfg[6]] * 4 + [0.0], N)
        ub = np.tile([self.cfg[7]] * 4 + [self.cfg[8]], N)
        return lb, ub

    def _args(self, x0, theta0, v0, f_prev):
        return (
            np.asarray(x0, dtype=np.float64), float(theta0), float(v0), np.asarray(f_prev, dtype=np.float64),
            self.model, *self._path, *self._gates, self.tail, self.cfg,
        )

    def cost(self, z, x0, theta0, v0, f_prev) -> float:
        N = self.config.horizon
        xs, th, vs = np.empty((N + 1, 13)), np.empty(N + 1), np.empty(N + 1)
        z = np.asarray(z, dtype=np.float64)
        if not _ocp.simulate(z, np.asarray(x0, dtype=np.float64), float(theta0), float(v0), self.model, self.cfg, xs, th, vs):
            return math.inf
        return float(_ocp.total_cost(z, xs, th, vs, np.asarray(f_prev, dtype=np.float64), *self._path, *self._gates, self.tail, self.cfg))

    def gradient(self, z, x0, theta0, v0, f_prev) -> np.ndarray:
        args = self._args(x0, theta0, v0, f_prev)
        return _ocp.gradient(np.asarray(z, dtype=np.float64), *args)

    def solve(self, x0, theta0, v0, f_prev, z0=None) -> OcpSolution:
        if z0 is None:
            z0 = self.hover_guess(v0)
        x0 = np.asarray(x0, dtype=np.float64)
        if not np.all(np.isfinite(x0)):
            raise ValueError("initial state contains non-finite entries")
        z, xs, th, vs, cost, status, it, kkt, trace = _ocp.solve(np.asarray(z0, dtype=np.float64), *self._args(x0, theta0, v0, f_prev))
        zz = z.reshape(-1, 5)
        return OcpSolution(
            thrusts=zz[:, :4].copy(),
            progress_rates=vs.copy(),
            states=xs.copy(),
            thetas=th.copy(),
            cost=float(cost),
            status=STATUS_NAMES[int(status)],
            iterations=int(it),
            kkt=float(kkt),
            merit_trace=trace[: int(it) + 1].copy(),
        )


def solve_ocp(x0: AugmentedState, warm_start, phi: ParamVector, track: Track, config: OcpConfig,
              quad: QuadParams | None = None, f_prev=None) -> OcpSolution:
    """Solve the contouring OCP from ``x0``.

    ``warm_start`` may be a previous :class:`OcpSolution` (used as is), a raw
    decision vector, or None for a hover cold start.  ``f_prev`` is the last
    applied thrust (defaults to hover).
    """
    quad = quad or QuadParams()
    prob = OcpProblem(track, quad, config, phi)
    if f_prev is None:
        f_prev = np.full(4, quad.hover_thrust)
    if isinstance(warm_start, OcpSolution):
        z0 = warm_start.decision_vector
    elif warm_start is None:
        z0 = None
    else:
        z0 = np.asarray(warm_start, dtype=np.float64)
    return prob.solve(x0.quad.as_array(), x0.theta, x0.v_theta, f_prev, z0)


# ---------------------------------------------------------------------------
# Receding-horizon controller
# ---------------------------------------------------------------------------


class MpccController:
    """Stateful receding-horizon wrapper around the OCP.

    Keeps the progress estimate, the last applied thrusts and the previous
    solution for warm starting.  One instance per rollout; not thread-safe.
    """

    REPROJECT_DISTANCE = 1.0

    def __init__(self, track: Track, quad: QuadParams, config: OcpConfig, phi: ParamVector, verbose: bool = False):
        self.problem = OcpProblem(track, quad, config, phi)
        self.track = track
        self.quad = quad
        self.config = config
        self.verbose = verbose
        self.theta = 0.0
        self.v_theta = 0.0
        self.nearest_theta = 0.0
        self.f_prev = np.full(4, quad.hover_thrust)
        self.solution: OcpSolution | None = None
        self.failures = 0  # consecutive
        self.total_failures = 0
        self.last_fallback = False
        self.diagnostics: list[tuple[int, float, float]] = []

    def hover_thrusts(self) -> np.ndarray:
        return np.full(4, self.quad.hover_thrust)

    def _reproject(self, p, theta_estimate):
        path = self.track.path
        nearest = path.project(p)
        self.nearest_theta = nearest
        drift = path.arc_difference(nearest, theta_estimate)
        if abs(drift) > self.REPROJECT_DISTANCE:
            log.debug("progress estimate drifted %.2f m; re-projecting", drift)
            return theta_estimate + drift
        return theta_estimate

    def step(self, x_measured, theta_estimate: float | None = None) -> np.ndarray:
        x = x_measured.as_array() if isinstance(x_measured, QuadState) else np.asarray(x_measured, dtype=np.float64)
        theta = self.theta if theta_estimate is None else float(theta_estimate)
        theta = self._reproject(x[0:3], theta)
        z0 = self.solution.shifted() if self.solution is not None else self.problem.hover_guess(self.v_theta)
        try:
            sol = self.problem.solve(x, theta, self.v_theta, self.f_prev, z0)
        except ValueError:
            sol = None
        if sol is None or sol.status == "failed" or not np.all(np.isfinite(sol.thrusts)):
            self.failures += 1
            self.total_failures += 1
            self.last_fallback = True
            log.debug("OCP failed; hover fallback (%d in a row)", self.failures)
            f = self.hover_thrusts()
            self.solution = None
            self.theta = theta
            self.f_prev = f
            return f
        self.failures = 0
        self.last_fallback = False
        if self.verbose:
            self.diagnostics.append((sol.iterations, sol.kkt, sol.cost))
        self.solution = sol
        self.theta = float(sol.thetas[1])
        self.v_theta = float(sol.progress_rates[1])
        f = sol.thrusts[0].copy()
        self.f_prev = f
        return f


def control_step(x_measured, theta_estimate, controller: MpccController) -> np.ndarray:
    return controller.step(x_measured, theta_estimate)
