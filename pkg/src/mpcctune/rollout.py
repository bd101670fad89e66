"""Closed-loop episodes: MPCC controller + simulated plant, lap timing, reward."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .dynamics import NX, QuadParams, normalize_quat, rk4
from .mpcc import MpccController, OcpConfig, ParamVector
from .track import Track, detect_gate_pass, first_crossing

log = logging.getLogger(__name__)

FIDELITIES = ("simple", "perturbed")
RECORD_FIELDS = ("t1", "t2", "n_gp", "n_g", "r_miss", "crash", "timeout", "max_speed", "reward")
MAX_FALLBACKS = 10


@dataclass(frozen=True)
class SimConfig:
    fidelity: str = "simple"
    dt_sim: float = 1e-3
    dt_control: float = 0.05
    timeout: float = 30.0
    pass_threshold: float = 0.5
    laps: int = 2
    # perturbed tier
    drag_scale: float = 1.5
    motor_time_constant: float = 0.02
    noise_accel: float = 0.2
    noise_rate: float = 0.5
    seed: int = 0
    # early termination of hopeless episodes (None disables)
    ground_height: float | None = 0.0
    max_deviation: float | None = 4.0

    def __post_init__(self):
        if self.fidelity not in FIDELITIES:
            raise ValueError(f"sim.fidelity must be one of {FIDELITIES}, got {self.fidelity!r}")
        if not (self.dt_sim > 0 and self.dt_control > 0):
            raise ValueError("sim.dt_sim and sim.dt_control must be positive")
        if self.dt_sim > self.dt_control:
            raise ValueError("sim.dt_sim must not exceed sim.dt_control")
        ratio = self.dt_control / self.dt_sim
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValueError("sim.dt_control must be an integer multiple of sim.dt_sim")
        if not self.timeout > 0:
            raise ValueError("sim.timeout must be positive")
        if not self.pass_threshold > 0:
            raise ValueError("sim.pass_threshold must be positive")
        if int(self.laps) != self.laps or self.laps < 1:
            raise ValueError("sim.laps must be an integer >= 1")
        if self.drag_scale < 0 or self.motor_time_constant < 0:
            raise ValueError("sim.drag_scale and sim.motor_time_constant must be non-negative")
        if self.noise_accel < 0 or self.noise_rate < 0:
            raise ValueError("sim noise standard deviations must be non-negative")
        if self.max_deviation is not None and not self.max_deviation > 0:
            raise ValueError("sim.max_deviation must be positive")

    @property
    def substeps(self) -> int:
        return int(round(self.dt_control / self.dt_sim))

    @property
    def perturbed(self) -> bool:
        return self.fidelity == "perturbed"

    def replace(self, **changes) -> "SimConfig":
        return replace(self, **changes)


@dataclass
class TrajectoryLog:
    """Control-rate samples of one episode."""

    t: list = field(default_factory=list)
    state: list = field(default_factory=list)
    thrust: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    v_theta: list = field(default_factory=list)
    fallback: list = field(default_factory=list)
    # solver diagnostics, only filled in verbose mode
    iterations: list = field(default_factory=list)
    kkt: list = field(default_factory=list)
    cost: list = field(default_factory=list)

    COLUMNS = ("t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz",
               "f1", "f2", "f3", "f4", "theta", "v_theta", "fallback")

    def __len__(self):
        return len(self.t)

    def rows(self):
        for i in range(len(self.t)):
            yield (self.t[i], *self.state[i], *self.thrust[i], self.theta[i], self.v_theta[i], int(self.fallback[i]))

    def positions(self) -> np.ndarray:
        return np.array([s[0:3] for s in self.state]).reshape(-1, 3)


@dataclass
class RolloutResult:
    t1: float = math.inf
    t2: float = math.inf
    n_gp: int = 0
    n_g: int = 0
    r_miss: float = 0.0
    crash: bool = False
    timeout: bool = False
    max_speed: float = 0.0
    crash_reason: str = ""
    sim_time: float = 0.0
    fallbacks: int = 0
    trajectory: TrajectoryLog = field(default_factory=TrajectoryLog, repr=False)

    @property
    def completed(self) -> bool:
        return math.isfinite(self.t1) and math.isfinite(self.t2) and not self.crash

    @property
    def success(self) -> bool:
        """All laps flown, every gate passed, no crash."""
        return self.completed and self.n_gp == self.n_g

    @property
    def lap_time(self) -> float:
        """Mean lap time of a successful episode, inf otherwise."""
        return 0.5 * (self.t1 + self.t2) if self.completed else math.inf

    def record(self, reward: float | None = None) -> dict:
        """Flat record with the fixed field names (reward may be NaN if not given)."""
        return {
            "t1": float(self.t1),
            "t2": float(self.t2),
            "n_gp": int(self.n_gp),
            "n_g": int(self.n_g),
            "r_miss": float(self.r_miss),
            "crash": bool(self.crash),
            "timeout": bool(self.timeout),
            "max_speed": float(self.max_speed),
            "reward": float("nan") if reward is None else float(reward),
        }


# ---------------------------------------------------------------------------
# Reward
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RewardConfig:
    crash_penalty: float = -100.0
    timeout_value: float = 30.0
    pass_bonus_threshold: float = 0.01
    # 2**(10**r_miss) is evaluated with the exponent capped here so the reward
    # stays finite however large r_miss gets
    max_miss_exponent: float = 1000.0

    def __post_init__(self):
        if not self.timeout_value > 0:
            raise ValueError("reward.timeout_value must be positive")
        if self.pass_bonus_threshold < 0:
            raise ValueError("reward.pass_bonus_threshold must be non-negative")
        if not 1.0 <= self.max_miss_exponent <= 1023.0:
            raise ValueError("reward.max_miss_exponent must lie in [1, 1023]")


def miss_term(r_miss: float, cap: float = 1000.0) -> float:
    """2 ** (10 ** r_miss), saturating at 2 ** cap."""
    if r_miss >= math.log10(cap):
        return 2.0 ** cap
    return 2.0 ** (10.0 ** r_miss)


def compute_reward(r: RolloutResult, config: RewardConfig | None = None) -> float:
    cfg = config or RewardConfig()
    t1 = r.t1 if math.isfinite(r.t1) else cfg.timeout_value
    t2 = r.t2 if math.isfinite(r.t2) else cfg.timeout_value
    r_pass = 1.0 if r.r_miss <= cfg.pass_bonus_threshold else 0.0
    frac = r.n_gp / r.n_g if r.n_g > 0 else 0.0
    R = -t1 - 2.0 * t2 - miss_term(r.r_miss, cfg.max_miss_exponent) + r_pass + frac
    if r.crash:
        R += cfg.crash_penalty
    return float(R)


# ---------------------------------------------------------------------------
# Plant
# ---------------------------------------------------------------------------


@njit(cache=True)
def plant_block(x, f_act, f_cmd, model, drag_scale, dt, lag, noise, sig_v, sig_w, pos):
    """Integrate len(pos)-1 plant steps under a held thrust command.

    x and f_act are updated in place; lag is the per-step first-order motor
    gain in (0, 1] (1 = no lag); noise is (steps, 6) unit normals scaled by
    sig_v, sig_w into velocity and body-rate increments.  pos[i] receives the
    position after i steps.  Returns (finite, max_speed).
    """
    out = np.empty(NX)
    n = pos.shape[0] - 1
    vmax = 0.0
    for i in range(3):
        pos[0, i] = x[i]
    for k in range(n):
        for i in range(4):
            f_act[i] += lag * (f_cmd[i] - f_act[i])
        rk4(x, f_act, model, drag_scale, dt, out)
        for i in range(3):
            out[7 + i] += sig_v * dt * noise[k, i]
            out[10 + i] += sig_w * dt * noise[k, 3 + i]
        for i in range(NX):
            if not math.isfinite(out[i]):
                return False, vmax
            x[i] = out[i]
        normalize_quat(x)
        for i in range(3):
            pos[k + 1, i] = x[i]
        sp = math.sqrt(x[7] * x[7] + x[8] * x[8] + x[9] * x[9])
        if sp > vmax:
            vmax = sp
    return True, vmax


def initial_state(track: Track) -> np.ndarray:
    x = np.zeros(NX)
    x[0:3] = track.path.point(0.0)[0]
    x[3] = 1.0
    return x


def run_episode(phi: ParamVector, track: Track, sim_config: SimConfig | None = None,
                ocp_config: OcpConfig | None = None, quad: QuadParams | None = None,
                verbose: bool = False) -> RolloutResult:
    """Fly ``sim_config.laps`` laps of ``track`` with MPCC weights ``phi``."""
    sim = sim_config or SimConfig()
    ocp = ocp_config or OcpConfig()
    quad = quad or QuadParams()
    if track.n_gates < 1:
        raise ValueError("track has no gates")
    ctl = MpccController(track, quad, ocp, phi, verbose=verbose)
    model = quad.as_array()
    rng = np.random.default_rng(sim.seed)

    nsub = sim.substeps
    dt = sim.dt_sim
    if sim.perturbed:
        drag = sim.drag_scale
        tau = sim.motor_time_constant
        lag = 1.0 - math.exp(-dt / tau) if tau > 0 else 1.0
        sig_v, sig_w = sim.noise_accel, sim.noise_rate
    else:
        drag, lag, sig_v, sig_w = 1.0, 1.0, 0.0, 0.0
    noise = np.zeros((nsub, 6))
    pos = np.empty((nsub + 1, 3))

    n_per_lap = track.n_gates
    res = RolloutResult(n_g=n_per_lap * sim.laps)
    traj = res.trajectory
    x = initial_state(track)
    f_act = np.full(4, quad.hover_thrust)
    nxt = 0  # next expected gate within the current lap
    miss_sum = 0.0
    lap = 0
    lap_start = 0.0
    n_steps = int(math.ceil(sim.timeout / sim.dt_control - 1e-9))
    t = 0.0

    for step in range(n_steps):
        t = step * sim.dt_control
        f_cmd = ctl.step(x)
        traj.t.append(t)
        traj.state.append(x.copy())
        traj.thrust.append(f_cmd.copy())
        traj.theta.append(ctl.theta)
        traj.v_theta.append(ctl.v_theta)
        traj.fallback.append(ctl.last_fallback)
        if verbose and ctl.diagnostics:
            it, kkt, cost = ctl.diagnostics[-1]
            traj.iterations.append(it)
            traj.kkt.append(kkt)
            traj.cost.append(cost)
        if ctl.failures > MAX_FALLBACKS:
            res.crash, res.crash_reason = True, "solver"
            break
        if sim.max_deviation is not None:
            dev = float(np.linalg.norm(x[0:3] - track.path.point(ctl.nearest_theta)[0]))
            if dev > sim.max_deviation:
                res.crash, res.crash_reason = True, "deviation"
                break
        if sig_v > 0 or sig_w > 0:
            noise = rng.standard_normal((nsub, 6))
        ok, vmax = plant_block(x, f_act, f_cmd, model, drag, dt, lag, noise, sig_v, sig_w, pos)
        res.max_speed = max(res.max_speed, vmax)
        if not ok:
            res.crash, res.crash_reason = True, "diverged"
            break
        # earliest ground contact in this block bounds the gate search
        limit = nsub
        if sim.ground_height is not None:
            below = np.nonzero(pos[1:, 2] < sim.ground_height)[0]
            if len(below):
                limit = int(below[0]) + 1
        i0 = 0
        done = False
        while lap < sim.laps:
            gate = track.gates[nxt]
            i = first_crossing(pos[i0:limit + 1], gate)
            if i < 0:
                break
            i += i0
            ev = detect_gate_pass(pos[i], pos[i + 1], gate, sim.pass_threshold)
            if ev.kind == "crash":
                res.crash, res.crash_reason = True, f"gate {nxt}"
                done = True
                break
            res.n_gp += 1
            # mean in-plane miss over the gates passed so far, so r_miss stays
            # within the crash radius and the exponential term stays bounded
            miss_sum += ev.miss_distance
            res.r_miss = miss_sum / res.n_gp
            nxt += 1
            if nxt == n_per_lap:
                t_cross = t + (i + ev.fraction) * dt
                if lap == 0:
                    res.t1 = t_cross - lap_start
                else:
                    res.t2 = t_cross - lap_start
                lap_start = t_cross
                lap += 1
                nxt = 0
            i0 = i + 1
        if done:
            break
        if limit < nsub:
            res.crash, res.crash_reason = True, "ground"
            break
        if lap >= sim.laps:
            break
    else:
        res.timeout = True
    res.sim_time = t + sim.dt_control
    res.fallbacks = ctl.total_failures
    if res.crash:
        log.debug("episode crashed (%s) at t=%.2f", res.crash_reason, res.sim_time)
    return res


def evaluate(phi: ParamVector, track: Track, sim_config: SimConfig | None = None,
             ocp_config: OcpConfig | None = None, reward_config: RewardConfig | None = None,
             quad: QuadParams | None = None) -> tuple[float, RolloutResult]:
    """run_episode followed by compute_reward."""
    r = run_episode(phi, track, sim_config, ocp_config, quad)
    return compute_reward(r, reward_config), r
