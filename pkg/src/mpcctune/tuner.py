"""Episodic policy search over the MPCC weights.

Weighted-maximum-likelihood (WML) updates of a diagonal Gaussian policy with a
two-stage curriculum, plus the random-search and Metropolis-Hastings baselines.
Everything operates on flat parameter arrays; ``RolloutEvaluator`` converts to
:class:`ParamVector` and runs an episode.

Reproducibility: every sample draws from its own stream derived from
``(master seed, episode, sample index)``, so results do not depend on how
evaluations are scheduled across workers.
"""

from __future__ import annotations

import json
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mpcc import OcpConfig, ParamBounds, ParamVector
from .rollout import RewardConfig, RolloutResult, SimConfig, compute_reward, run_episode
from .track import Track

log = logging.getLogger(__name__)

# sub-stream tags so sampling, simulation and MH acceptance never share draws
_SAMPLE, _SIM, _ACCEPT = 0, 1, 2
# evaluation draws (parameters, simulator noise)
EVAL, EVAL_SIM = 3, 4


def sample_seed(master: int, episode: int, index: int, purpose: int = _SAMPLE) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master), spawn_key=(int(episode), int(index), int(purpose)))


def sample_rng(master: int, episode: int, index: int, purpose: int = _SAMPLE) -> np.random.Generator:
    return np.random.default_rng(sample_seed(master, episode, index, purpose))


def sim_seed(master: int, episode: int, index: int, purpose: int = _SIM) -> int:
    return int(sample_seed(master, episode, index, purpose).generate_state(1, dtype=np.uint32)[0])


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------


@dataclass
class GaussianPolicy:
    mean: np.ndarray
    variance: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    floor: np.ndarray

    def __post_init__(self):
        for name in ("mean", "variance", "lower", "upper", "floor"):
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64).ravel())
        n = len(self.mean)
        if any(len(getattr(self, a)) != n for a in ("variance", "lower", "upper", "floor")):
            raise ValueError("policy arrays must all have the same length")
        if np.any(self.upper <= self.lower):
            raise ValueError("policy bounds: every upper bound must exceed its lower bound")
        if np.any(self.floor <= 0):
            raise ValueError("policy variance floor must be positive")
        self.mean = np.clip(self.mean, self.lower, self.upper)
        self.variance = np.maximum(self.variance, self.floor)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    @classmethod
    def from_bounds(cls, lower, upper, mean=None, rel_std: float = 0.25, rel_floor: float = 1e-6) -> "GaussianPolicy":
        lower = np.asarray(lower, dtype=np.float64)
        upper = np.asarray(upper, dtype=np.float64)
        span = upper - lower
        m = 0.5 * (lower + upper) if mean is None else np.asarray(mean, dtype=np.float64)
        return cls(m, (rel_std * span) ** 2, lower, upper, (rel_floor * span) ** 2)

    def with_variance(self, rel_std: float) -> "GaussianPolicy":
        """Same mean, variances reset to (rel_std * span)^2."""
        return GaussianPolicy(self.mean.copy(), (rel_std * self.span) ** 2, self.lower, self.upper, self.floor)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.mean.copy(), self.variance.copy(), self.lower, self.upper, self.floor)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "variances": self.variance.tolist(),
            "bounds": {"lower": self.lower.tolist(), "upper": self.upper.tolist()},
            "floor": self.floor.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianPolicy":
        try:
            lo = d["bounds"]["lower"]
            hi = d["bounds"]["upper"]
            floor = d.get("floor")
            if floor is None:
                floor = (1e-6 * (np.asarray(hi) - np.asarray(lo))) ** 2
            return cls(d["mean"], d["variances"], lo, hi, floor)
        except (KeyError, TypeError) as e:
            raise ValueError(f"malformed policy checkpoint: missing {e}") from None


def sample_batch(policy: GaussianPolicy, n: int, master_seed: int = 0, episode: int = 0,
                 purpose: int = _SAMPLE) -> np.ndarray:
    """n clipped Gaussian draws, row i from the stream (master_seed, episode, i)."""
    std = np.sqrt(policy.variance)
    out = np.empty((n, policy.dim))
    for i in range(n):
        z = sample_rng(master_seed, episode, i, purpose).standard_normal(policy.dim)
        out[i] = policy.mean + std * z
    return np.clip(out, policy.lower, policy.upper)


def reward_weights(rewards, beta: float) -> np.ndarray:
    """Max-shifted softmax of beta * rewards."""
    R = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(R)):
        raise ValueError("rewards must be finite")
    d = np.exp(beta * (R - R.max()))
    return d / d.sum()


def wml_update(policy: GaussianPolicy, samples, weights) -> GaussianPolicy:
    """Weighted mean and (biased) weighted variance, floored; mean clipped to the box."""
    X = np.asarray(samples, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    mean = w @ X
    var = w @ (X - mean) ** 2
    return GaussianPolicy(
        np.clip(mean, policy.lower, policy.upper),
        np.maximum(var, policy.floor),
        policy.lower,
        policy.upper,
        policy.floor,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    """Outcome of evaluating one parameter vector."""

    reward: float
    record: dict | None = None  # RolloutResult.record(), None for synthetic objectives
    lap_time: float = math.inf
    success: bool = False


Evaluator = Callable[[np.ndarray, int], Sample]


class RolloutEvaluator:
    """Picklable evaluator: one closed-loop episode per parameter vector."""

    def __init__(self, track: Track, sim: SimConfig, ocp: OcpConfig | None = None,
                 reward: RewardConfig | None = None, quad=None):
        self.track = track
        self.sim = sim
        self.ocp = ocp or OcpConfig()
        self.reward = reward or RewardConfig(timeout_value=sim.timeout)
        self.quad = quad

    def result(self, phi: np.ndarray, seed: int) -> RolloutResult:
        pv = ParamVector.from_array(phi)
        return run_episode(pv, self.track, self.sim.replace(seed=int(seed)), self.ocp, self.quad)

    def __call__(self, phi: np.ndarray, seed: int) -> Sample:
        try:
            r = self.result(phi, seed)
        except Exception as e:  # a bad sample must never abort training
            log.warning("rollout failed (%s: %s); scored as a crash", type(e).__name__, e)
            r = RolloutResult(n_g=self.track.n_gates * self.sim.laps, crash=True, crash_reason="exception")
        R = compute_reward(r, self.reward)
        return Sample(R, r.record(R), r.lap_time, r.success)


def _call(args):
    fn, phi, seed = args
    return fn(phi, seed)


class BatchRunner:
    """Evaluates batches serially or on a process pool; output order is input order."""

    def __init__(self, evaluator: Evaluator, workers: int = 1):
        self.evaluator = evaluator
        self.workers = max(1, int(workers))
        self._pool = None

    def __enter__(self):
        if self.workers > 1:
            # forkserver: forking a process that already runs threads (BLAS,
            # an embedding application) can deadlock the children
            self._pool = ProcessPoolExecutor(self.workers, mp_context=multiprocessing.get_context("forkserver"))
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def run(self, phis, seeds, evaluator: Evaluator | None = None) -> list[Sample]:
        fn = evaluator or self.evaluator
        jobs = [(fn, np.asarray(p), int(s)) for p, s in zip(phis, seeds)]
        if self._pool is None:
            return [_call(j) for j in jobs]
        return list(self._pool.map(_call, jobs))


# ---------------------------------------------------------------------------
# WML training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    samples_per_episode: int = 16
    episodes: tuple[int, ...] = (30, 30)
    fidelities: tuple[str, ...] = ("simple", "perturbed")
    beta: float = 0.05
    initial_std: float = 0.25  # relative to the box span
    reset_std: float = 1.0 / 6.0
    variance_floor: float = 1e-6  # floor std, relative to the box span
    seed: int = 0
    initial_mean: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "episodes", tuple(int(e) for e in self.episodes))
        object.__setattr__(self, "fidelities", tuple(self.fidelities))
        if self.samples_per_episode < 2:
            raise ValueError("train.samples_per_episode must be at least 2")
        if not self.beta > 0:
            raise ValueError("train.beta must be positive")
        if len(self.episodes) == 0 or len(self.episodes) != len(self.fidelities):
            raise ValueError("train.episodes and train.fidelities must have the same non-zero length")
        if min(self.episodes) < 0:
            raise ValueError("train.episodes must be non-negative")
        if not (self.initial_std > 0 and self.reset_std > 0 and self.variance_floor > 0):
            raise ValueError("train.initial_std, reset_std and variance_floor must be positive")
        if self.initial_mean is not None:
            object.__setattr__(self, "initial_mean", tuple(float(v) for v in self.initial_mean))

    @property
    def total_episodes(self) -> int:
        return sum(self.episodes)

    def stage_of(self, episode: int) -> int:
        acc = 0
        for s, n in enumerate(self.episodes):
            acc += n
            if episode < acc:
                return s
        raise IndexError(episode)

    def stage_start(self, stage: int) -> int:
        return sum(self.episodes[:stage])


@dataclass
class EpisodeRecord:
    episode: int
    stage: int
    samples: np.ndarray
    rewards: np.ndarray
    weights: np.ndarray
    policy: GaussianPolicy  # after the update
    best_reward: float  # best so far
    best_phi: np.ndarray
    best_sample: Sample
    results: list[Sample] = field(default_factory=list, repr=False)

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards))

    @property
    def success_fraction(self) -> float:
        return float(np.mean([s.success for s in self.results])) if self.results else 0.0

    def history_row(self) -> dict:
        rec = self.best_sample.record

        def lap(key):
            if rec is None:
                return math.nan
            # a record restored from JSON stores unfinished laps as null
            v = rec.get(key)
            return math.inf if v is None else v

        return {
            "episode": self.episode,
            "stage": self.stage + 1,
            "mean_reward": self.mean_reward,
            "best_reward": self.best_reward,
            "t1_best": lap("t1"),
            "t2_best": lap("t2"),
            "success_fraction": self.success_fraction,
        }


HISTORY_COLUMNS = ("episode", "stage", "mean_reward", "best_reward", "t1_best", "t2_best", "success_fraction")


@dataclass
class Checkpoint:
    policy: GaussianPolicy
    stage: int
    episode: int  # last completed global episode index
    best_reward: float = -math.inf
    best_phi: np.ndarray | None = None
    best_record: dict | None = None

    def to_dict(self) -> dict:
        d = self.policy.to_dict()
        d.update(stage=self.stage + 1, episode=self.episode, best_reward=self.best_reward,
                 best_phi=None if self.best_phi is None else np.asarray(self.best_phi).tolist(),
                 best_record=self.best_record)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        pol = GaussianPolicy.from_dict(d)
        try:
            stage = int(d["stage"]) - 1
            ep = int(d["episode"])
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"malformed policy checkpoint: {e}") from None
        best = d.get("best_phi")
        br = d.get("best_reward")
        return cls(pol, stage, ep, -math.inf if br is None else float(br),
                   None if best is None else np.asarray(best, dtype=np.float64), d.get("best_record"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "Checkpoint":
        return cls.from_dict(json.loads(text))


@dataclass
class TrainResult:
    best_phi: np.ndarray
    best_reward: float
    policy: GaussianPolicy
    history: list[EpisodeRecord]


def train_policy(evaluators: Sequence[Evaluator], lower, upper, config: TrainConfig,
                 resume: Checkpoint | None = None, workers: int = 1,
                 on_episode: Callable[[EpisodeRecord], None] | None = None) -> TrainResult:
    """Run the curriculum; ``evaluators[s]`` scores samples in stage s.

    With ``resume`` the run continues after the checkpointed episode and
    reproduces the uninterrupted run exactly (seeds depend only on the global
    episode index).
    """
    if len(evaluators) != len(config.episodes):
        raise ValueError("need one evaluator per training stage")
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if resume is None:
        policy = GaussianPolicy.from_bounds(lower, upper, config.initial_mean, config.initial_std, config.variance_floor)
        first = 0
        best_reward, best_phi, best_sample = -math.inf, policy.mean.copy(), Sample(-math.inf)
    else:
        policy = resume.policy.copy()
        first = resume.episode + 1
        best_reward = resume.best_reward
        best_phi = policy.mean.copy() if resume.best_phi is None else resume.best_phi.copy()
        best_sample = Sample(best_reward, resume.best_record)
    history: list[EpisodeRecord] = []
    N = config.samples_per_episode

    with BatchRunner(evaluators[0], workers) as runner:
        for ep in range(first, config.total_episodes):
            stage = config.stage_of(ep)
            if stage > 0 and ep == config.stage_start(stage):
                # new fidelity tier: keep the mean, restore exploration
                policy = policy.with_variance(config.reset_std)
                log.info("stage %d: variance reset", stage + 1)
            X = sample_batch(policy, N, config.seed, ep)
            seeds = [sim_seed(config.seed, ep, i) for i in range(N)]
            results = runner.run(X, seeds, evaluators[stage])
            R = np.array([s.reward for s in results])
            w = reward_weights(R, config.beta)
            policy = wml_update(policy, X, w)
            i = int(np.argmax(R))
            if R[i] > best_reward:
                best_reward, best_phi, best_sample = float(R[i]), X[i].copy(), results[i]
            rec = EpisodeRecord(ep, stage, X, R, w, policy.copy(), best_reward, best_phi.copy(), best_sample, results)
            history.append(rec)
            log.info("episode %d (stage %d): mean %.4g best %.4g", ep, stage + 1, rec.mean_reward, best_reward)
            if on_episode is not None:
                on_episode(rec)
    return TrainResult(best_phi, best_reward, policy, history)


def _bounds_for(track: Track, bounds: ParamBounds | None):
    return (bounds or ParamBounds()).arrays(track.n_gates)


def train(track: Track, train_config: TrainConfig, sim_configs: Sequence[SimConfig],
          ocp_config: OcpConfig | None = None, bounds: ParamBounds | None = None,
          reward_config: RewardConfig | None = None, quad=None, workers: int = 1,
          resume: Checkpoint | None = None, on_episode=None) -> TrainResult:
    """WML curriculum on a track; ``sim_configs[s]`` is the simulator of stage s."""
    if len(sim_configs) != len(train_config.episodes):
        raise ValueError("need one SimConfig per training stage")
    evals = [RolloutEvaluator(track, s, ocp_config, reward_config, quad) for s in sim_configs]
    lo, hi = _bounds_for(track, bounds)
    return train_policy(evals, lo, hi, train_config, resume, workers, on_episode)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


@dataclass
class SearchStep:
    index: int
    phi: np.ndarray
    sample: Sample
    best_reward: float  # running max
    accepted: bool = True


@dataclass
class SearchResult:
    best_phi: np.ndarray
    best_reward: float
    history: list[SearchStep]

    def top(self, k: int) -> list[SearchStep]:
        """The k highest-reward evaluated samples (ties by index)."""
        order = sorted(self.history, key=lambda s: (-s.sample.reward, s.index))
        return order[:k]


def random_search(evaluator: Evaluator, budget: int, lower, upper, seed: int = 0,
                  workers: int = 1, batch: int = 16) -> SearchResult:
    """Uniform sampling of the box; best of ``budget`` evaluations."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if budget < 1:
        raise ValueError("budget must be at least 1")
    history: list[SearchStep] = []
    best_r, best_phi = -math.inf, None
    with BatchRunner(evaluator, workers) as runner:
        for start in range(0, budget, batch):
            idx = range(start, min(start + batch, budget))
            X = [lower + (upper - lower) * sample_rng(seed, 0, i).random(len(lower)) for i in idx]
            res = runner.run(X, [sim_seed(seed, 0, i) for i in idx])
            for i, x, s in zip(idx, X, res):
                if s.reward > best_r:
                    best_r, best_phi = s.reward, x.copy()
                history.append(SearchStep(i, x, s, best_r))
    return SearchResult(best_phi, best_r, history)


def acceptance_probability(r_new: float, r_old: float, beta: float) -> float:
    """min(1, exp(beta (r_new - r_old)))."""
    a = beta * (r_new - r_old)
    return 1.0 if a >= 0 else math.exp(a)


def reflect_into(x, lower, upper):
    """Mirror x back into [lower, upper] (keeps random-walk proposals symmetric)."""
    span = upper - lower
    y = np.mod(x - lower, 2 * span)
    y = np.where(y > span, 2 * span - y, y)
    return lower + y


def mh_search(evaluator: Evaluator, budget: int, lower, upper, proposal_scales=None, beta: float = 0.05,
              seed: int = 0, start=None) -> SearchResult:
    """Random-walk Metropolis-Hastings on exp(beta R) over the box.

    Proposals are Gaussian steps reflected at the box faces; the default scale
    is a tenth of the span.  The first evaluation is the start point (box
    center by default), so ``budget`` counts every rollout.
    """
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if budget < 1:
        raise ValueError("budget must be at least 1")
    scales = 0.1 * (upper - lower) if proposal_scales is None else np.broadcast_to(
        np.asarray(proposal_scales, dtype=np.float64), lower.shape)
    if np.any(scales < 0):
        raise ValueError("proposal scales must be non-negative")
    x = 0.5 * (lower + upper) if start is None else np.clip(np.asarray(start, dtype=np.float64), lower, upper)
    s = evaluator(x, sim_seed(seed, 0, 0))
    history = [SearchStep(0, x.copy(), s, s.reward)]
    r = s.reward
    best_r, best_phi = r, x.copy()
    for i in range(1, budget):
        rng = sample_rng(seed, 0, i)
        prop = reflect_into(x + scales * rng.standard_normal(len(x)), lower, upper)
        sp = evaluator(prop, sim_seed(seed, 0, i))
        u = sample_rng(seed, 0, i, _ACCEPT).random()
        accepted = u < acceptance_probability(sp.reward, r, beta)
        if accepted:
            x, r = prop, sp.reward
        if sp.reward > best_r:
            best_r, best_phi = sp.reward, prop.copy()
        history.append(SearchStep(i, prop, sp, best_r, accepted))
    return SearchResult(best_phi, best_r, history)


def mh_chain(log_target: Callable[[np.ndarray], float], steps: int, lower, upper, scales, beta: float = 1.0,
             seed: int = 0, start=None) -> np.ndarray:
    """Bare MH chain on exp(beta f) for cheap objectives; returns visited states."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), lower.shape)
    rng = np.random.default_rng(seed)
    x = 0.5 * (lower + upper) if start is None else np.asarray(start, dtype=np.float64)
    fx = log_target(x)
    out = np.empty((steps, len(x)))
    steps_z = rng.standard_normal((steps, len(x)))
    us = rng.random(steps)
    for i in range(steps):
        prop = reflect_into(x + scales * steps_z[i], lower, upper)
        fp = log_target(prop)
        if us[i] < acceptance_probability(fp, fx, beta):
            x, fx = prop, fp
        out[i] = x
    return out


def run_search(method: str, evaluator: Evaluator, budget: int, lower, upper, seed: int = 0,
               beta: float = 0.05, proposal_scales=None, workers: int = 1) -> SearchResult:
    if method == "random":
        return random_search(evaluator, budget, lower, upper, seed, workers)
    if method == "mh":
        return mh_search(evaluator, budget, lower, upper, proposal_scales, beta, seed)
    raise ValueError(f"unknown search method {method!r}")
