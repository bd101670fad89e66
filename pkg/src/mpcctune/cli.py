"""Command-line front end.

    mpcctune train    --config exp.yaml [--seed S] [--out DIR] [--checkpoint policy_epNNN.json]
    mpcctune baseline --config exp.yaml --method random|mh
    mpcctune evaluate --config exp.yaml --checkpoint policy_epNNN.json|report.json
    mpcctune rollout  --config exp.yaml --phi phi.json

Exit status: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import artifacts
from .config import ConfigError, ExperimentConfig, dump_config, parse_config
from .mpcc import ParamVector
from .rollout import RECORD_FIELDS, TrajectoryLog, compute_reward, run_episode
from .tuner import (
    EVAL,
    EVAL_SIM,
    HISTORY_COLUMNS,
    Checkpoint,
    EpisodeRecord,
    GaussianPolicy,
    RolloutEvaluator,
    SearchResult,
    run_search,
    sample_batch,
    sim_seed,
    train_policy,
)

log = logging.getLogger("mpcctune")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SAMPLE_COLUMNS = ("index", "episode", *RECORD_FIELDS, "success")
TRAJECTORY_COLUMNS = ("t", "px", "py", "pz", "vx", "vy", "vz", "speed", "theta", "v_theta",
                      "f1", "f2", "f3", "f4", "fallback")
DIAG_COLUMNS = ("iterations", "kkt", "cost")


def _phi_columns(dim: int) -> tuple[str, ...]:
    n = (dim - 4) // 2
    names = []
    for j in range(n):
        names += [f"h{j}", f"w{j}"]
    return tuple(names + ["q_nom", "r_dv", "r_df", "mu"])


def _phi_dict(phi) -> dict:
    return dict(zip(_phi_columns(len(phi)), np.asarray(phi, dtype=np.float64).tolist()))


def _sample_row(index, episode, sample, phi) -> list:
    rec = sample.record or {k: math.nan for k in RECORD_FIELDS}
    if sample.record is None:
        rec["reward"] = sample.reward
    return [index, episode, *(rec[k] for k in RECORD_FIELDS), sample.success, *np.asarray(phi).tolist()]


def _evaluators(cfg: ExperimentConfig, track):
    return [RolloutEvaluator(track, s, cfg.ocp, cfg.reward.build(s.timeout), cfg.quad) for s in cfg.stage_sims()]


def _read_history(path: Path, last_episode: int, column: int = 0) -> list[str]:
    """Data lines of an existing CSV whose episode column is <= last_episode."""
    if not path.exists():
        return []
    keep = []
    for line in path.read_text().splitlines()[1:]:
        if line and int(line.split(",")[column]) <= last_episode:
            keep.append(line)
    return keep


# ---------------------------------------------------------------------------
# train / baseline
# ---------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, out: Path, checkpoint: Path | None = None) -> int:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    track = cfg.load_track()
    artifacts.atomic_write_text(out / "config.yaml", dump_config(cfg))
    if cfg.method != "wml":
        return _run_baseline(cfg, out, track)

    tc = cfg.train_config()
    lo, hi = cfg.bounds.arrays(track.n_gates)
    resume = None
    prev_rows: list[str] = []
    prev_samples: list[str] = []
    if checkpoint is not None:
        resume = Checkpoint.from_dict(artifacts.read_json(checkpoint))
        if resume.policy.dim != len(lo):
            raise ConfigError(f"{checkpoint}:0: policy has {resume.policy.dim} dimensions, track needs {len(lo)}")
        prev_rows = _read_history(out / "history.csv", resume.episode)
        prev_samples = _read_history(out / "samples.csv", resume.episode, column=1)

    phi_cols = _phi_columns(len(lo))
    hist_header = ",".join(HISTORY_COLUMNS)
    samp_header = ",".join(SAMPLE_COLUMNS + phi_cols)
    rows = list(prev_rows)
    samples = list(prev_samples)
    N = tc.samples_per_episode

    def on_episode(rec: EpisodeRecord):
        rows.append(",".join(artifacts.fmt(rec.history_row()[c]) for c in HISTORY_COLUMNS))
        for i, (s, x) in enumerate(zip(rec.results, rec.samples)):
            samples.append(",".join(artifacts.fmt(v) for v in _sample_row(rec.episode * N + i, rec.episode, s, x)))
        artifacts.atomic_write_text(out / "history.csv", "\n".join([hist_header, *rows]) + "\n")
        artifacts.atomic_write_text(out / "samples.csv", "\n".join([samp_header, *samples]) + "\n")
        ck = Checkpoint(rec.policy, rec.stage, rec.episode, rec.best_reward, rec.best_phi, rec.best_sample.record)
        artifacts.write_json(out / f"policy_ep{rec.episode:03d}.json", ck.to_dict())

    res = train_policy(_evaluators(cfg, track), lo, hi, tc, resume, cfg.workers, on_episode)
    # header-only files when nothing ran
    artifacts.atomic_write_text(out / "history.csv", "\n".join([hist_header, *rows]) + "\n")
    artifacts.atomic_write_text(out / "samples.csv", "\n".join([samp_header, *samples]) + "\n")
    best_rec = res.history[-1].best_sample.record if res.history else (resume.best_record if resume else None)
    final = Checkpoint(res.policy, len(tc.episodes) - 1, tc.total_episodes - 1, res.best_reward, res.best_phi, best_rec)
    artifacts.write_json(out / "policy_final.json", final.to_dict())
    report = {
        "method": "wml",
        "track": track.name,
        "seed": cfg.seed,
        "episodes": tc.total_episodes,
        "rollouts": sum(len(h.results) for h in res.history),
        "best_reward": res.best_reward,
        "best_phi": res.best_phi,
        "best_phi_named": _phi_dict(res.best_phi),
        "best_record": best_rec,
        "lap_time": _lap(best_rec),
        "policy_mean": res.policy.mean,
        "policy_variance": res.policy.variance,
    }
    artifacts.write_json(out / "report.json", report)
    log.info("training done: best reward %.6g", res.best_reward)
    return EXIT_OK


def _lap(rec) -> float:
    if not rec or rec.get("crash") or rec.get("t1") is None or rec.get("t2") is None:
        return math.inf
    t1, t2 = rec["t1"], rec["t2"]
    return 0.5 * (t1 + t2) if math.isfinite(t1) and math.isfinite(t2) else math.inf


def _run_baseline(cfg: ExperimentConfig, out: Path, track) -> int:
    # no curriculum: the whole budget goes to the target (last-stage) tier
    ev = _evaluators(cfg, track)[-1]
    lo, hi = cfg.bounds.arrays(track.n_gates)
    budget = cfg.baseline_budget()
    beta = cfg.baseline.beta if cfg.baseline.beta is not None else cfg.train.beta
    res: SearchResult = run_search(cfg.method, ev, budget, lo, hi, cfg.seed, beta,
                                   cfg.baseline.proposal_scale * (hi - lo), cfg.workers)
    N = cfg.train.samples_per_episode
    phi_cols = _phi_columns(len(lo))
    # history in blocks of N samples, mirroring the WML episodes
    rows = []
    for b in range(0, len(res.history), N):
        block = res.history[b:b + N]
        best = max(res.history[: b + len(block)], key=lambda s: (s.sample.reward, -s.index))
        rec = best.sample.record or {}
        rows.append({
            "episode": b // N,
            "stage": 1,
            "mean_reward": float(np.mean([s.sample.reward for s in block])),
            "best_reward": block[-1].best_reward,
            "t1_best": rec.get("t1", math.nan),
            "t2_best": rec.get("t2", math.nan),
            "success_fraction": float(np.mean([s.sample.success for s in block])),
        })
    artifacts.write_csv(out / "history.csv", HISTORY_COLUMNS, rows)
    artifacts.write_csv(out / "samples.csv", SAMPLE_COLUMNS + phi_cols + ("accepted",),
                        [_sample_row(s.index, s.index // N, s.sample, s.phi) + [s.accepted] for s in res.history])
    top = res.top(cfg.evaluation.samples)
    best = top[0]
    report = {
        "method": cfg.method,
        "track": track.name,
        "seed": cfg.seed,
        "rollouts": len(res.history),
        "best_reward": res.best_reward,
        "best_phi": res.best_phi,
        "best_phi_named": _phi_dict(res.best_phi),
        "best_record": best.sample.record,
        "lap_time": _lap(best.sample.record),
        "acceptance_rate": float(np.mean([s.accepted for s in res.history])),
        "top_phis": [s.phi for s in top],
    }
    artifacts.write_json(out / "report.json", report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def candidates_from(obj: dict, n: int, seed: int) -> np.ndarray:
    """Parameter vectors to evaluate, from a policy checkpoint or a report."""
    if "variances" in obj:
        return sample_batch(GaussianPolicy.from_dict(obj), n, seed, 0, EVAL)
    if "top_phis" in obj:
        return np.asarray(obj["top_phis"], dtype=np.float64)[:n]
    if "best_phi" in obj:
        return np.repeat(np.asarray(obj["best_phi"], dtype=np.float64)[None, :], n, axis=0)
    raise ConfigError("checkpoint:0: expected a policy checkpoint or a report with best_phi/top_phis")


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: Path, out: Path) -> int:
    out = Path(out)
    track = cfg.load_track()
    sim = cfg.eval_sim()
    ev = RolloutEvaluator(track, sim, cfg.ocp, cfg.reward.build(sim.timeout), cfg.quad)
    X = candidates_from(artifacts.read_json(checkpoint), cfg.evaluation.samples, cfg.seed)
    if X.shape[1] != 2 * track.n_gates + 4:
        raise ConfigError(f"{checkpoint}:0: parameter dimension {X.shape[1]} does not match the track")
    from .tuner import BatchRunner

    with BatchRunner(ev, cfg.workers) as runner:
        results = runner.run(X, [sim_seed(cfg.seed, 0, i, EVAL_SIM) for i in range(len(X))])
    cols = ("sample", *RECORD_FIELDS, "success", "lap_time") + _phi_columns(X.shape[1])
    rows = [[i, *(s.record[k] for k in RECORD_FIELDS), s.success, s.lap_time, *x] for i, (s, x) in enumerate(zip(results, X))]
    artifacts.write_csv(out / "eval.csv", cols, rows)
    laps = np.array([s.lap_time for s in results if s.success])
    summary = {
        "samples": len(results),
        "pass_threshold": sim.pass_threshold,
        "fidelity": sim.fidelity,
        "success_rate": float(np.mean([s.success for s in results])),
        "lap_time_mean": float(laps.mean()) if len(laps) else math.inf,
        "lap_time_std": float(laps.std()) if len(laps) else math.inf,
        "mean_reward": float(np.mean([s.reward for s in results])),
        "checkpoint": Path(checkpoint).name,
    }
    report_path = out / "report.json"
    report = artifacts.read_json(report_path) if report_path.exists() else {}
    report["evaluation"] = summary
    artifacts.write_json(report_path, report)
    log.info("evaluation: success %.0f%%, lap %.3f +- %.3f s", 100 * summary["success_rate"],
             summary["lap_time_mean"], summary["lap_time_std"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------


def load_phi(path: Path, n_gates: int) -> ParamVector:
    obj = artifacts.read_json(path)
    if isinstance(obj, list):
        arr = obj
    elif "phi" in obj:
        arr = obj["phi"]
    elif "heights" in obj:
        try:
            return ParamVector(obj["heights"], obj["widths"], obj["q_nom"], obj["r_dv"], obj["r_df"], obj["mu"])
        except KeyError as e:
            raise ConfigError(f"{path}:0: missing parameter {e}") from None
    elif "best_phi" in obj:
        arr = obj["best_phi"]
    elif "mean" in obj:
        arr = obj["mean"]
    else:
        raise ConfigError(f"{path}:0: no parameter vector found (expected phi, best_phi, mean or named fields)")
    pv = ParamVector.from_array(arr)
    if pv.n_gates != n_gates:
        raise ConfigError(f"{path}:0: parameter vector has {pv.n_gates} gates, track has {n_gates}")
    return pv


def trajectory_rows(traj: TrajectoryLog, verbose: bool):
    for i in range(len(traj)):
        x = traj.state[i]
        row = [traj.t[i], *x[0:3], *x[7:10], float(np.linalg.norm(x[7:10])), traj.theta[i], traj.v_theta[i],
               *traj.thrust[i], traj.fallback[i]]
        if verbose:
            row += [traj.iterations[i], traj.kkt[i], traj.cost[i]] if i < len(traj.iterations) else [math.nan] * 3
        yield row


def cmd_rollout(cfg: ExperimentConfig, phi_file: Path, out: Path, verbose: bool = False) -> int:
    out = Path(out)
    track = cfg.load_track()
    sim = cfg.stage_sims()[0].replace(seed=cfg.seed)
    phi = load_phi(phi_file, track.n_gates)
    r = run_episode(phi, track, sim, cfg.ocp, cfg.quad, verbose=verbose)
    R = compute_reward(r, cfg.reward.build(sim.timeout))
    cols = TRAJECTORY_COLUMNS + (DIAG_COLUMNS if verbose else ())
    artifacts.write_csv(out / "trajectory.csv", cols, trajectory_rows(r.trajectory, verbose))
    artifacts.write_json(out / "rollout.json", {**r.record(R), "crash_reason": r.crash_reason,
                                                "sim_time": r.sim_time, "fallbacks": r.fallbacks})
    log.info("rollout: reward %.6g, t1 %.3f, t2 %.3f, gates %d/%d", R, r.t1, r.t2, r.n_gp, r.n_g)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpcctune", description="MPCC racing controller tuning")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, type=Path, help="experiment YAML file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", type=Path, help="output directory (default: config output)")
        sp.add_argument("--workers", type=int, help="parallel rollout processes")
        sp.add_argument("--verbose", "-v", action="store_true")

    sp = sub.add_parser("train", help="run the configured search method")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, help="resume from a policy_epNNN.json")
    sp = sub.add_parser("baseline", help="train with a baseline search method")
    common(sp)
    sp.add_argument("--method", choices=("random", "mh"), default="random")
    sp = sub.add_parser("evaluate", help="evaluate a policy checkpoint or report")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp = sub.add_parser("rollout", help="fly one episode with fixed weights")
    common(sp)
    sp.add_argument("--phi", type=Path, required=True, help="JSON file with the parameter vector")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if not args.verbose:
        logging.getLogger("numba").setLevel(logging.WARNING)
    try:
        cfg = parse_config(args.config)
        changes = {}
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed: must be non-negative")
            changes["seed"] = args.seed
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers: must be at least 1")
            changes["workers"] = args.workers
        if args.command == "baseline":
            changes["method"] = args.method
        cfg = cfg.replace(**changes)
        out = args.out or Path(cfg.output)
        if args.command in ("train", "baseline"):
            return cmd_train(cfg, out, getattr(args, "checkpoint", None))
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint, out)
        return cmd_rollout(cfg, args.phi, out, args.verbose)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # anything else is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
