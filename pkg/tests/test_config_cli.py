import json

import numpy as np
import pytest

from mpcctune import artifacts
from mpcctune.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, load_phi, main
from mpcctune.config import ConfigError, dump_config, parse_config, parse_config_text

SMALL = """\
track: single_gate
method: wml
seed: 3
sim: {timeout: 2.0}
stages:
  - {fidelity: simple, episodes: 1}
  - {fidelity: perturbed, episodes: 1}
train: {samples_per_episode: 2}
evaluation: {samples: 2}
"""


def write(tmp_path, text, name="exp.yaml"):
    f = tmp_path / name
    f.write_text(text)
    return f


# -- configuration ------------------------------------------------------------------


def test_minimal_config_fills_defaults():
    cfg = parse_config_text("track: oval\nmethod: mh\n")
    assert cfg.method == "mh" and cfg.seed == 0
    assert [s.episodes for s in cfg.stages] == [30, 30]
    assert [s.fidelity for s in cfg.stages] == ["simple", "perturbed"]
    assert cfg.train.samples_per_episode == 16 and cfg.train.beta == 0.05
    assert cfg.evaluation.samples == 100 and cfg.evaluation.pass_threshold == 0.6
    assert cfg.baseline_budget() == 960
    assert cfg.eval_sim().pass_threshold == 0.6 and cfg.eval_sim().fidelity == "perturbed"


def test_negative_width_bound_names_the_key():
    text = "track: oval\nbounds:\n  width: [-0.1, 5.0]\n"
    with pytest.raises(ConfigError) as e:
        parse_config_text(text, "exp.yaml")
    msg = str(e.value)
    assert "bounds.width" in msg and msg.startswith("exp.yaml:3:")


def test_round_trip_is_identical(tmp_path):
    cfg = parse_config(write(tmp_path, SMALL))
    again = parse_config_text(dump_config(cfg), "dump.yaml")
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


@pytest.mark.parametrize(
    "text, where",
    [
        ("method: wml\n", "track"),
        ("track: oval\ncolour: red\n", "colour"),
        ("track: oval\nmethod: bo\n", "method"),
        ("track: nowhere.yaml\n", "track"),
        ("track: oval\nocp: {horizon: 0}\n", "ocp"),
        ("track: oval\ntrain: {beta: -1.0}\n", "beta"),
        ("track: oval\nstages: [{fidelity: simple, episodes: 2, wind: 3}]\n", "wind"),
        ("track: oval\nsim: {timeout: fast}\n", "sim.timeout"),
        ("track: oval\nseed: [1\n", "malformed"),
        ("", "empty"),
    ],
)
def test_config_errors_are_anchored(text, where):
    with pytest.raises(ConfigError) as e:
        parse_config_text(text, "exp.yaml")
    assert where in str(e.value) and str(e.value).startswith("exp.yaml:")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.yaml")


def test_track_path_relative_to_config(tmp_path):
    (tmp_path / "t.yaml").write_text(
        "closed: true\npoints:\n  - gate: {center: [0, 0, 1], yaw: 0}\n  - waypoint: [4, 3, 1]\n"
        "  - waypoint: [0, 6, 1]\n  - waypoint: [-4, 3, 1]\n"
    )
    cfg = parse_config(write(tmp_path, "track: t.yaml\n"))
    assert cfg.load_track().n_gates == 1


def test_stage_overrides(tmp_path):
    cfg = parse_config_text("track: oval\nstages:\n  - {fidelity: perturbed, episodes: 2, drag_scale: 2.0}\n")
    sim = cfg.stage_sims()[0]
    assert sim.fidelity == "perturbed" and sim.drag_scale == 2.0
    assert cfg.train_config().episodes == (2,)


# -- artifacts ----------------------------------------------------------------------


def test_atomic_write_leaves_no_temp_files(tmp_path):
    artifacts.write_csv(tmp_path / "a.csv", ("x", "y"), [[1, 2.5], [3, float("inf")]])
    assert (tmp_path / "a.csv").read_text() == "x,y\n1,2.5\n3,inf\n"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.csv"]
    artifacts.write_json(tmp_path / "b.json", {"v": np.arange(3), "f": float("nan")})
    assert artifacts.read_json(tmp_path / "b.json")["v"] == [0, 1, 2]


# -- commands -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    cfg = write(d, SMALL)
    assert main(["train", "--config", str(cfg), "--out", str(d / "run")]) == EXIT_OK
    return d, cfg


def test_train_writes_artifacts(trained):
    d, _ = trained
    run = d / "run"
    hist = (run / "history.csv").read_text().splitlines()
    assert hist[0] == "episode,stage,mean_reward,best_reward,t1_best,t2_best,success_fraction"
    assert len(hist) == 3 and hist[2].split(",")[1] == "2"
    assert len((run / "samples.csv").read_text().splitlines()) == 1 + 4
    ck = json.loads((run / "policy_ep001.json").read_text())
    assert {"mean", "variances", "bounds", "stage", "episode"} <= set(ck)
    rep = json.loads((run / "report.json").read_text())
    assert rep["rollouts"] == 4 and len(rep["best_phi"]) == 6


def test_train_zero_episodes_header_only(tmp_path):
    text = SMALL.replace("episodes: 1}", "episodes: 0}")
    cfg = write(tmp_path, text)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == EXIT_OK
    assert (tmp_path / "run" / "history.csv").read_text() == \
        "episode,stage,mean_reward,best_reward,t1_best,t2_best,success_fraction\n"


def test_resume_matches_uninterrupted_history(trained, tmp_path):
    d, cfg = trained
    run = tmp_path / "resumed"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--out", str(run), "--checkpoint", str(run / "policy_ep000.json")]) == 0
    assert (run / "history.csv").read_text() == (d / "run" / "history.csv").read_text()
    assert (run / "samples.csv").read_text() == (d / "run" / "samples.csv").read_text()


@pytest.mark.parametrize("method", ["random", "mh"])
def test_baseline_command(trained, tmp_path, method):
    _, cfg = trained
    out = tmp_path / method
    assert main(["baseline", "--config", str(cfg), "--method", method, "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "report.json").read_text())
    assert rep["method"] == method and rep["rollouts"] == 4
    assert len((out / "history.csv").read_text().splitlines()) == 1 + 2


def test_evaluate_zero_variance_checkpoint(trained, tmp_path):
    d, cfg = trained
    ck = json.loads((d / "run" / "policy_final.json").read_text())
    ck["variances"] = [0.0] * len(ck["variances"])
    ck["floor"] = [1e-300] * len(ck["variances"])
    (tmp_path / "ck.json").write_text(json.dumps(ck))
    out = tmp_path / "eval"
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(tmp_path / "ck.json"), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())["evaluation"]
    assert rep["success_rate"] in (0.0, 1.0) and rep["pass_threshold"] == 0.6
    rows = (out / "eval.csv").read_text().splitlines()[1:]
    phis = {",".join(r.split(",")[-6:]) for r in rows}
    assert len(rows) == 2 and len(phis) == 1


def test_rollout_is_byte_identical(trained, tmp_path):
    _, cfg = trained
    phi = tmp_path / "phi.json"
    phi.write_text(json.dumps({"heights": [200.0], "widths": [0.5], "q_nom": 5.0, "r_dv": 0.1, "r_df": 0.05, "mu": 2.0}))
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert main(["rollout", "--config", str(cfg), "--phi", str(phi), "--out", str(out)]) == EXIT_OK
        outs.append((out / "trajectory.csv").read_bytes())
    assert outs[0] == outs[1]
    assert outs[0].startswith(b"t,px,py,pz,vx,vy,vz,speed,theta,v_theta,f1,f2,f3,f4,fallback\n")
    out = tmp_path / "rv"
    assert main(["rollout", "--config", str(cfg), "--phi", str(phi), "--out", str(out), "-v"]) == EXIT_OK
    assert (out / "trajectory.csv").read_text().splitlines()[0].endswith("iterations,kkt,cost")


def test_load_phi_formats(tmp_path):
    f = tmp_path / "p.json"
    f.write_text(json.dumps([1.0, 0.5, 5.0, 0.1, 0.1, 1.0]))
    assert load_phi(f, 1).n_gates == 1
    f.write_text(json.dumps({"best_phi": [1.0, 0.5, 2.0, 0.5, 5.0, 0.1, 0.1, 1.0]}))
    with pytest.raises(ConfigError):
        load_phi(f, 1)
    f.write_text(json.dumps({"nothing": 1}))
    with pytest.raises(ConfigError):
        load_phi(f, 1)


def test_exit_codes(trained, tmp_path):
    _, cfg = trained
    bad = write(tmp_path, "track: oval\nmethod: nope\n", "bad.yaml")
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    assert main(["train", "--config", str(cfg), "--seed", "-1"]) == EXIT_CONFIG
    # checkpoint for a different track dimension
    (tmp_path / "ck.json").write_text(json.dumps({"mean": [0.5], "variances": [0.1],
                                                  "bounds": {"lower": [0.0], "upper": [1.0]},
                                                  "stage": 1, "episode": 0}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"),
                 "--checkpoint", str(tmp_path / "ck.json")]) == EXIT_CONFIG
    # unreadable checkpoint content is a runtime failure
    (tmp_path / "junk.json").write_text("{not json")
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(tmp_path / "junk.json"),
                 "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert EXIT_CONFIG != EXIT_RUNTIME != EXIT_OK


def test_shipped_configs_parse():
    from pathlib import Path
    root = Path(__file__).resolve().parent.parent / "configs"
    oval = parse_config(root / "oval.yaml")
    assert oval.baseline_budget() == 960 and oval.load_track().n_gates == 4
    assert parse_config(root / "smoke.yaml").load_track().n_gates == 1
    assert load_phi(root / "phi_single.json", 1).n_gates == 1
