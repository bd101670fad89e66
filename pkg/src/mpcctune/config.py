"""Experiment configuration: one YAML file per experiment.

Every error message is anchored to ``file:line`` of the offending key.  Unknown
keys are rejected.  ``dump_config`` writes a file that parses back to an equal
:class:`ExperimentConfig`.

Layout (all sections optional except ``track``)::

    track: oval                 # bundled name or path relative to this file
    method: wml                 # wml | random | mh
    seed: 0
    output: runs/oval
    workers: 1
    quad: {mass: 0.75, ...}
    ocp: {horizon: 20, ...}
    sim: {dt_sim: 0.001, ...}   # defaults shared by every stage
    stages:
      - {fidelity: simple, episodes: 30}
      - {fidelity: perturbed, episodes: 30, drag_scale: 1.5}
    train: {samples_per_episode: 16, beta: 0.05, ...}
    bounds: {height: [0, 5000], width: [0.05, 5], ...}
    reward: {crash_penalty: -100, ...}
    baseline: {budget: null, proposal_scale: 0.1, beta: 0.05}
    evaluation: {samples: 100, pass_threshold: 0.6}
"""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field

import yaml

from .dynamics import QuadParams
from .mpcc import OcpConfig, ParamBounds
from .rollout import RewardConfig, SimConfig
from .track import BUNDLED_TRACKS, Track, bundled_track, load_track

METHODS = ("wml", "random", "mh")


class ConfigError(ValueError):
    """Invalid experiment configuration; message carries file:line."""


# ---------------------------------------------------------------------------
# Sections not owned by other modules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    fidelity: str = "simple"
    episodes: int = 30
    # per-stage SimConfig overrides
    overrides: tuple = ()


@dataclass(frozen=True)
class TrainSection:
    samples_per_episode: int = 16
    beta: float = 0.05
    initial_std: float = 0.25
    reset_std: float = 1.0 / 6.0
    variance_floor: float = 1e-6
    initial_mean: tuple[float, ...] | None = None


@dataclass(frozen=True)
class RewardSection:
    crash_penalty: float = -100.0
    # None: use the stage's episode timeout
    timeout_value: float | None = None
    pass_bonus_threshold: float = 0.01
    max_miss_exponent: float = 1000.0

    def build(self, timeout: float) -> RewardConfig:
        tv = self.timeout_value if self.timeout_value is not None else timeout
        return RewardConfig(self.crash_penalty, tv, self.pass_bonus_threshold, self.max_miss_exponent)


@dataclass(frozen=True)
class BaselineSection:
    # None: matched to samples_per_episode x total episodes
    budget: int | None = None
    proposal_scale: float = 0.1  # MH step std, relative to the box span
    beta: float | None = None  # None: same as train.beta

    def __post_init__(self):
        if self.budget is not None and self.budget < 1:
            raise ValueError("baseline.budget must be at least 1")
        if self.proposal_scale < 0:
            raise ValueError("baseline.proposal_scale must be non-negative")
        if self.beta is not None and not self.beta > 0:
            raise ValueError("baseline.beta must be positive")


@dataclass(frozen=True)
class EvaluationSection:
    samples: int = 100
    pass_threshold: float = 0.6
    # None: fidelity of the last training stage
    fidelity: str | None = None

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("evaluation.samples must be at least 1")
        if not self.pass_threshold > 0:
            raise ValueError("evaluation.pass_threshold must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    track: str
    method: str = "wml"
    seed: int = 0
    output: str = "runs/experiment"
    workers: int = 1
    quad: QuadParams = field(default_factory=QuadParams)
    ocp: OcpConfig = field(default_factory=OcpConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    stages: tuple[StageConfig, ...] = (StageConfig("simple", 30), StageConfig("perturbed", 30))
    train: TrainSection = field(default_factory=TrainSection)
    bounds: ParamBounds = field(default_factory=ParamBounds)
    reward: RewardSection = field(default_factory=RewardSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    # derived views -----------------------------------------------------

    def load_track(self) -> Track:
        if self.track in BUNDLED_TRACKS:
            return bundled_track(self.track)
        return load_track(self.track)

    def stage_sims(self) -> list[SimConfig]:
        return [self.sim.replace(fidelity=s.fidelity, **dict(s.overrides)) for s in self.stages]

    def train_config(self, seed: int | None = None):
        from .tuner import TrainConfig

        t = self.train
        return TrainConfig(
            samples_per_episode=t.samples_per_episode,
            episodes=tuple(s.episodes for s in self.stages),
            fidelities=tuple(s.fidelity for s in self.stages),
            beta=t.beta,
            initial_std=t.initial_std,
            reset_std=t.reset_std,
            variance_floor=t.variance_floor,
            seed=self.seed if seed is None else seed,
            initial_mean=t.initial_mean,
        )

    def baseline_budget(self) -> int:
        if self.baseline.budget is not None:
            return self.baseline.budget
        return self.train.samples_per_episode * sum(s.episodes for s in self.stages)

    def eval_sim(self) -> SimConfig:
        sims = self.stage_sims()
        base = sims[-1]
        if self.evaluation.fidelity is not None:
            base = base.replace(fidelity=self.evaluation.fidelity)
        return base.replace(pass_threshold=self.evaluation.pass_threshold)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# Parsing with line anchors
# ---------------------------------------------------------------------------


class _Lines:
    """Maps dotted key paths to 1-based line numbers."""

    def __init__(self, filename: str, root):
        self.filename = filename
        self.map: dict[str, int] = {}
        if root is not None:
            self._walk(root, "")

    def _walk(self, node, prefix):
        self.map.setdefault(prefix, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = f"{prefix}.{k.value}" if prefix else str(k.value)
                self.map[key] = k.start_mark.line + 1
                self._walk(v, key)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, f"{prefix}[{i}]")

    def line(self, path: str) -> int:
        while path:
            if path in self.map:
                return self.map[path]
            path = path.rpartition(".")[0] if "." in path else ""
        return self.map.get("", 1)

    def error(self, path: str, msg: str) -> ConfigError:
        head = msg.split(" ", 1)[0].rstrip(":")
        if head in self.map:
            # the message already names its key
            return ConfigError(f"{self.filename}:{self.line(head)}: {msg}")
        if path:
            return ConfigError(f"{self.filename}:{self.line(path)}: {path}: {msg}")
        return ConfigError(f"{self.filename}:{self.line(path)}: {msg}")


def _hints(cls):
    return typing.get_type_hints(cls)


def _unwrap_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return (args[0] if len(args) == 1 else tp), True
    return tp, False


def _coerce(value, tp, path, lines):
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if optional:
            return None
        raise lines.error(path, "value required")
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise lines.error(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise lines.error(path, f"expected an integer, got {value!r}")
        return int(value)
    if tp is str:
        if not isinstance(value, str):
            raise lines.error(path, f"expected a string, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise lines.error(path, f"expected true/false, got {value!r}")
        return value
    if typing.get_origin(tp) is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise lines.error(path, f"expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]", lines) for i, v in enumerate(value))
        if len(value) != len(args):
            raise lines.error(path, f"expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]", lines) for i, (v, a) in enumerate(zip(value, args)))
    return value


def _build(cls, data, path, lines, skip=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise lines.error(path, "expected a mapping")
    hints = _hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.name not in skip]
    unknown = [k for k in data if k not in names]
    if unknown:
        key = f"{path}.{unknown[0]}" if path else str(unknown[0])
        raise lines.error(key, f"unknown key (allowed: {', '.join(names)})")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = _coerce(v, hints[k], f"{path}.{k}" if path else k, lines)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        msg = str(e)
        # anchor to the key the message names, if any
        key = path
        for k in kwargs:
            if k in msg:
                key = f"{path}.{k}" if path else k
                break
        raise lines.error(key, msg) from None


def _sim_overrides(data: dict, path: str, lines) -> dict:
    hints = _hints(SimConfig)
    out = {}
    for k, v in data.items():
        if k not in hints or k == "fidelity":
            raise lines.error(f"{path}.{k}", "unknown key")
        out[k] = _coerce(v, hints[k], f"{path}.{k}", lines)
    return out


_TOP = {f.name for f in dataclasses.fields(ExperimentConfig)}


def config_from_dict(doc: dict, filename: str = "<config>", base_dir: str = ".", lines: _Lines | None = None) -> ExperimentConfig:
    lines = lines or _Lines(filename, None)
    if not isinstance(doc, dict):
        raise lines.error("", "top level must be a mapping")
    unknown = [k for k in doc if k not in _TOP]
    if unknown:
        raise lines.error(str(unknown[0]), f"unknown key (allowed: {', '.join(sorted(_TOP))})")
    if "track" not in doc:
        raise lines.error("", "missing required key 'track'")
    track = _coerce(doc["track"], str, "track", lines)
    if track not in BUNDLED_TRACKS:
        track = os.path.normpath(os.path.join(base_dir, os.path.expanduser(track)))
        if not os.path.isfile(track):
            raise lines.error("track", f"track file not found: {track}")
    method = _coerce(doc.get("method", "wml"), str, "method", lines)
    if method not in METHODS:
        raise lines.error("method", f"must be one of {', '.join(METHODS)}, got {method!r}")
    seed = _coerce(doc.get("seed", 0), int, "seed", lines)
    if seed < 0:
        raise lines.error("seed", "must be non-negative")
    workers = _coerce(doc.get("workers", 1), int, "workers", lines)
    if workers < 1:
        raise lines.error("workers", "must be at least 1")
    output = _coerce(doc.get("output", "runs/experiment"), str, "output", lines)

    kw = dict(track=track, method=method, seed=seed, output=output, workers=workers)
    kw["quad"] = _build(QuadParams, doc.get("quad"), "quad", lines)
    kw["ocp"] = _build(OcpConfig, doc.get("ocp"), "ocp", lines)
    sim = _build(SimConfig, doc.get("sim"), "sim", lines)
    kw["sim"] = sim
    if "stages" in doc:
        raw = doc["stages"]
        if not isinstance(raw, list) or not raw:
            raise lines.error("stages", "expected a non-empty list")
        stages = []
        for i, st in enumerate(raw):
            p = f"stages[{i}]"
            if not isinstance(st, dict):
                raise lines.error(p, "expected a mapping")
            st = dict(st)
            fid = _coerce(st.pop("fidelity", "simple"), str, f"{p}.fidelity", lines)
            eps = _coerce(st.pop("episodes", 30), int, f"{p}.episodes", lines)
            if eps < 0:
                raise lines.error(f"{p}.episodes", "must be non-negative")
            ov = _sim_overrides(st, p, lines)
            try:
                sim.replace(fidelity=fid, **ov)
            except ValueError as e:
                raise lines.error(p, str(e)) from None
            stages.append(StageConfig(fid, eps, tuple(sorted(ov.items()))))
        kw["stages"] = tuple(stages)
    else:
        kw["stages"] = ExperimentConfig.__dataclass_fields__["stages"].default
    kw["train"] = _build(TrainSection, doc.get("train"), "train", lines)
    kw["bounds"] = _build(ParamBounds, doc.get("bounds"), "bounds", lines)
    kw["reward"] = _build(RewardSection, doc.get("reward"), "reward", lines)
    kw["baseline"] = _build(BaselineSection, doc.get("baseline"), "baseline", lines)
    kw["evaluation"] = _build(EvaluationSection, doc.get("evaluation"), "evaluation", lines)
    cfg = ExperimentConfig(**kw)
    # cross-section invariants
    try:
        cfg.train_config()
        for s in cfg.stage_sims():
            cfg.reward.build(s.timeout)
        cfg.eval_sim()
    except ValueError as e:
        msg = str(e)
        sec = msg.split(".", 1)[0]
        raise lines.error(sec if sec in _TOP else "", msg) from None
    return cfg


def parse_config_text(text: str, filename: str = "<config>", base_dir: str = ".") -> ExperimentConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError(f"{filename}:{line}: malformed YAML: {getattr(e, 'problem', e)}") from None
    lines = _Lines(filename, root)
    if doc is None:
        raise lines.error("", "empty configuration")
    return config_from_dict(doc, filename, base_dir, lines)


def parse_config(path) -> ExperimentConfig:
    path = os.fspath(path)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"{path}:0: cannot read configuration: {e.strerror}") from None
    return parse_config_text(text, path, os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _section(obj, skip=()):
    return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.name not in skip}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "track": cfg.track,
        "method": cfg.method,
        "seed": cfg.seed,
        "output": cfg.output,
        "workers": cfg.workers,
        "quad": _section(cfg.quad),
        "ocp": _section(cfg.ocp),
        "sim": _section(cfg.sim),
        "stages": [{"fidelity": s.fidelity, "episodes": s.episodes, **{k: _plain(v) for k, v in s.overrides}}
                   for s in cfg.stages],
        "train": _section(cfg.train),
        "bounds": _section(cfg.bounds),
        "reward": _section(cfg.reward),
        "baseline": _section(cfg.baseline),
        "evaluation": _section(cfg.evaluation),
    }


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=False)
