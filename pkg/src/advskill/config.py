"""Run configuration: presets plus an INI-style override file.

File grammar (read with :mod:`configparser`)::

    # comment
    [run]
    seed = 3
    preset = desk
    out = runs/demo

    [pretrain]
    iterations = 50
    policy_hidden = [256, 128]

Sections are ``run``, ``env``, ``data``, ``pretrain``, ``task`` and ``eval``.
Each value is parsed as JSON when possible (numbers, lists, booleans,
quoted strings) and otherwise kept as a bare string. Keys must name a field
of the section's config; anything else is rejected. The preset supplies the
defaults; keys in the file override them; command-line flags override both.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .env import EnvConfig
from .errors import ConfigError
from .motiondata import CLIP_KINDS
from .pretrain import PretrainRunConfig
from .tasktrain import TaskTrainConfig

PRESETS = ("desk", "paper")
SECTIONS = ("run", "env", "data", "pretrain", "task", "eval")


@dataclass(frozen=True)
class DataConfig:
    kinds: tuple = CLIP_KINDS
    clips_per_kind: int = 1
    n_frames: int = 120
    path: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        unknown = set(self.kinds) - set(CLIP_KINDS)
        if unknown:
            raise ConfigError(f"unknown clip kinds {sorted(unknown)}")


@dataclass(frozen=True)
class EvalConfig:
    coverage_trajs: int = 200
    traj_len: int = 90
    transition_trajs: int = 200
    dest_len: int = 90
    recovery_trials: int = 100
    impulse_min: float = 2.0
    impulse_max: float = 6.0
    recovery_timeout: int = 300

    def __post_init__(self):
        if not 0 <= self.impulse_min <= self.impulse_max:
            raise ConfigError("need 0 <= impulse_min <= impulse_max")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    preset: str = "desk"
    out: str = "runs/default"
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainRunConfig = field(default_factory=PretrainRunConfig)
    task: TaskTrainConfig = field(default_factory=TaskTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def pretrain_config(self) -> PretrainRunConfig:
        return replace(self.pretrain, env=self.env, seed=self.seed, preset=self.preset)

    def task_config(self, task: str | None = None) -> TaskTrainConfig:
        return replace(self.task, seed=self.seed, **({"task": task} if task else {}))


# values that differ from the dataclass defaults
_PRESET_OVERRIDES = {
    "desk": {},
    "paper": {
        "pretrain": {
            "n_envs": 4096, "steps_per_iter": 32, "latent_dim": 64,
            "policy_hidden": [1024, 1024, 512], "value_hidden": [1024, 1024, 512],
            "disc_hidden": [1024, 1024, 512], "disc_batch": 4096, "minibatches": 8, "stepsize": 2e-5,
            "iterations": 76294,
        },
        "task": {"n_envs": 2048, "hidden": [1024, 512], "minibatches": 8, "stepsize": 2e-5},
        "data": {},
    },
}

_RESERVED = {"pretrain": {"env", "seed", "preset"}, "task": {"seed"}}


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


_SECTION_TYPES = {"env": EnvConfig, "data": DataConfig, "pretrain": PretrainRunConfig, "task": TaskTrainConfig,
                  "eval": EvalConfig}


def read_config_file(path) -> dict[str, dict]:
    """Parse an override file into ``{section: {key: value}}`` with key validation."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=None)
    cp.optionxform = str
    try:
        cp.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out: dict[str, dict] = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]; expected one of {SECTIONS}")
        allowed = {"seed", "preset", "out"} if section == "run" else \
            _field_names(_SECTION_TYPES[section]) - _RESERVED.get(section, set())
        values = {}
        for key, raw in cp.items(section):
            if key not in allowed:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
            values[key] = _parse_value(raw)
        out[section] = values
    return out


def build_config(path=None, seed: int | None = None, preset: str | None = None, out: str | None = None) -> RunConfig:
    """Preset defaults, then file overrides, then explicit arguments."""
    file_values = read_config_file(path) if path else {}
    run = file_values.get("run", {})
    preset = preset or run.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    seed = seed if seed is not None else run.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    out = out or str(run.get("out", "runs/default"))
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        values = dict(_PRESET_OVERRIDES[preset].get(name, {}))
        values.update(file_values.get(name, {}))
        try:
            sections[name] = cls(**values)
        except TypeError as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    return RunConfig(seed=seed, preset=preset, out=out, **sections)
