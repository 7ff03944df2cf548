"""Run configuration: one TOML file with [env], [model], [train] and [analysis] sections."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .envgen import TOPOLOGIES
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    topology: str = "square4"
    width: int = 10
    height: int = 10
    n_stim: int = 45
    # environments written by ``generate``; they share the lattice
    n_envs: int = 1
    seed: int = 0
    episode_T: int = 200

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        if min(self.width, self.height, self.n_envs, self.episode_T) < 1 or self.n_stim < 2:
            raise ValueError("env sizes must be positive and n_stim >= 2")


@dataclass(frozen=True)
class AnalysisConfig:
    # 0 means 50 steps per node
    n_steps: int = 0
    sigma: float = 1.0
    place_sigma: float = 0.0
    threshold_frac: float = 0.2
    active_frac: float = 0.01
    n_shuffles: int = 100
    n_envs: int = 2
    n_perm: int = 1000
    seed: int = 0
    export_maps: bool = True


# keys owned by [env] that the model and train configs also need
_DERIVED = {"model": ("n_stim", "n_actions"), "train": ("topology", "width", "height")}


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self) -> dict:
        out = {}
        for name in ("env", "model", "train", "analysis"):
            d = dataclasses.asdict(getattr(self, name))
            for k in _DERIVED.get(name, ()):
                d.pop(k)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def _build(cls, section: str, values: dict, extra: dict):
    known = {f.name for f in dataclasses.fields(cls)} - set(_DERIVED.get(section, ()))
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    kwargs = dict(values)
    if "loss_weights" in kwargs:
        kwargs["loss_weights"] = tuple(kwargs["loss_weights"])
    try:
        return cls(**kwargs, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    unknown = sorted(set(data) - {"env", "model", "train", "analysis", "manifest"})
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    for k, v in data.items():
        if not isinstance(v, dict):
            raise ConfigError(f"{k} must be a section")
    env = _build(EnvConfig, "env", data.get("env", {}), {})
    n_actions = len(TOPOLOGIES[env.topology])
    model = _build(ModelConfig, "model", data.get("model", {}), {"n_stim": env.n_stim, "n_actions": n_actions})
    train = _build(TrainConfig, "train", data.get("train", {}),
                   {"topology": env.topology, "width": env.width, "height": env.height})
    analysis = _build(AnalysisConfig, "analysis", data.get("analysis", {}), {})
    return RunConfig(env, model, train, analysis)


def load_config(path: str | Path | None) -> RunConfig:
    """Read a TOML config; ``None`` gives the defaults. Manifests load too."""
    if path is None:
        return config_from_dict({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)
