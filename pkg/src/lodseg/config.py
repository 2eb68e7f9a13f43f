"""Experiment configuration files (YAML) and ``key=value`` overrides."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .augmentation import AugmentationConfigError, TransformSpec
from .network import ConfigError, LODConfig
from .phantom import PhantomError, RosterConfig
from .trainer import TrainConfig

SECTIONS = ("network", "training", "augmentation", "manifest", "phantom", "evaluation", "selection")


def bundled_config(name: str = "default") -> Path:
    return Path(str(resources.files("lodseg") / "configs" / f"{name}.yaml"))


def load_yaml(path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _parse_value(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" as a string
        try:
            return float(value)
        except ValueError:
            pass
    return value


def apply_overrides(cfg: dict, overrides) -> dict:
    """Return a copy of ``cfg`` with dotted ``key=value`` overrides applied.

    Values are parsed as YAML scalars/lists, so ``training.initial_lr=1e-3``
    gives a float and ``network.channels_per_level=[[8,16],[8,16]]`` a list.
    """
    out = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"override {item!r}: empty key component")
        node = out
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not a section")
            node = nxt
        node[parts[-1]] = _parse_value(raw)
    return out


@dataclass
class ExperimentConfig:
    network: LODConfig = field(default_factory=LODConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    manifest: str | None = None
    phantom: RosterConfig = field(default_factory=RosterConfig)
    evaluation: dict = field(default_factory=lambda: {"splits": ["test_int", "test_ext"],
                                                      "level": 1, "bonferroni": 1})
    selection: dict = field(default_factory=lambda: {"drop_threshold": 0.01, "seed": 0,
                                                     "sweeps": {}})
    source: str | None = None

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "training": self.training.to_dict(),
            "manifest": self.manifest,
            "phantom": dataclasses.asdict(self.phantom),
            "evaluation": dict(self.evaluation),
            "selection": dict(self.selection),
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True, default_flow_style=None)
        return path


def _section(d: dict, name: str) -> dict:
    v = d.get(name) or {}
    if not isinstance(v, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return v


def parse(d: dict, source=None) -> ExperimentConfig:
    """Build and validate an ExperimentConfig; all problems are reported together."""
    problems = []
    unknown = sorted(set(d) - set(SECTIONS))
    if unknown:
        problems.append(f"unknown top-level keys: {unknown}")
    try:
        net = LODConfig.from_dict(_section(d, "network"))
        problems += net.problems()
    except (ConfigError, TypeError) as exc:
        problems.append(f"network: {exc}")
        net = LODConfig()
    train_d = dict(_section(d, "training"))
    if "augmentation" in d and "augmentation" not in train_d:
        train_d["augmentation"] = d["augmentation"] or []
    try:
        train = TrainConfig.from_dict(train_d)
        problems += train.problems(net.levels)
    except (ConfigError, TypeError) as exc:
        problems.append(f"training: {exc}")
        train = TrainConfig()
    try:
        roster = RosterConfig(**_section(d, "phantom"))
        roster.validate()
    except (PhantomError, TypeError) as exc:
        problems.append(f"phantom: {exc}")
        roster = RosterConfig()
    defaults = ExperimentConfig()
    evaluation = {**defaults.evaluation, **_section(d, "evaluation")}
    selection = {**defaults.selection, **_section(d, "selection")}
    for name in selection.get("sweeps", {}) or {}:
        try:
            TransformSpec(name)
        except AugmentationConfigError as exc:
            problems.append(f"selection: {exc}")
    if problems:
        raise ConfigError("; ".join(problems))
    return ExperimentConfig(net, train, d.get("manifest"), roster, evaluation, selection,
                            None if source is None else str(source))


def load(path=None, overrides=()) -> ExperimentConfig:
    """Read ``path`` (default: the bundled full-scale config), apply overrides, validate.

    A bare name such as ``phantom`` selects a bundled config.
    """
    path = bundled_config() if path is None else Path(path)
    if not path.exists() and not path.suffix and bundled_config(str(path)).exists():
        path = bundled_config(str(path))
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse(apply_overrides(load_yaml(path), overrides), source=path)
