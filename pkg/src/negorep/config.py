"""Experiment configuration: a single declarative file (YAML or JSON) plus dotted overrides."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .agents import AgentSpec
from .bridge import StandardRepSpec
from .losses import LossWeights
from .negotiator import PyramidConfig
from .scenegen import GridSpec, ModalitySpec

CONFIG_SCHEMA = "negorep.config/v1"


def default_modalities() -> dict[str, ModalitySpec]:
    return {
        "lidar64": ModalitySpec("lidar64", "sparse-ray", ray_count=128, sensing_range=22.0),
        "cam384": ModalitySpec("cam384", "dense-blur", blur_sigma=1.5, dropout_rate=0.1, sensing_range=18.0),
        "lidar32": ModalitySpec("lidar32", "sparse-ray", ray_count=64, sensing_range=20.0),
        "cam336": ModalitySpec("cam336", "dense-blur", blur_sigma=2.5, dropout_rate=0.15, sensing_range=16.0),
    }


def default_roster() -> dict[str, AgentSpec]:
    mods = default_modalities()
    return {
        "protocol": AgentSpec("protocol", mods["lidar64"], "convA", width=32, depth=3, stride=2),
        "m1": AgentSpec("m1", mods["lidar64"], "convA", width=24, depth=3, stride=2),
        "m2": AgentSpec("m2", mods["cam384"], "convB", width=32, depth=3, stride=4, kernel=5),
        "m3": AgentSpec("m3", mods["lidar32"], "convC", width=40, depth=3, stride=2),
        "m4": AgentSpec("m4", mods["cam336"], "convD", width=16, depth=2, stride=4),
    }


@dataclass
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 8  # scenes per step
    bridge_batch_size: int | None = None  # scenes per step for stage 1/2 and join; None -> batch_size
    steps_step0: int = 2000
    steps_stage1: int = 3000
    steps_stage2: int = 1000
    steps_join1: int = 3000
    steps_join2: int = 1000
    validate_every: int = 250

    @property
    def bridge_batch(self) -> int:
        return self.bridge_batch_size or self.batch_size


@dataclass
class DataConfig:
    n_train: int = 512
    n_val: int = 64
    n_test: int = 128
    n_agents: int = 2
    world_extent: float = 32.0
    grid_extent: float = 32.0
    min_objects: int = 5
    max_objects: int = 12


@dataclass
class Seeds:
    data: int = 0
    train: int = 0
    eval: int = 0


@dataclass
class Ablation:
    use_negotiator: bool = True
    use_stru: bool = True
    use_pragma: bool = True
    use_local_prompt: bool = True


@dataclass
class ExperimentConfig:
    roster: dict[str, AgentSpec] = field(default_factory=default_roster)
    alliance: list[str] = field(default_factory=lambda: ["m1", "m2"])
    new_agents: list[str] = field(default_factory=lambda: ["m3", "m4"])
    protocol: str = "protocol"
    standard: StandardRepSpec = field(default_factory=StandardRepSpec)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: Seeds = field(default_factory=Seeds)
    ablation: Ablation = field(default_factory=Ablation)
    noise_sigmas: list[float] = field(default_factory=lambda: [0.0, 0.3, 0.6])

    def __post_init__(self):
        self.validate()

    def validate(self):
        missing = [a for a in [*self.alliance, *self.new_agents] if a not in self.roster]
        if missing:
            raise ValueError(f"agents not in roster: {missing}")
        if not self.alliance:
            raise ValueError("alliance must name at least one agent")
        overlap = set(self.alliance) & set(self.new_agents)
        if overlap:
            raise ValueError(f"agents both in alliance and joining: {sorted(overlap)}")
        self.pyramid.validate(self.standard)
        sizes = {spec.input_size for spec in self.roster.values()}
        if sizes != {self.obs_grid_size}:
            raise ValueError(f"roster input sizes {sizes} do not match the observation grid {self.obs_grid_size}")

    @property
    def obs_grid_size(self) -> int:
        res = {spec.modality.grid_resolution for spec in self.roster.values()}
        if len(res) != 1:
            raise ValueError("all modalities must share one grid resolution")
        return GridSpec(self.data.grid_extent, res.pop()).size

    @property
    def label_grid(self) -> GridSpec:
        """Occupancy footprint matching the standard representation."""
        return GridSpec(self.data.grid_extent, self.standard.height / (2 * self.data.grid_extent))

    def modalities(self) -> list[ModalitySpec]:
        seen = {}
        for spec in self.roster.values():
            seen.setdefault(spec.modality.name, spec.modality)
        return list(seen.values())

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        def conv(x):
            if isinstance(x, float) and math.isinf(x):
                return "inf"
            if isinstance(x, dict):
                return {k: conv(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [conv(v) for v in x]
            return x

        d = {
            "schema": CONFIG_SCHEMA,
            "roster": {k: asdict(v) for k, v in self.roster.items()},
            "alliance": list(self.alliance),
            "new_agents": list(self.new_agents),
            "protocol": self.protocol,
        }
        for name in ("standard", "pyramid", "weights", "optim", "data", "seeds", "ablation"):
            d[name] = asdict(getattr(self, name))
        d["noise_sigmas"] = list(self.noise_sigmas)
        return conv(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        schema = d.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ValueError(f"unsupported config schema {schema!r}")
        kwargs: dict[str, Any] = {}
        if "roster" in d:
            roster = {}
            for k, v in d.pop("roster").items():
                m = dict(v["modality"])
                if m.get("sensing_range") == "inf":
                    m["sensing_range"] = math.inf
                roster[k] = AgentSpec(**{**v, "modality": ModalitySpec(**m)})
            kwargs["roster"] = roster
        for name, typ in (("standard", StandardRepSpec), ("pyramid", PyramidConfig), ("weights", LossWeights),
                          ("optim", OptimConfig), ("data", DataConfig), ("seeds", Seeds), ("ablation", Ablation)):
            if name in d:
                kwargs[name] = typ(**d.pop(name))
        for name in ("alliance", "new_agents", "protocol", "noise_sigmas"):
            if name in d:
                kwargs[name] = d.pop(name)
        if d:
            raise ValueError(f"unknown config keys: {sorted(d)}")
        return cls(**kwargs)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node:
                    raise KeyError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise KeyError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)


def desk_config(**overrides) -> ExperimentConfig:
    """The single-CPU preset used by the bundled experiments and acceptance tests."""
    cfg = ExperimentConfig(standard=StandardRepSpec(32, 32, 32), pyramid=PyramidConfig(levels=2, estimator_hidden=32),
                           optim=OptimConfig(bridge_batch_size=4))
    return cfg.with_overrides(overrides) if overrides else cfg


def parse_override(text: str) -> tuple[str, Any]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise ValueError(f"override must look like key=value, got {text!r}")
    return key.strip(), yaml.safe_load(raw)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    if path is None:
        cfg = desk_config()
    else:
        text = Path(path).read_text()
        cfg = ExperimentConfig.from_dict(yaml.safe_load(text) or {})
    if overrides:
        cfg = cfg.with_overrides(dict(parse_override(o) for o in overrides))
    return cfg


def save_config(cfg: ExperimentConfig, path: str | Path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
