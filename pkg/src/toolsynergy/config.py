"""Experiment configuration: a TOML file in, a frozen JSON snapshot out."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .egs import EGSConfig
from .grpo import TrainConfig
from .protocol import RolloutBudget
from .rewards import RewardConfig
from .simenv import ConfigError, DatasetConfig, ToolPool, ToolProfile, disjoint_expert_pool


@dataclass(frozen=True)
class PoolConfig:
    kind: str = "disjoint_experts"
    n_tools: int = 3
    home_accuracy: float = 0.95
    away_accuracy: float = 0.5
    sharpness: float = 4.0
    dropout: float = 0.0
    coupling: str = "shared"
    tools: tuple = ()  # explicit tool tables when kind == "explicit"

    def build(self, n_regions: int, n_queries: int) -> ToolPool:
        if self.kind == "disjoint_experts":
            if self.n_tools != n_regions:
                raise ConfigError("a disjoint-expert pool needs one tool per region")
            return disjoint_expert_pool(
                self.n_tools,
                n_queries,
                self.home_accuracy,
                self.away_accuracy,
                self.sharpness,
                self.dropout,
                self.coupling,
            )
        if self.kind == "explicit":
            if not self.tools:
                raise ConfigError("explicit pool needs [[pool.tools]] entries")
            profiles = []
            for k, t in enumerate(self.tools):
                acc = np.asarray(t["accuracy"], dtype=float)
                if acc.shape != (n_regions, n_queries):
                    raise ConfigError(f"tool {k}: accuracy table must be {n_regions}x{n_queries}")
                profiles.append(
                    ToolProfile(k, acc, float(t.get("sharpness", self.sharpness)), float(t.get("dropout", self.dropout)))
                )
            return ToolPool(profiles, coupling=self.coupling)
        raise ConfigError(f"unknown pool kind {self.kind!r}")


@dataclass(frozen=True)
class PolicyConfig:
    n_bins: int = 21
    interactions: bool = True


@dataclass(frozen=True)
class AblationConfig:
    iterations: int = 75
    split: str = "test"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = DatasetConfig()
    pool: PoolConfig = PoolConfig()
    budget: RolloutBudget = RolloutBudget()
    reward: RewardConfig = RewardConfig()
    egs: EGSConfig = EGSConfig()
    train: TrainConfig = TrainConfig()
    policy: PolicyConfig = PolicyConfig()
    ablate: AblationConfig = AblationConfig()
    dataset_seed: int = 0
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        self.dataset.validate()
        self.pool.build(self.dataset.n_regions, self.dataset.n_queries)
        if not self.seeds:
            raise ConfigError("seed set is empty")
        if self.policy.n_bins < 2:
            raise ConfigError("answer grid needs at least two points")
        return self

    def to_json(self) -> dict:
        return _jsonable(asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_SECTIONS = {
    "dataset": DatasetConfig,
    "pool": PoolConfig,
    "budget": RolloutBudget,
    "reward": RewardConfig,
    "egs": EGSConfig,
    "train": TrainConfig,
    "policy": PolicyConfig,
    "ablate": AblationConfig,
}


def _build(cls, raw: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"[{cls.__name__}] unknown keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{cls.__name__}] {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    exp = raw.pop("experiment", {})
    parts = {}
    for name, cls in _SECTIONS.items():
        parts[name] = _build(cls, raw.pop(name, {}))
    if raw:
        raise ConfigError(f"unknown sections: {sorted(raw)}")
    extra = set(exp) - {"dataset_seed", "seeds", "out_dir"}
    if extra:
        raise ConfigError(f"[experiment] unknown keys: {sorted(extra)}")
    cfg = ExperimentConfig(
        **parts,
        dataset_seed=int(exp.get("dataset_seed", 0)),
        seeds=tuple(int(s) for s in exp.get("seeds", (0,))),
        out_dir=str(exp.get("out_dir", "runs/default")),
    )
    return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(raw)


def load_frozen(path: str | Path) -> ExperimentConfig:
    """Rebuild a config from its frozen JSON snapshot."""
    obj = json.loads(Path(path).read_text())
    exp = {k: obj.pop(k) for k in ("dataset_seed", "seeds", "out_dir")}
    obj["experiment"] = exp
    return from_dict(obj)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not np.isfinite(x):
        return str(x)
    return x


B1_TOML = """\
# Designed-complementarity benchmark: three tools, each an expert on one region.
[experiment]
dataset_seed = 7
seeds = [0, 1, 2, 3, 4]
out_dir = "runs/b1"

[dataset]
n_instances = 3000
region_masses = [0.3333333333333333, 0.3333333333333333, 0.3333333333333334]
n_queries = 2
feature_noise = 0.1

[pool]
kind = "disjoint_experts"
n_tools = 3
home_accuracy = 0.95
away_accuracy = 0.5
coupling = "shared"

[budget]
max_turns = 4
max_parallel_calls = 6

[train]
group_size = 16
batch_size = 64
iterations = 300
learning_rate = 2.0
checkpoint_every = 50

[ablate]
iterations = 75
"""
