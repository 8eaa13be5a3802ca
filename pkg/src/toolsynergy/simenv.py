"""Synthetic diagnostic instances and a pool of imperfect, complementary tools.

Every tool output is a pure function of ``(dataset seed, instance id, tool id)``
so that stratification, training and evaluation all see the same responses.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMA_VERSION = 1

# salts keep the per-purpose hash streams disjoint
_SALT_CORRECT = 0x11
_SALT_SHARP = 0x22
_SALT_DROPOUT = 0x33


class ConfigError(ValueError):
    """Raised for invalid generation or pool configuration."""


@dataclass(frozen=True)
class DatasetConfig:
    n_instances: int = 3000
    region_masses: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    n_queries: int = 2
    feature_noise: float = 0.1
    positive_rate: float = 0.5
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    @property
    def n_regions(self) -> int:
        return len(self.region_masses)

    def validate(self) -> None:
        masses = np.asarray(self.region_masses, dtype=float)
        if masses.ndim != 1 or masses.size == 0 or np.any(masses < 0):
            raise ConfigError("region masses must be a nonempty list of nonnegative reals")
        if abs(masses.sum() - 1.0) > 1e-9:
            raise ConfigError(f"region masses sum to {masses.sum()!r}, expected 1")
        if self.n_queries < 1:
            raise ConfigError("need at least one query")
        if self.n_instances < 1:
            raise ConfigError("need at least one instance")
        if self.feature_noise < 0:
            raise ConfigError("feature noise must be nonnegative")
        if not 0.0 <= self.positive_rate <= 1.0:
            raise ConfigError("positive rate must lie in [0, 1]")
        fr = np.asarray(self.split_fractions, dtype=float)
        if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
            raise ConfigError("split fractions must be three nonnegative reals summing to 1")


@dataclass(frozen=True)
class Instance:
    id: int
    features: np.ndarray
    query: int
    label: int
    region: int

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.id == other.id
            and self.query == other.query
            and self.label == other.label
            and self.region == other.region
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass
class Dataset:
    seed: int
    config: DatasetConfig
    features: np.ndarray  # (N, R)
    queries: np.ndarray  # (N,)
    labels: np.ndarray  # (N,)
    regions: np.ndarray  # (N,)
    splits: dict[str, np.ndarray]  # name -> sorted instance ids

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, i: int) -> Instance:
        return Instance(
            id=int(i),
            features=self.features[i],
            query=int(self.queries[i]),
            label=int(self.labels[i]),
            region=int(self.regions[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_queries(self) -> int:
        return self.config.n_queries

    def split(self, name: str) -> np.ndarray:
        try:
            return self.splits[name]
        except KeyError:
            raise KeyError(f"unknown split {name!r}; have {sorted(self.splits)}") from None

    def to_json(self) -> dict:
        cfg = asdict(self.config)
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "dataset",
            "seed": self.seed,
            "config": cfg,
            "features": self.features.tolist(),
            "queries": self.queries.tolist(),
            "labels": self.labels.tolist(),
            "regions": self.regions.tolist(),
            "splits": {k: v.tolist() for k, v in self.splits.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Dataset":
        _check_schema(obj, "dataset")
        cfg = obj["config"]
        config = DatasetConfig(
            n_instances=cfg["n_instances"],
            region_masses=tuple(cfg["region_masses"]),
            n_queries=cfg["n_queries"],
            feature_noise=cfg["feature_noise"],
            positive_rate=cfg["positive_rate"],
            split_fractions=tuple(cfg["split_fractions"]),
        )
        return cls(
            seed=int(obj["seed"]),
            config=config,
            features=np.asarray(obj["features"], dtype=float).reshape(len(obj["labels"]), -1),
            queries=np.asarray(obj["queries"], dtype=np.int64),
            labels=np.asarray(obj["labels"], dtype=np.int64),
            regions=np.asarray(obj["regions"], dtype=np.int64),
            splits={k: np.asarray(v, dtype=np.int64) for k, v in obj["splits"].items()},
        )


def generate_dataset(config: DatasetConfig, seed: int) -> Dataset:
    """Draw a dataset whose observable features are noisy one-hot region indicators."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA7A]))
    n, r = config.n_instances, config.n_regions
    masses = np.asarray(config.region_masses, dtype=float)
    regions = rng.choice(r, size=n, p=masses / masses.sum())
    queries = rng.integers(0, config.n_queries, size=n)
    labels = (rng.random(n) < config.positive_rate).astype(np.int64)
    features = np.eye(r)[regions] + config.feature_noise * rng.standard_normal((n, r))

    perm = rng.permutation(n)
    n_train = int(round(config.split_fractions[0] * n))
    n_val = int(round(config.split_fractions[1] * n))
    splits = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }
    return Dataset(
        seed=int(seed),
        config=config,
        features=features,
        queries=queries.astype(np.int64),
        labels=labels,
        regions=regions.astype(np.int64),
        splits=splits,
    )


@dataclass(frozen=True)
class ToolProfile:
    """Accuracy table ``accuracy[region][query]`` plus output sharpness for one tool."""

    tool_id: int
    accuracy: np.ndarray  # (R, Q)
    sharpness: float = 4.0
    dropout: float = 0.0

    @property
    def name(self) -> str:
        return f"tool_{self.tool_id}"


@dataclass(frozen=True)
class ToolOutput:
    tool_id: int
    p: float | None
    valid: bool = True


@dataclass
class ToolPool:
    tools: list[ToolProfile]
    # "independent": each tool's correctness draw is hashed with its own id.
    # "shared": a latent per-instance difficulty gates every tool (an instance
    # too hard for the strongest tool defeats them all), then each tool is
    # right with an independent chance a_k / a_max. Marginals stay a_k.
    coupling: str = "independent"

    def __post_init__(self) -> None:
        if self.coupling not in ("independent", "shared"):
            raise ConfigError(f"unknown coupling {self.coupling!r}")
        shapes = {t.accuracy.shape for t in self.tools}
        if len(shapes) > 1:
            raise ConfigError("all tools must share one (region, query) accuracy shape")
        for t in self.tools:
            if np.any(t.accuracy < 0) or np.any(t.accuracy > 1):
                raise ConfigError(f"tool {t.tool_id}: accuracy entries must lie in [0, 1]")
            if not t.sharpness > 0:
                raise ConfigError(f"tool {t.tool_id}: sharpness must be positive")
            if not 0.0 <= t.dropout <= 1.0:
                raise ConfigError(f"tool {t.tool_id}: dropout must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.tools)

    def __getitem__(self, k: int) -> ToolProfile:
        if not 0 <= k < len(self.tools):
            raise LookupError(f"unknown tool id {k}")
        return self.tools[k]

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tools]

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "pool",
            "coupling": self.coupling,
            "tools": [
                {
                    "tool_id": t.tool_id,
                    "accuracy": t.accuracy.tolist(),
                    "sharpness": _float_or_inf(t.sharpness),
                    "dropout": t.dropout,
                }
                for t in self.tools
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ToolPool":
        _check_schema(obj, "pool")
        tools = [
            ToolProfile(
                tool_id=int(t["tool_id"]),
                accuracy=np.asarray(t["accuracy"], dtype=float),
                sharpness=float(t["sharpness"]),
                dropout=float(t["dropout"]),
            )
            for t in obj["tools"]
        ]
        return cls(tools=tools, coupling=obj.get("coupling", "independent"))


def disjoint_expert_pool(
    n_tools: int,
    n_queries: int = 1,
    home_accuracy: float = 0.95,
    away_accuracy: float = 0.5,
    sharpness: float = 4.0,
    dropout: float = 0.0,
    coupling: str = "shared",
) -> ToolPool:
    """Tool ``k`` is an expert on region ``k`` and near chance elsewhere."""
    tools = []
    for k in range(n_tools):
        acc = np.full((n_tools, n_queries), float(away_accuracy))
        acc[k, :] = home_accuracy
        tools.append(ToolProfile(k, acc, sharpness=sharpness, dropout=dropout))
    return ToolPool(tools, coupling=coupling)


def _uniform(seed: int, instance_id: int, tool_id: int, salt: int) -> float:
    # SeedSequence is a well-mixed hash of its entropy words
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(instance_id), int(tool_id) + 1, salt])
    word = ss.generate_state(2, dtype=np.uint32)
    return ((int(word[0]) << 21) ^ (int(word[1]) >> 11)) / float(1 << 53)


def tool_invoke(pool: ToolPool, k: int, instance: Instance, dataset_seed: int) -> ToolOutput:
    tool = pool[k]
    if tool.dropout > 0 and _uniform(dataset_seed, instance.id, k, _SALT_DROPOUT) < tool.dropout:
        return ToolOutput(k, None, valid=False)

    a = float(tool.accuracy[instance.region, instance.query])
    if pool.coupling == "shared":
        a_max = max(float(t.accuracy[instance.region, instance.query]) for t in pool.tools)
        easy = _uniform(dataset_seed, instance.id, -1, _SALT_CORRECT) < a_max
        correct = easy and a_max > 0 and _uniform(dataset_seed, instance.id, k, _SALT_CORRECT) < a / a_max
    else:
        correct = _uniform(dataset_seed, instance.id, k, _SALT_CORRECT) < a

    if math.isinf(tool.sharpness):
        c = 1.0
    else:
        u = 1.0 - _uniform(dataset_seed, instance.id, k, _SALT_SHARP)  # (0, 1]
        c = 0.5 + 0.5 * u ** (1.0 / tool.sharpness)
    y = instance.label
    target = y if correct else 1 - y
    p = target * c + (1 - target) * (1.0 - c)
    return ToolOutput(k, min(1.0, max(0.0, p)), valid=True)


@dataclass
class ToolOutputTable:
    """Precomputed outputs for every (instance, tool); invalid cells hold NaN."""

    p: np.ndarray  # (N, K)
    valid: np.ndarray  # (N, K) bool
    names: list[str] = field(default_factory=list)

    @property
    def n_tools(self) -> int:
        return int(self.p.shape[1])

    def __len__(self) -> int:
        return int(self.p.size)

    def get(self, instance_id: int, k: int) -> ToolOutput:
        if not 0 <= k < self.n_tools:
            raise LookupError(f"unknown tool id {k}")
        if not self.valid[instance_id, k]:
            return ToolOutput(k, None, valid=False)
        return ToolOutput(k, float(self.p[instance_id, k]), valid=True)

    def subset(self, tools: Sequence[int]) -> "ToolOutputTable":
        idx = list(tools)
        return ToolOutputTable(self.p[:, idx].copy(), self.valid[:, idx].copy(), [self.names[i] for i in idx])

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "tool_table",
            "names": self.names,
            "p": [[float(v) if ok else None for v, ok in zip(row, vrow)] for row, vrow in zip(self.p, self.valid)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ToolOutputTable":
        _check_schema(obj, "tool_table")
        rows = obj["p"]
        valid = np.array([[v is not None for v in row] for row in rows], dtype=bool)
        p = np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=float)
        return cls(p=p, valid=valid, names=list(obj["names"]))


def precompute_tool_table(pool: ToolPool, dataset: Dataset) -> ToolOutputTable:
    n, k = len(dataset), len(pool)
    p = np.full((n, k), np.nan)
    valid = np.zeros((n, k), dtype=bool)
    for inst in dataset:
        for j in range(k):
            out = tool_invoke(pool, j, inst, dataset.seed)
            valid[inst.id, j] = out.valid
            if out.valid:
                p[inst.id, j] = out.p
    return ToolOutputTable(p=p, valid=valid, names=pool.names)


def save_json(obj: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, allow_nan=False))
    return path


def load_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def _check_schema(obj: dict, kind: str) -> None:
    if obj.get("kind") != kind:
        raise ValueError(f"expected a {kind} document, got {obj.get('kind')!r}")
    if obj.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {obj.get('schema_version')!r}")


def _float_or_inf(x: float):
    return "inf" if math.isinf(x) else x
