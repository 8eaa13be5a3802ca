"""Entropy-guided stratified batch sampling.

Training instances are grouped by how much the tool pool disagrees about them
(binary entropy of the fraction of correct tools). Stratum sampling mass is
proportional to entropy, except the consensus stratum which gets a fixed floor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rewards import RewardConfig, correctness
from .simenv import Dataset, ToolOutputTable


@dataclass(frozen=True)
class EGSConfig:
    zero_floor: float = 0.05
    enabled: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.zero_floor < 1.0:
            raise ValueError("zero-entropy floor must lie in [0, 1)")


def count_correct_tools(
    instance_id: int, label: int, table: ToolOutputTable, config: RewardConfig = RewardConfig()
) -> int:
    n = 0
    for k in range(table.n_tools):
        if table.valid[instance_id, k] and correctness(float(table.p[instance_id, k]), label, config):
            n += 1
    return n


def vote_entropy(n_correct: int, n_tools: int) -> float:
    if n_tools < 1 or not 0 <= n_correct <= n_tools:
        raise ValueError(f"need 0 <= n_correct <= K, got {n_correct} of {n_tools}")
    frac = n_correct / n_tools
    h = 0.0
    for q in (frac, 1.0 - frac):
        if q > 0.0:
            h -= q * math.log(q)
    return h


@dataclass
class StratumIndex:
    ids: np.ndarray  # training ids, aligned with n_correct / entropy
    n_correct: np.ndarray
    entropy: np.ndarray
    levels: np.ndarray  # entropy level of each stratum, increasing
    strata: list[np.ndarray]
    probs: np.ndarray
    n_tools: int
    zero_floor: float

    def to_json(self) -> dict:
        return {
            "n_tools": self.n_tools,
            "zero_floor": self.zero_floor,
            "levels": self.levels.tolist(),
            "sizes": [int(s.size) for s in self.strata],
            "probs": self.probs.tolist(),
            "n_correct_histogram": np.bincount(self.n_correct, minlength=self.n_tools + 1).tolist(),
        }


def stratum_probabilities(levels: np.ndarray, sizes: np.ndarray, zero_floor: float) -> np.ndarray:
    levels = np.asarray(levels, dtype=float)
    nonempty = np.asarray(sizes) > 0
    probs = np.zeros(levels.size)
    zero = nonempty & (levels == 0.0)
    pos = nonempty & (levels > 0.0)
    if not pos.any():
        probs[zero] = 1.0 / zero.sum()
        return probs
    remaining = 1.0
    if zero.any():
        probs[zero] = zero_floor / zero.sum()
        remaining -= zero_floor
    probs[pos] = remaining * levels[pos] / levels[pos].sum()
    return probs


def stratify(
    dataset: Dataset,
    table: ToolOutputTable,
    reward_config: RewardConfig = RewardConfig(),
    egs_config: EGSConfig = EGSConfig(),
    split: str = "train",
) -> StratumIndex:
    ids = dataset.split(split)
    if ids.size == 0:
        raise ValueError(f"split {split!r} is empty")
    k = table.n_tools
    n_correct = np.array([count_correct_tools(int(i), int(dataset.labels[i]), table, reward_config) for i in ids])
    # H is symmetric in n_c <-> K - n_c, so key strata on the smaller count
    keys = np.minimum(n_correct, k - n_correct)
    entropy = np.array([vote_entropy(int(n), k) for n in n_correct])
    all_keys = np.arange(k // 2 + 1)
    levels = np.array([vote_entropy(int(j), k) for j in all_keys])
    strata = [ids[keys == j] for j in all_keys]
    sizes = np.array([s.size for s in strata])
    probs = stratum_probabilities(levels, sizes, egs_config.zero_floor)
    return StratumIndex(ids, n_correct, entropy, levels, strata, probs, k, egs_config.zero_floor)


def sample_batch(index: StratumIndex, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Pick a stratum by its probability, then a member uniformly; with replacement."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    which = rng.choice(index.probs.size, size=batch_size, p=index.probs)
    out = np.empty(batch_size, dtype=np.int64)
    for j in range(index.probs.size):
        slots = np.flatnonzero(which == j)
        if slots.size:
            out[slots] = index.strata[j][rng.integers(0, index.strata[j].size, size=slots.size)]
    return out


def sample_uniform(ids: np.ndarray, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return ids[rng.integers(0, ids.size, size=batch_size)]
