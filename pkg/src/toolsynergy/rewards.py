"""Trajectory rewards: Brier term, majority-override term and format term.

Rewards read the rendered transcript text, the same way a rule-based grader
would read model output, so a corrupted answer or tag is penalised no matter
how the trajectory object was produced.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from typing import Iterable

from .protocol import RolloutBudget, check_format, parse_probability
from .simenv import ToolOutput

_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_RESPONSE_RE = re.compile(r"<tool_response>\S+ response: (.*?)</tool_response>", re.DOTALL)

UNDEFINED = None


@dataclass(frozen=True)
class RewardConfig:
    override_alpha: float = 0.1
    format_alpha: float = 0.1
    threshold: float = 0.5
    tie_rule: str = "neg"
    loss: str = "abs"

    def __post_init__(self) -> None:
        if self.override_alpha < 0 or self.format_alpha < 0:
            raise ValueError("reward magnitudes must be nonnegative")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.tie_rule not in ("neg", "pos"):
            raise ValueError(f"unknown tie rule {self.tie_rule!r}")
        if self.loss not in ("abs", "squared"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass(frozen=True)
class RewardBreakdown:
    brier: float
    override: float
    format: float
    overall: float
    n_valid: int
    majority: int | None
    answer: float | None
    correct: bool

    def to_json(self) -> dict:
        return asdict(self)


def correctness(p: float, y: int, config: RewardConfig = RewardConfig()) -> bool:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p!r} outside [0, 1]")
    err = abs(p - y)
    loss = err if config.loss == "abs" else err * err
    return loss < config.threshold


def binarize(p: float) -> int:
    return 1 if p > 0.5 else 0


def majority_vote(outputs: Iterable[ToolOutput | float], tie_rule: str = "neg") -> int | None:
    votes = []
    for o in outputs:
        if isinstance(o, ToolOutput):
            if not o.valid:
                continue
            o = o.p
        votes.append(binarize(o))
    if not votes:
        return UNDEFINED
    pos = sum(votes)
    neg = len(votes) - pos
    if pos == neg:
        return 1 if tie_rule == "pos" else 0
    return 1 if pos > neg else 0


def brier_reward(p_hat: float | None, y: int, n_valid: int, parseable: bool = True) -> float:
    if not parseable or p_hat is None or not 0.0 <= p_hat <= 1.0 or n_valid <= 0:
        return 0.0
    return 1.0 - (p_hat - y) ** 2


def override_reward(p_hat: float | None, majority: int | None, y: int, config: RewardConfig = RewardConfig()) -> float:
    if majority is None or p_hat is None or not 0.0 <= p_hat <= 1.0:
        return 0.0
    policy_ok = correctness(p_hat, y, config)
    majority_ok = correctness(float(majority), y, config)
    if policy_ok and not majority_ok:
        return config.override_alpha
    if majority_ok and not policy_ok:
        return -config.override_alpha
    return 0.0


def format_reward(text: str, budget: RolloutBudget, config: RewardConfig = RewardConfig()) -> float:
    return config.format_alpha if check_format(text, budget) else 0.0


def extract_evidence(text: str) -> tuple[float | None, list[float]]:
    """Lenient scan of a transcript: last answer value and valid tool probabilities."""
    answers = _ANSWER_RE.findall(text)
    p_hat = parse_probability(answers[-1]) if answers else None
    if p_hat is not None and not 0.0 <= p_hat <= 1.0:
        p_hat = None
    probs = []
    for obs in _RESPONSE_RE.findall(text):
        v = parse_probability(obs)
        if v is not None and 0.0 <= v <= 1.0:
            probs.append(v)
    return p_hat, probs


def reward_from_text(text: str, label: int, config: RewardConfig, budget: RolloutBudget) -> RewardBreakdown:
    p_hat, probs = extract_evidence(text)
    majority = majority_vote(probs, config.tie_rule)
    brier = brier_reward(p_hat, label, len(probs), p_hat is not None)
    override = override_reward(p_hat, majority, label, config)
    fmt = format_reward(text, budget, config)
    return RewardBreakdown(
        brier=brier,
        override=override,
        format=fmt,
        overall=brier + override + fmt,
        n_valid=len(probs),
        majority=majority,
        answer=p_hat,
        correct=p_hat is not None and correctness(p_hat, label, config),
    )


def overall_reward(trajectory, label: int, config: RewardConfig, budget: RolloutBudget) -> RewardBreakdown:
    return reward_from_text(trajectory.text, label, config, budget)
