"""Linear-softmax tool-use policy over atomic actions.

Each step the policy picks one of ``CALL(k)``, ``END_TURN`` or ``ANSWER(b)``.
Calls made in a turn are executed together when the turn ends; an answer
always occupies its own turn.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .protocol import (
    AnswerMsg,
    RolloutBudget,
    ToolCallMsg,
    ToolResponseMsg,
    Transcript,
    Turn,
    format_probability,
    render,
    tool_schemas,
)
from .simenv import Instance, ToolOutput, ToolOutputTable

SENTINEL = -1.0
INVALID_OBSERVATION = 0.5
CHECKPOINT_VERSION = 1


class PolicyContractError(ValueError):
    pass


@dataclass(frozen=True)
class ActionSpace:
    n_tools: int
    n_bins: int = 21

    @property
    def size(self) -> int:
        return self.n_tools + 1 + self.n_bins

    @property
    def end_turn(self) -> int:
        return self.n_tools

    def call(self, k: int) -> int:
        return k

    def answer(self, b: int) -> int:
        return self.n_tools + 1 + b

    def is_call(self, a: int) -> bool:
        return a < self.n_tools

    def is_answer(self, a: int) -> bool:
        return a > self.n_tools

    def answer_value(self, a: int) -> float:
        return (a - self.n_tools - 1) / (self.n_bins - 1)

    def describe(self, a: int) -> str:
        if self.is_call(a):
            return f"CALL({a})"
        if a == self.end_turn:
            return "END_TURN"
        return f"ANSWER({self.answer_value(a):.2f})"


@dataclass
class DialogueState:
    n_tools: int
    turn: int = 0
    calls_this_turn: int = 0
    total_calls: int = 0
    done: bool = False
    called: np.ndarray = field(init=False)
    observed: np.ndarray = field(init=False)
    valid: np.ndarray = field(init=False)
    pending: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.called = np.zeros(self.n_tools, dtype=bool)
        self.observed = np.full(self.n_tools, SENTINEL)
        self.valid = np.zeros(self.n_tools, dtype=bool)


@dataclass(frozen=True)
class Featurizer:
    """Maps (instance, dialogue state) to a fixed-length vector.

    Layout: instance features | query one-hot | turn one-hot |
    per tool (called, observed p or sentinel, valid) | remaining calls / M
    [| instance features x signed evidence (2p - 1), when ``interactions``].
    A called tool whose response has not arrived yet still shows the sentinel.
    The interaction block lets a linear policy weigh each tool's evidence by
    how much the instance looks like that tool's area of competence.
    """

    n_features: int
    n_queries: int
    n_tools: int
    budget: RolloutBudget = RolloutBudget()
    interactions: bool = True

    @property
    def base_dim(self) -> int:
        return self.n_features + self.n_queries + self.budget.max_turns + 3 * self.n_tools + 1

    @property
    def dim(self) -> int:
        return self.base_dim + (self.n_features * self.n_tools if self.interactions else 0)

    def remaining_calls(self, state: DialogueState) -> int:
        rem = self.budget.max_parallel_calls - state.calls_this_turn
        if self.budget.max_tool_calls is not None:
            rem = min(rem, self.budget.max_tool_calls - state.total_calls)
        return max(0, min(rem, int((~state.called).sum())))

    def __call__(self, instance: Instance, state: DialogueState) -> np.ndarray:
        f, q, t, k = self.n_features, self.n_queries, self.budget.max_turns, self.n_tools
        x = np.zeros(self.dim)
        x[:f] = instance.features
        x[f + instance.query] = 1.0
        x[f + q + min(state.turn, t - 1)] = 1.0
        base = f + q + t
        slots = x[base : base + 3 * k].reshape(k, 3)
        slots[:, 0] = state.called
        slots[:, 1] = state.observed
        slots[:, 2] = state.valid
        x[base + 3 * k] = self.remaining_calls(state) / self.budget.max_parallel_calls
        if self.interactions:
            seen = state.valid & (state.observed != SENTINEL)
            evidence = np.where(seen, 2.0 * state.observed - 1.0, 0.0)
            x[self.base_dim :] = np.outer(instance.features, evidence).ravel()
        return x

    def to_json(self) -> dict:
        b = self.budget
        return {
            "n_features": self.n_features,
            "n_queries": self.n_queries,
            "n_tools": self.n_tools,
            "interactions": self.interactions,
            "budget": {
                "max_turns": b.max_turns,
                "max_parallel_calls": b.max_parallel_calls,
                "max_tool_calls": b.max_tool_calls,
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Featurizer":
        return cls(
            obj["n_features"],
            obj["n_queries"],
            obj["n_tools"],
            RolloutBudget(**obj["budget"]),
            obj.get("interactions", True),
        )


def featurize(instance: Instance, state: DialogueState, featurizer: Featurizer) -> np.ndarray:
    return featurizer(instance, state)


def legal_mask(state: DialogueState, featurizer: Featurizer, space: ActionSpace) -> np.ndarray:
    mask = np.zeros(space.size, dtype=bool)
    if state.done:
        return mask
    # the last turn is reserved for the answer, so every rollout ends answered
    last_turn = state.turn >= featurizer.budget.max_turns - 1
    if featurizer.remaining_calls(state) > 0 and not last_turn:
        mask[: space.n_tools] = ~state.called
    if state.calls_this_turn > 0:
        mask[space.end_turn] = True
    else:
        mask[space.n_tools + 1 :] = True
    return mask


@dataclass(frozen=True)
class PolicyParams:
    weights: np.ndarray  # (D, A)
    bias: np.ndarray  # (A,)
    version: int = 0

    @classmethod
    def zeros(cls, dim: int, n_actions: int) -> "PolicyParams":
        return cls(np.zeros((dim, n_actions)), np.zeros(n_actions))

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    def with_flat(self, theta: np.ndarray, bump: bool = True) -> "PolicyParams":
        d, a = self.weights.shape
        return PolicyParams(
            theta[: d * a].reshape(d, a).copy(),
            theta[d * a :].copy(),
            self.version + int(bump),
        )


def _masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax restricted to ``mask``; illegal entries are -inf."""
    if not np.all(mask.any(axis=-1)):
        raise PolicyContractError("no legal action")
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


def action_distribution(params: PolicyParams, features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    logits = features @ params.weights + params.bias
    return np.exp(_masked_log_softmax(logits, mask))


def policy_entropy(params: PolicyParams, features: np.ndarray, mask: np.ndarray) -> float:
    logp = _masked_log_softmax(features @ params.weights + params.bias, mask)
    safe = np.where(mask, logp, 0.0)
    return float(-np.sum(np.exp(safe) * safe * mask))


@dataclass(frozen=True)
class Step:
    features: np.ndarray
    mask: np.ndarray
    action: int
    logprob: float


@dataclass
class Trajectory:
    instance_id: int
    query: int
    steps: list[Step]
    turns: list[tuple[list[int], list[ToolOutput]]]
    answer: float | None
    text: str

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def logprobs(self) -> np.ndarray:
        return np.array([s.logprob for s in self.steps])

    @property
    def actions(self) -> np.ndarray:
        return np.array([s.action for s in self.steps], dtype=np.int64)

    @property
    def tool_outputs(self) -> list[ToolOutput]:
        return [o for _, outs in self.turns for o in outs]

    @property
    def n_calls(self) -> int:
        return sum(len(c) for c, _ in self.turns)


def build_transcript(
    instance_id: int,
    query: int,
    turns: list[tuple[list[int], list[ToolOutput]]],
    answer: float | None,
    tool_names: list[str],
) -> Transcript:
    args = {"instance": int(instance_id), "query": int(query)}
    rendered_turns = []
    for calls, outs in turns:
        rendered_turns.append(
            Turn(
                tuple(ToolCallMsg(tool_names[k], dict(args)) for k in calls),
                tuple(
                    ToolResponseMsg(tool_names[o.tool_id], format_probability(o.p) if o.valid else "invalid")
                    for o in outs
                ),
            )
        )
    return Transcript(
        task=f"Binary diagnosis of instance {instance_id} for query {query}; "
        "answer with the probability that the finding is present.",
        tools=tool_schemas(tool_names),
        turns=tuple(rendered_turns),
        answer=None if answer is None else AnswerMsg.from_value(answer),
    )


def _choose(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    a = min(a, probs.size - 1)
    while probs[a] == 0.0:  # guard against landing on a flat tail
        a -= 1
    return a


def sample_rollout(
    params: PolicyParams,
    instance: Instance,
    table: ToolOutputTable,
    featurizer: Featurizer,
    space: ActionSpace,
    rng: np.random.Generator | None = None,
    greedy: bool = False,
) -> Trajectory:
    """Play one episode. ``greedy`` takes the argmax (lowest index on ties)."""
    if rng is None and not greedy:
        raise ValueError("sampling needs an rng")
    state = DialogueState(space.n_tools)
    steps: list[Step] = []
    turns: list[tuple[list[int], list[ToolOutput]]] = []
    answer = None
    while not state.done:
        x = featurizer(instance, state)
        mask = legal_mask(state, featurizer, space)
        logp = _masked_log_softmax(x @ params.weights + params.bias, mask)
        if greedy:
            a = int(np.argmax(np.where(mask, logp, -np.inf)))
        else:
            a = _choose(np.exp(logp), rng)
        steps.append(Step(x, mask, a, float(logp[a])))
        if space.is_call(a):
            state.called[a] = True
            state.pending.append(a)
            state.calls_this_turn += 1
            state.total_calls += 1
        elif a == space.end_turn:
            outs = [table.get(instance.id, k) for k in state.pending]
            for o in outs:
                state.observed[o.tool_id] = o.p if o.valid else INVALID_OBSERVATION
                state.valid[o.tool_id] = o.valid
            turns.append((list(state.pending), outs))
            state.pending = []
            state.calls_this_turn = 0
            state.turn += 1
            if state.turn >= featurizer.budget.max_turns:
                state.done = True
        else:
            answer = space.answer_value(a)
            state.turn += 1
            state.done = True
    transcript = build_transcript(instance.id, instance.query, turns, answer, table.names)
    text = render(transcript, featurizer.budget)
    return Trajectory(instance.id, instance.query, steps, turns, answer, text)


def stack_steps(trajectories: list[Trajectory]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Concatenate steps: features (S, D), masks (S, A), actions (S,), owner index (S,)."""
    feats, masks, acts, owner = [], [], [], []
    for i, tr in enumerate(trajectories):
        for s in tr.steps:
            feats.append(s.features)
            masks.append(s.mask)
            acts.append(s.action)
            owner.append(i)
    return (
        np.asarray(feats, dtype=float),
        np.asarray(masks, dtype=bool),
        np.asarray(acts, dtype=np.int64),
        np.asarray(owner, dtype=np.int64),
    )


def step_logprobs(params: PolicyParams, feats: np.ndarray, masks: np.ndarray, acts: np.ndarray):
    """Log-probabilities of taken actions plus the full masked log-policy per row."""
    if not np.all(masks[np.arange(acts.size), acts]):
        raise PolicyContractError("trajectory contains an illegal action")
    logp = _masked_log_softmax(feats @ params.weights + params.bias, masks)
    return logp[np.arange(acts.size), acts], logp


def backprop_logits(feats: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Gradient with respect to the flat parameter vector given d/dlogits rows."""
    return np.concatenate([(feats.T @ dlogits).ravel(), dlogits.sum(axis=0)])


def logprob_and_grad(params: PolicyParams, trajectory: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    feats, masks, acts, _ = stack_steps([trajectory])
    if acts.size == 0:
        return np.zeros(0), np.zeros(params.size)
    lp, logp = step_logprobs(params, feats, masks, acts)
    probs = np.where(masks, np.exp(logp), 0.0)
    dlogits = -probs
    dlogits[np.arange(acts.size), acts] += 1.0
    return lp, backprop_logits(feats, dlogits)


def save_checkpoint(
    path: str | Path,
    params: PolicyParams,
    featurizer: Featurizer,
    space: ActionSpace,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    obj = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "weights": params.weights.tolist(),
        "bias": params.bias.tolist(),
        "version": params.version,
        "featurizer": featurizer.to_json(),
        "action_space": {"n_tools": space.n_tools, "n_bins": space.n_bins},
        "extra": extra or {},
    }
    path.write_text(json.dumps(obj, allow_nan=False))
    return path


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, Featurizer, ActionSpace, dict]:
    obj = json.loads(Path(path).read_text())
    if obj.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('checkpoint_version')!r}")
    feat = Featurizer.from_json(obj["featurizer"])
    space = ActionSpace(**obj["action_space"])
    w = np.asarray(obj["weights"], dtype=float).reshape(feat.dim, space.size)
    params = PolicyParams(w, np.asarray(obj["bias"], dtype=float), int(obj["version"]))
    return params, feat, space, obj.get("extra", {})
