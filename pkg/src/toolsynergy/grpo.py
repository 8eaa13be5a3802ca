"""Group Relative Policy Optimization over atomic-action trajectories."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .egs import StratumIndex, sample_batch, sample_uniform
from .policy import (
    ActionSpace,
    Featurizer,
    PolicyParams,
    Trajectory,
    backprop_logits,
    sample_rollout,
    save_checkpoint,
    stack_steps,
    step_logprobs,
)
from .rewards import RewardBreakdown, RewardConfig, overall_reward
from .simenv import Dataset, ToolOutputTable

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 16
    batch_size: int = 256
    clip_eps: float = 0.2
    kl_coef: float = 1e-3
    entropy_coef: float = 1e-3
    learning_rate: float = 1e-2
    momentum: float = 0.0
    epochs: int = 1
    iterations: int = 100
    adv_guard: float = 1e-8
    sampler: str = "egs"
    seed: int = 0
    checkpoint_every: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group size must be at least 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip epsilon must lie in (0, 1)")
        if self.kl_coef < 0:
            raise ValueError("KL coefficient must be nonnegative")
        if self.sampler not in ("egs", "uniform"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.iterations < 0:
            raise ValueError("batch size and epochs must be positive, iterations nonnegative")


@dataclass
class Group:
    prompt: int
    trajectories: list[Trajectory]
    rewards: list[RewardBreakdown]
    advantages: np.ndarray


def group_advantages(rewards, guard: float = 1e-8) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    centered = r - r.mean()
    return centered / max(float(r.std()), guard)


def importance_ratio(new_params: PolicyParams, trajectory: Trajectory, old_logprobs=None) -> np.ndarray:
    feats, masks, acts, _ = stack_steps([trajectory])
    lp, _ = step_logprobs(new_params, feats, masks, acts)
    old = trajectory.logprobs if old_logprobs is None else np.asarray(old_logprobs)
    return np.exp(lp - old)


def kl_low_variance(new_params: PolicyParams, ref_params: PolicyParams, trajectory: Trajectory) -> np.ndarray:
    feats, masks, acts, _ = stack_steps([trajectory])
    lp, _ = step_logprobs(new_params, feats, masks, acts)
    ref, _ = step_logprobs(ref_params, feats, masks, acts)
    return kl_estimate(ref - lp)


def kl_estimate(log_u: np.ndarray) -> np.ndarray:
    """u - ln u - 1 for u = pi_ref / pi_theta, given ln u."""
    log_u = np.asarray(log_u, dtype=float)
    return np.expm1(log_u) - log_u


def clipped_surrogate(ratio, adv, eps: float) -> np.ndarray:
    """Per-action PPO term min(r A, clip(r, 1 - eps, 1 + eps) A)."""
    ratio = np.asarray(ratio, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


@dataclass
class PreparedBatch:
    feats: np.ndarray
    masks: np.ndarray
    acts: np.ndarray
    old_lp: np.ndarray
    ref_lp: np.ndarray
    adv: np.ndarray  # per step, copied from the owning trajectory
    weight: np.ndarray  # per step, 1 / (n_groups * G * |tau|)


def prepare_batch(groups: list[Group], ref_params: PolicyParams) -> PreparedBatch:
    if not groups:
        raise ValueError("no groups to optimise")
    trajs, adv, weight = [], [], []
    for g in groups:
        n = len(g.trajectories)
        for tr, a in zip(g.trajectories, g.advantages):
            trajs.append(tr)
            adv.append(np.full(len(tr), a))
            weight.append(np.full(len(tr), 1.0 / (len(groups) * n * len(tr))))
    feats, masks, acts, _ = stack_steps(trajs)
    ref_lp, _ = step_logprobs(ref_params, feats, masks, acts)
    return PreparedBatch(
        feats,
        masks,
        acts,
        np.concatenate([t.logprobs for t in trajs]),
        ref_lp,
        np.concatenate(adv),
        np.concatenate(weight),
    )


def objective_terms(params: PolicyParams, batch: PreparedBatch, config: TrainConfig) -> tuple[float, np.ndarray, dict]:
    """Objective value, flat gradient and diagnostics for a prepared batch."""
    rows = np.arange(batch.acts.size)
    lp, logp = step_logprobs(params, batch.feats, batch.masks, batch.acts)
    ratio = np.exp(lp - batch.old_lp)
    eps = config.clip_eps
    surr1 = ratio * batch.adv
    surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * batch.adv
    surr = clipped_surrogate(ratio, batch.adv, eps)
    log_u = batch.ref_lp - lp
    kl = kl_estimate(log_u)

    safe = np.where(batch.masks, logp, 0.0)
    probs = np.exp(safe) * batch.masks
    ent = -(probs * safe).sum(axis=1)
    n_steps = batch.acts.size

    value = float(np.sum(batch.weight * (surr - config.kl_coef * kl)) + config.entropy_coef * ent.mean())

    unclipped = surr1 <= surr2
    dlp = batch.weight * (np.where(unclipped, surr1, 0.0) - config.kl_coef * (1.0 - np.exp(log_u)))
    dlogits = -probs * dlp[:, None]
    dlogits[rows, batch.acts] += dlp
    dlogits += (config.entropy_coef / n_steps) * (-probs * (safe + ent[:, None]))
    grad = backprop_logits(batch.feats, dlogits)
    info = {
        "kl_mean": float(kl.mean()),
        "entropy_mean": float(ent.mean()),
        "clip_fraction": float(np.mean(~unclipped)),
    }
    return value, grad, info


def grpo_objective(
    params: PolicyParams, groups: list[Group], config: TrainConfig, ref_params: PolicyParams
) -> tuple[float, np.ndarray]:
    value, grad, _ = objective_terms(params, prepare_batch(groups, ref_params), config)
    return value, grad


def build_group(
    prompt: int,
    trajectories: list[Trajectory],
    label: int,
    reward_config: RewardConfig,
    featurizer: Featurizer,
    guard: float,
) -> Group:
    rewards = [overall_reward(t, label, reward_config, featurizer.budget) for t in trajectories]
    adv = group_advantages([r.overall for r in rewards], guard)
    return Group(prompt, trajectories, rewards, adv)


@dataclass
class TrainState:
    params: PolicyParams
    ref_params: PolicyParams
    velocity: np.ndarray
    iteration: int = 0
    log: list[dict] = field(default_factory=list)


def init_state(featurizer: Featurizer, space: ActionSpace, params: PolicyParams | None = None) -> TrainState:
    params = params or PolicyParams.zeros(featurizer.dim, space.size)
    return TrainState(params, params, np.zeros(params.size))


def _rollouts_for_prompt(args):
    params, inst, table, featurizer, space, seed, it, slot, g_size = args
    return [
        sample_rollout(
            params,
            inst,
            table,
            featurizer,
            space,
            np.random.default_rng(np.random.SeedSequence([seed, it, slot, g, 2])),
        )
        for g in range(g_size)
    ]


def train(
    config: TrainConfig,
    dataset: Dataset,
    table: ToolOutputTable,
    index: StratumIndex | None,
    featurizer: Featurizer,
    space: ActionSpace,
    reward_config: RewardConfig = RewardConfig(),
    state: TrainState | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainState:
    """Run GRPO iterations until ``config.iterations`` is reached.

    Passing a ``state`` restored from a checkpoint continues the same
    trajectory: every iteration draws its randomness from ``(seed, iteration)``.
    """
    state = state or init_state(featurizer, space)
    if config.sampler == "egs" and index is None:
        raise ValueError("EGS sampling needs a stratum index")
    train_ids = dataset.split("train")
    key_of = {}
    if index is not None:
        for j, members in enumerate(index.strata):
            for i in members:
                key_of[int(i)] = j
    log_file = open(log_path, "a") if log_path else None
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        while state.iteration < config.iterations:
            it = state.iteration
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, it, 1]))
            if config.sampler == "egs":
                prompts = sample_batch(index, config.batch_size, rng)
            else:
                prompts = sample_uniform(train_ids, config.batch_size, rng)

            old = state.params
            jobs = [
                (old, dataset[int(pid)], table, featurizer, space, config.seed, it, j, config.group_size)
                for j, pid in enumerate(prompts)
            ]
            rollouts = list(pool.map(_rollouts_for_prompt, jobs)) if pool else [_rollouts_for_prompt(j) for j in jobs]
            groups = [
                build_group(int(pid), trajs, int(dataset.labels[pid]), reward_config, featurizer, config.adv_guard)
                for pid, trajs in zip(prompts, rollouts)
            ]

            batch = prepare_batch(groups, state.ref_params)
            theta = old.flat()
            for _ in range(config.epochs):
                value, grad, info = objective_terms(old.with_flat(theta, bump=False), batch, config)
                if not (np.isfinite(value) and np.all(np.isfinite(grad))):
                    raise DivergenceError(f"non-finite objective at iteration {it}")
                state.velocity = config.momentum * state.velocity + grad
                theta = theta + config.learning_rate * state.velocity
            state.params = old.with_flat(theta)
            state.iteration += 1

            record = _iteration_record(it, groups, value, info, key_of, index)
            state.log.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            if checkpoint_dir and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_train_checkpoint(Path(checkpoint_dir) / f"ckpt_{state.iteration:05d}.json", state, featurizer, space)
            if it % 25 == 0:
                log.info("iter %d reward %.4f acc %.3f", it, record["reward_overall"], record["batch_accuracy"])
    finally:
        if log_file:
            log_file.close()
        if pool:
            pool.shutdown()
    return state


def _iteration_record(it, groups, value, info, key_of, index) -> dict:
    bds = [r for g in groups for r in g.rewards]
    n_strata = len(index.strata) if index is not None else 0
    comp = [0] * n_strata
    for g in groups:
        if g.prompt in key_of:
            comp[key_of[g.prompt]] += 1
    return {
        "iteration": it,
        "objective": value,
        "reward_overall": float(np.mean([b.overall for b in bds])),
        "reward_brier": float(np.mean([b.brier for b in bds])),
        "reward_override": float(np.mean([b.override for b in bds])),
        "reward_format": float(np.mean([b.format for b in bds])),
        "batch_accuracy": float(np.mean([b.correct for b in bds])),
        "mean_tool_calls": float(np.mean([t.n_calls for g in groups for t in g.trajectories])),
        "stratum_composition": comp,
        **info,
    }


def save_train_checkpoint(path, state: TrainState, featurizer: Featurizer, space: ActionSpace) -> Path:
    extra = {
        "iteration": state.iteration,
        "velocity": state.velocity.tolist(),
        "ref_weights": state.ref_params.weights.tolist(),
        "ref_bias": state.ref_params.bias.tolist(),
    }
    return save_checkpoint(path, state.params, featurizer, space, extra)


def restore_train_state(params: PolicyParams, extra: dict) -> TrainState:
    if "ref_weights" in extra:
        ref = PolicyParams(np.asarray(extra["ref_weights"], dtype=float), np.asarray(extra["ref_bias"], dtype=float))
    else:
        ref = params
    vel = np.asarray(extra.get("velocity", np.zeros(params.size)), dtype=float)
    return TrainState(params, ref, vel, int(extra.get("iteration", 0)))


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
