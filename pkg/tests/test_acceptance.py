"""Acceptance criteria A1-A8. Each test records one pass/fail line that is
printed in the terminal summary. A3 and A6 train on the B1 benchmark and take
roughly an hour together on one core."""
import dataclasses
import re
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import ACCEPTANCE, random_params
from test_egs import world_with_counts
from toolsynergy.analysis import complementarity, eval_policy, risk_report, single_tool_risks
from toolsynergy.config import B1_TOML, from_dict
from toolsynergy.egs import sample_batch, stratify
from toolsynergy.grpo import TrainConfig, build_group, group_advantages, grpo_objective, train
from toolsynergy.policy import ActionSpace, Featurizer, load_checkpoint, sample_rollout
from toolsynergy.protocol import (
    AnswerMsg,
    RolloutBudget,
    ToolCallMsg,
    ToolResponseMsg,
    Transcript,
    Turn,
    check_format,
    parse,
    render,
    tool_schemas,
)
from toolsynergy.rewards import RewardConfig, correctness, extract_evidence, majority_vote, reward_from_text
from toolsynergy.simenv import ToolPool, ToolProfile, generate_dataset, precompute_tool_table

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

B1 = from_dict(tomllib.loads(B1_TOML))
ABLATION_ITERS = 150


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    assert ok, f"{key}: {detail}"


@pytest.fixture(scope="module")
def b1_world():
    ds = generate_dataset(B1.dataset, B1.dataset_seed)
    pool = B1.pool.build(B1.dataset.n_regions, B1.dataset.n_queries)
    table = precompute_tool_table(pool, ds)
    return ds, table, ActionSpace(table.n_tools, B1.policy.n_bins)


def _rollout_sample(b1_world, n, seed):
    ds, table, space = b1_world
    feat = Featurizer(ds.n_features, ds.n_queries, table.n_tools, B1.budget)
    rng = np.random.default_rng(seed)
    out = []
    params = None
    for i in range(n):
        if i % 500 == 0:
            params = random_params(feat, space, rng, 1.0)
            params.bias[: space.n_tools] += 5.0  # mostly rollouts that consult tools
        inst = ds[int(rng.integers(len(ds)))]
        out.append((sample_rollout(params, inst, table, feat, space, rng), inst.label))
    return out


@pytest.fixture(scope="module")
def b1_rollouts(b1_world):
    t0 = time.perf_counter()
    rollouts = _rollout_sample(b1_world, 12_000, 1)
    return rollouts, time.perf_counter() - t0


def test_a1_brier_identity(b1_rollouts):
    rollouts, gen_secs = b1_rollouts
    t0 = time.perf_counter() - gen_secs
    cfg = RewardConfig()
    brier, sq = [], []
    for tr, y in rollouts:
        p_hat, probs = extract_evidence(tr.text)
        if p_hat is None or not probs:
            continue
        brier.append(reward_from_text(tr.text, y, cfg, B1.budget).brier)
        sq.append((p_hat - y) ** 2)
        if len(brier) == 10_000:
            break
    gap = abs(np.mean(brier) - (1 - np.mean(sq)))
    secs = time.perf_counter() - t0
    record("A1", len(brier) == 10_000 and gap <= 1e-12 and secs < 10,
           f"n={len(brier)} |mean(R_brier) - (1 - MSE)| = {gap:.2e} ({secs:.1f}s)")


def test_a2_override_identity(b1_rollouts):
    rollouts, gen_secs = b1_rollouts
    t0 = time.perf_counter() - gen_secs
    cfg = RewardConfig()
    over, risk_m, risk_pi = [], [], []
    for tr, y in rollouts:
        p_hat, probs = extract_evidence(tr.text)
        m = majority_vote(probs, cfg.tie_rule)
        if m is None or p_hat is None:
            continue
        over.append(reward_from_text(tr.text, y, cfg, B1.budget).override)
        risk_m.append(not correctness(float(m), y, cfg))
        risk_pi.append(not correctness(p_hat, y, cfg))
        if len(over) == 10_000:
            break
    gap = abs(np.mean(over) - cfg.override_alpha * (np.mean(risk_m) - np.mean(risk_pi)))
    secs = time.perf_counter() - t0
    record("A2", len(over) == 10_000 and gap <= 1e-12 and secs < 10,
           f"n={len(over)} |mean(R_override) - alpha*(R(m) - R(pi))| = {gap:.2e} ({secs:.1f}s)")


@pytest.fixture(scope="module")
def b1_runs(b1_world, tmp_path_factory):
    """Train the full method on every B1 seed, keeping the mid-run checkpoint for the ablation."""
    ds, table, space = b1_world
    feat = Featurizer(ds.n_features, ds.n_queries, table.n_tools, B1.budget, B1.policy.interactions)
    index = stratify(ds, table, B1.reward, B1.egs)
    runs = {}
    for seed in B1.seeds:
        ck = tmp_path_factory.mktemp(f"b1_seed{seed}")
        cfg = dataclasses.replace(B1.train, seed=seed, checkpoint_every=ABLATION_ITERS)
        t0 = time.perf_counter()
        state = train(cfg, ds, table, index, feat, space, B1.reward, checkpoint_dir=ck)
        secs = time.perf_counter() - t0
        mid, _, _, _ = load_checkpoint(ck / f"ckpt_{ABLATION_ITERS:05d}.json")
        runs[seed] = (state, mid, feat, secs)
    return runs


def test_a3_synergy_gap_realised(b1_world, b1_runs):
    ds, table, space = b1_world
    risks, _ = single_tool_risks(table, ds)
    single_acc = 1 - risks.min()
    oracle_acc = 1 - risk_report(table, ds).oracle_risk
    test_ids = ds.split("test")
    test_tool_acc = 1 - single_tool_risks(table, ds, test_ids)[0]
    accs, ok_runs, secs = [], True, []
    for seed, (state, _, feat, t) in sorted(b1_runs.items()):
        rep = eval_policy(state.params, ds, table, feat, space, "test", reward_config=B1.reward)
        accs.append(rep.macro_accuracy)
        secs.append(t)
        ok_runs &= rep.macro_accuracy >= 0.80 and 1 - rep.policy_risk > test_tool_acc.max() and rep.sandwich
    ok = abs(single_acc - 0.65) <= 0.01 and abs(oracle_acc - 0.95) <= 0.01 and ok_runs and max(secs) <= 900
    record(
        "A3",
        ok,
        f"single {single_acc:.4f} oracle {oracle_acc:.4f}; policy test acc per seed "
        f"{[round(a, 4) for a in accs]} (mean {np.mean(accs):.4f} sd {np.std(accs, ddof=1):.4f}) vs best tool "
        f"{test_tool_acc.max():.4f}; max {max(secs) / 60:.1f} min/seed",
    )


def test_a4_egs_distribution():
    t0 = time.perf_counter()
    ds, tab = world_with_counts([0, 1, 2, 3, 4, 5, 6], n=700)
    idx = stratify(ds, tab)
    draws = sample_batch(idx, 100_000, np.random.default_rng(7))
    which = {int(i): j for j, s in enumerate(idx.strata) for i in s}
    counts = np.bincount([which[int(i)] for i in draws], minlength=len(idx.strata))
    expected = 100_000 * idx.probs
    z = np.abs(counts - expected) / np.sqrt(100_000 * idx.probs * (1 - idx.probs))
    p = chisquare(counts, expected).pvalue
    secs = time.perf_counter() - t0
    record("A4", len(idx.strata) == 4 and z.max() <= 3 and p > 0.01 and secs < 10,
           f"max |z| {z.max():.2f}, chi2 p {p:.3f} ({secs:.1f}s)")


def test_a5_grpo_numerics(b1_world):
    t0 = time.perf_counter()
    ds, table, space = b1_world
    rng = np.random.default_rng(5)
    worst_mean = worst_std = worst_affine = 0.0
    for _ in range(1000):
        r = rng.normal(size=rng.integers(2, 32))
        a = group_advantages(r)
        worst_mean = max(worst_mean, abs(a.mean()))
        worst_std = max(worst_std, abs(a.std() - 1))
        worst_affine = max(worst_affine, np.abs(group_advantages(rng.uniform(0.1, 10) * r + rng.normal()) - a).max())
    const_ok = not group_advantages(np.full(16, 0.7)).any()

    feat = Featurizer(ds.n_features, ds.n_queries, table.n_tools, B1.budget)
    cfg = TrainConfig(group_size=4, kl_coef=0.05, entropy_coef=0.01)
    worst_fd, h = 0.0, 1e-6
    for trial in range(50):
        old, ref = random_params(feat, space, rng, 0.3), random_params(feat, space, rng, 0.3)
        pid = int(rng.integers(len(ds)))
        trajs = [sample_rollout(old, ds[pid], table, feat, space, rng) for _ in range(4)]
        groups = [build_group(pid, trajs, int(ds.labels[pid]), B1.reward, feat, 1e-8)]
        theta = old.flat() + rng.normal(0, 0.05, old.size)
        _, g = grpo_objective(old.with_flat(theta), groups, cfg, ref)
        idx = rng.choice(theta.size, 20, replace=False)
        fd = np.empty(idx.size)
        for j, t in enumerate(idx):
            e = np.zeros_like(theta)
            e[t] = h
            fd[j] = (grpo_objective(old.with_flat(theta + e), groups, cfg, ref)[0]
                     - grpo_objective(old.with_flat(theta - e), groups, cfg, ref)[0]) / (2 * h)
        worst_fd = max(worst_fd, np.linalg.norm(fd - g[idx]) / max(np.linalg.norm(fd), np.linalg.norm(g[idx]), 1e-12))
    secs = time.perf_counter() - t0
    ok = worst_mean <= 1e-10 and worst_std <= 1e-8 and worst_affine <= 1e-10 and const_ok and worst_fd < 1e-4 and secs < 60
    record("A5", ok, f"mean {worst_mean:.1e} popstd {worst_std:.1e} affine {worst_affine:.1e} "
                     f"fd rel err {worst_fd:.1e} ({secs:.1f}s)")


def test_a6_ablation_direction(b1_world, b1_runs):
    ds, table, space = b1_world
    index = stratify(ds, table, B1.reward, B1.egs)
    k = table.n_tools
    variants = {
        "no_egs": dict(sampler="uniform"),
        "no_override": dict(reward=dataclasses.replace(B1.reward, override_alpha=0.0)),
        **{f"budget_{b}": dict(budget=RolloutBudget(B1.budget.max_turns, B1.budget.max_parallel_calls, b)) for b in range(1, k)},
    }
    t0 = time.perf_counter()
    acc = {name: [] for name in ["full", *variants]}
    for seed, (_, mid, feat_full, _) in sorted(b1_runs.items()):
        # budget_K allows every tool, so it is the full method's mid-run checkpoint
        acc["full"].append(eval_policy(mid, ds, table, feat_full, space, "test").macro_accuracy)
        for name, ov in variants.items():
            budget = ov.get("budget", B1.budget)
            reward = ov.get("reward", B1.reward)
            feat = Featurizer(ds.n_features, ds.n_queries, k, budget, B1.policy.interactions)
            cfg = dataclasses.replace(B1.train, seed=seed, iterations=ABLATION_ITERS, sampler=ov.get("sampler", "egs"))
            state = train(cfg, ds, table, index, feat, space, reward)
            acc[name].append(eval_policy(state.params, ds, table, feat, space, "test").macro_accuracy)
    mean = {n: float(np.mean(v)) for n, v in acc.items()}
    secs = time.perf_counter() - t0 + sum(r[3] for r in b1_runs.values()) * ABLATION_ITERS / B1.train.iterations
    ok = mean["full"] >= mean["no_override"] >= mean["no_egs"] and mean["budget_1"] < mean["full"] and secs <= 7200
    detail = ", ".join(f"{n} {m:.4f}" for n, m in mean.items())
    record("A6", ok, f"{len(B1.seeds)} seeds x {ABLATION_ITERS} it: {detail} (budget_{k} = full; {secs / 60:.0f} min)")


def _random_transcript(rng):
    k = int(rng.integers(1, 7))
    names = [f"tool_{j}" for j in range(k)]
    turns = []
    for _ in range(int(rng.integers(0, 4))):
        chosen = [names[j] for j in rng.permutation(k)[: rng.integers(1, k + 1)]]
        calls = tuple(ToolCallMsg(n, {"instance": int(rng.integers(10_000)), "query": int(rng.integers(4))}) for n in chosen)
        obs = ["invalid" if rng.random() < 0.1 else repr(float(rng.random())) for _ in chosen]
        turns.append(Turn(calls, tuple(ToolResponseMsg(n, o) for n, o in zip(chosen, obs))))
    answer = AnswerMsg.from_value(float(rng.random())) if rng.random() < 0.8 else None
    task = "".join(rng.choice(list("abcdefgh .,:\n"), int(rng.integers(0, 30))))
    return Transcript(task, tool_schemas(names), tuple(turns), answer)


TAG_RE = re.compile(r"</?(tools|tool_call|tool_response|answer)>")


def _corrupt(text, rng):
    spans = [m.span() for m in TAG_RE.finditer(text)]
    start, end = spans[int(rng.integers(len(spans)))]
    how = int(rng.integers(4))
    pos = int(rng.integers(start + 1, end - 1))
    if how == 0:  # delete a character of the tag
        return text[:pos] + text[pos + 1 :]
    if how == 1:  # overwrite a character of the tag
        return text[:pos] + ("X" if text[pos] != "X" else "Y") + text[pos + 1 :]
    if how == 2:  # lose the opening bracket
        return text[:start] + text[start + 1 :]
    return text[:start] + text[end:]  # drop the tag entirely


def test_a7_protocol():
    t0 = time.perf_counter()
    budget = RolloutBudget()
    rng = np.random.default_rng(77)
    round_ok = sum(parse(render(t, budget), budget) == t for t in (_random_transcript(rng) for _ in range(1000)))
    rejected = 0
    n_mut = 0
    while n_mut < 1000:
        t = _random_transcript(rng)
        if t.answer is None:
            continue
        n_mut += 1
        rejected += not check_format(_corrupt(render(t, budget), rng), budget)
    secs = time.perf_counter() - t0
    record("A7", round_ok == 1000 and rejected == 1000 and secs < 5,
           f"{round_ok}/1000 round trips, {rejected}/1000 corrupted transcripts rejected ({secs:.1f}s)")


def test_a8_oracle_analytics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    failures = 0
    for trial in range(100):
        r, q, k = int(rng.integers(1, 5)), int(rng.integers(1, 3)), int(rng.integers(1, 7))
        masses = rng.dirichlet(np.ones(r))
        masses[-1] = 1 - masses[:-1].sum()
        cfg = dataclasses.replace(B1.dataset, n_instances=int(rng.integers(50, 400)), region_masses=tuple(masses), n_queries=q)
        ds = generate_dataset(cfg, trial)
        pool = ToolPool(
            [ToolProfile(j, rng.uniform(0, 1, (r, q)), float(rng.uniform(0.5, 8)), float(rng.choice([0, 0.2])))
             for j in range(k)],
            coupling=str(rng.choice(["independent", "shared"])),
        )
        table = precompute_tool_table(pool, ds)
        rep = risk_report(table, ds)
        comp = complementarity(table, ds)
        curve = comp.marginal_curve
        ok = (
            rep.oracle_risk <= min(rep.tool_risks)
            and all(a <= b for a, b in zip(curve, curve[1:]))
            and sum(comp.subset_counts.values()) == len(ds)
            and len(comp.subset_counts) == 2**k
        )
        failures += not ok
    secs = time.perf_counter() - t0
    record("A8", failures == 0 and secs < 30, f"100 fuzzed pools, {failures} failures ({secs:.1f}s)")
