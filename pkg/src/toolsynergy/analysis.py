"""Risk, oracle and complementarity analytics plus static tool-combination baselines."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .policy import ActionSpace, Featurizer, PolicyParams, sample_rollout
from .rewards import RewardConfig, binarize, correctness, majority_vote
from .simenv import Dataset, ToolOutputTable


def loss_matrix(table: ToolOutputTable, labels: np.ndarray, loss: str = "zero_one", config: RewardConfig = RewardConfig()) -> np.ndarray:
    """Per (instance, tool) loss. Invalid outputs are always wrong and score p=0.5 under Brier."""
    p = np.where(table.valid, table.p, 0.5)
    y = labels[:, None]
    if loss == "brier":
        return (p - y) ** 2
    if loss != "zero_one":
        raise ValueError(f"unknown loss {loss!r}")
    err = np.abs(p - y)
    scored = err if config.loss == "abs" else err * err
    return np.where(table.valid & (scored < config.threshold), 0.0, 1.0)


def single_tool_risks(
    table: ToolOutputTable, dataset: Dataset, ids=None, loss: str = "zero_one"
) -> tuple[np.ndarray, int]:
    ids = np.arange(len(dataset)) if ids is None else np.asarray(ids)
    sub = table_rows(table, ids)
    risks = loss_matrix(sub, dataset.labels[ids], loss).mean(axis=0)
    return risks, int(np.argmin(risks))


def selection_oracle_risk(table: ToolOutputTable, dataset: Dataset, ids=None, loss: str = "zero_one") -> float:
    """Mean over instances of the best available tool loss.

    This instance-wise selector is an upper bound on the infimum over all
    aggregation rules, so the synergy gap derived from it is conservative.
    """
    ids = np.arange(len(dataset)) if ids is None else np.asarray(ids)
    return float(loss_matrix(table_rows(table, ids), dataset.labels[ids], loss).min(axis=1).mean())


def table_rows(table: ToolOutputTable, ids: np.ndarray) -> ToolOutputTable:
    return ToolOutputTable(table.p[ids], table.valid[ids], table.names)


@dataclass
class RiskReport:
    tool_risks: list[float]
    best_tool: int
    single_risk: float
    oracle_risk: float
    synergy_gap: float
    policy_risk: float | None = None
    improvement_gap: float | None = None
    macro_accuracy: float | None = None
    macro_f1: float | None = None
    brier: float | None = None
    sandwich: bool | None = None
    f1_zero_division: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def synergy_gap(report: RiskReport) -> float:
    return report.single_risk - report.oracle_risk


def risk_report(table: ToolOutputTable, dataset: Dataset, ids=None, loss: str = "zero_one") -> RiskReport:
    risks, best = single_tool_risks(table, dataset, ids, loss)
    oracle = selection_oracle_risk(table, dataset, ids, loss)
    rep = RiskReport(risks.tolist(), best, float(risks[best]), oracle, 0.0)
    rep.synergy_gap = synergy_gap(rep)
    return rep


@dataclass
class ComplementarityReport:
    n_tools: int
    subset_counts: dict[str, int]  # bitstring over tools ("101" = tools 0 and 2) -> count
    greedy_order: list[int]
    marginal_curve: list[float]
    single_accuracy: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def subset_key(mask: int, k: int) -> str:
    return "".join("1" if mask >> j & 1 else "0" for j in range(k))


def complementarity(table: ToolOutputTable, dataset: Dataset, ids=None) -> ComplementarityReport:
    ids = np.arange(len(dataset)) if ids is None else np.asarray(ids)
    correct = loss_matrix(table_rows(table, ids), dataset.labels[ids]) == 0.0
    k = table.n_tools
    masks = (correct * (1 << np.arange(k))).sum(axis=1)
    counts = np.bincount(masks, minlength=1 << k)
    subset_counts = {subset_key(m, k): int(counts[m]) for m in range(1 << k)}

    chosen: list[int] = []
    curve: list[float] = []
    covered = np.zeros(ids.size, dtype=bool)
    for _ in range(k):
        best_j, best_acc = -1, -1.0
        for j in range(k):
            if j in chosen:
                continue
            acc = float((covered | correct[:, j]).mean())
            if acc > best_acc:
                best_j, best_acc = j, acc
        chosen.append(best_j)
        covered |= correct[:, best_j]
        curve.append(best_acc)
    return ComplementarityReport(k, subset_counts, chosen, curve, correct.mean(axis=0).tolist())


# ---------------------------------------------------------------- metrics


def macro_metrics(pred: np.ndarray, labels: np.ndarray, queries: np.ndarray) -> tuple[float, float, bool]:
    """Unweighted mean over queries of accuracy and positive-class F1.

    Empty precision/recall denominators count as 0; the flag reports whether
    that happened.
    """
    accs, f1s, flagged = [], [], False
    for q in np.unique(queries):
        sel = queries == q
        p, y = pred[sel], labels[sel]
        accs.append(float(np.mean(p == y)))
        tp = int(np.sum((p == 1) & (y == 1)))
        fp = int(np.sum((p == 1) & (y == 0)))
        fn = int(np.sum((p == 0) & (y == 1)))
        if tp + fp == 0 or tp + fn == 0:
            flagged = True
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0)
    return float(np.mean(accs)), float(np.mean(f1s)), flagged


# -------------------------------------------------------------- baselines


def fit_logistic(
    x: np.ndarray, y: np.ndarray, l2: float = 1e-3, tol: float = 1e-8, max_iter: int = 200_000
) -> tuple[np.ndarray, float, bool]:
    """Full-batch gradient descent on L2-penalised mean log-loss; returns (w, b, converged)."""
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    theta = np.zeros(d + 1)
    lip = 0.25 * np.linalg.eigvalsh(xb.T @ xb / n).max() + l2
    step = 1.0 / lip
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0  # intercept is not penalised
    for _ in range(max_iter):
        z = xb @ theta
        prob = 0.5 * (1.0 + np.tanh(0.5 * z))
        grad = xb.T @ (prob - y) / n + reg * theta
        if np.linalg.norm(grad) < tol:
            return theta[:-1], float(theta[-1]), True
        theta -= step * grad
    return theta[:-1], float(theta[-1]), False


def stacker_features(table: ToolOutputTable, queries: np.ndarray, n_queries: int) -> np.ndarray:
    p = np.where(table.valid, table.p, 0.5)
    return np.hstack([p, np.eye(n_queries)[queries]])


@dataclass
class MethodResult:
    method: str
    macro_accuracy: float
    macro_f1: float
    f1_zero_division: bool = False
    note: str = ""


def _result(name, pred, ds, ids, note="") -> MethodResult:
    acc, f1, flag = macro_metrics(pred, ds.labels[ids], ds.queries[ids])
    return MethodResult(name, acc, f1, flag, note)


def eval_baselines(
    table: ToolOutputTable,
    dataset: Dataset,
    train_ids=None,
    test_ids=None,
    l2: float = 1e-3,
) -> list[MethodResult]:
    train_ids = dataset.split("train") if train_ids is None else np.asarray(train_ids)
    test_ids = dataset.split("test") if test_ids is None else np.asarray(test_ids)
    if np.intersect1d(train_ids, test_ids).size:
        raise ValueError("train and test splits overlap")
    results = []
    test_tab = table_rows(table, test_ids)
    train_tab = table_rows(table, train_ids)

    for rule in ("neg", "pos"):
        pred = np.array(
            [
                _vote_or_default(test_tab.p[i], test_tab.valid[i], rule)
                for i in range(test_ids.size)
            ]
        )
        results.append(_result(f"majority_vote_tie_{rule}", pred, dataset, test_ids))

    bin_test = np.where(test_tab.valid, (np.nan_to_num(test_tab.p, nan=0.5) > 0.5).astype(int), 0)
    train_correct = loss_matrix(train_tab, dataset.labels[train_ids]) == 0.0

    best_global = int(np.argmax(train_correct.mean(axis=0)))
    results.append(_result("best_single_tool", bin_test[:, best_global], dataset, test_ids, f"tool {best_global}"))

    pred = np.zeros(test_ids.size, dtype=int)
    picks = {}
    for q in range(dataset.n_queries):
        tr = dataset.queries[train_ids] == q
        k = int(np.argmax(train_correct[tr].mean(axis=0))) if tr.any() else best_global
        picks[q] = k
        te = dataset.queries[test_ids] == q
        pred[te] = bin_test[te, k]
    results.append(_result("best_tool_per_query", pred, dataset, test_ids, f"picks {picks}"))

    x_tr = stacker_features(train_tab, dataset.queries[train_ids], dataset.n_queries)
    x_te = stacker_features(test_tab, dataset.queries[test_ids], dataset.n_queries)
    w, b, converged = fit_logistic(x_tr, dataset.labels[train_ids].astype(float), l2=l2)
    pred = (x_te @ w + b > 0).astype(int)
    results.append(_result("logistic_regression", pred, dataset, test_ids, "" if converged else "not converged"))
    return results


def _vote_or_default(p_row, valid_row, rule) -> int:
    vote = majority_vote([float(v) for v, ok in zip(p_row, valid_row) if ok], rule)
    return 0 if vote is None else vote


# ------------------------------------------------------------ policy eval


@dataclass
class PolicyPredictions:
    ids: np.ndarray
    answers: np.ndarray  # NaN where the rollout ended without an answer
    n_calls: np.ndarray


def policy_predictions(
    params: PolicyParams,
    dataset: Dataset,
    table: ToolOutputTable,
    featurizer: Featurizer,
    space: ActionSpace,
    ids=None,
    greedy: bool = True,
    seed: int = 0,
) -> PolicyPredictions:
    ids = dataset.split("test") if ids is None else np.asarray(ids)
    answers = np.full(ids.size, np.nan)
    calls = np.zeros(ids.size, dtype=int)
    for j, i in enumerate(ids):
        rng = None if greedy else np.random.default_rng(np.random.SeedSequence([seed, int(i), 3]))
        tr = sample_rollout(params, dataset[int(i)], table, featurizer, space, rng, greedy=greedy)
        if tr.answer is not None:
            answers[j] = tr.answer
        calls[j] = tr.n_calls
    return PolicyPredictions(ids, answers, calls)


def eval_policy(
    params: PolicyParams,
    dataset: Dataset,
    table: ToolOutputTable,
    featurizer: Featurizer,
    space: ActionSpace,
    split: str = "test",
    greedy: bool = True,
    seed: int = 0,
    reward_config: RewardConfig = RewardConfig(),
) -> RiskReport:
    """Score a policy; unanswered rollouts count as p=0.5 (wrong, label 0)."""
    ids = dataset.split(split)
    preds = policy_predictions(params, dataset, table, featurizer, space, ids, greedy, seed)
    p_hat = np.where(np.isnan(preds.answers), 0.5, preds.answers)
    y = dataset.labels[ids]
    labels = np.array([binarize(v) for v in p_hat])
    acc, f1, flag = macro_metrics(labels, y, dataset.queries[ids])
    policy_risk = float(np.mean([not correctness(float(v), int(t), reward_config) for v, t in zip(p_hat, y)]))
    rep = risk_report(table, dataset, ids)
    rep.policy_risk = policy_risk
    rep.improvement_gap = rep.single_risk - policy_risk
    rep.macro_accuracy = acc
    rep.macro_f1 = f1
    rep.brier = float(np.mean((p_hat - y) ** 2))
    rep.sandwich = bool(rep.oracle_risk <= policy_risk < rep.single_risk)
    rep.f1_zero_division = flag
    return rep


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def is_finite(x) -> bool:
    return x is not None and math.isfinite(x)
