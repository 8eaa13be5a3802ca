"""Command line entry point: simulate | analyze | train | eval | ablate | lint-transcript.

Exit codes: 0 success, 1 config error, 2 runtime error, 3 divergence abort.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import complementarity, eval_baselines, eval_policy, mean_std, risk_report
from .config import B1_TOML, ExperimentConfig, load_config, load_frozen
from .egs import stratify
from .grpo import (
    DivergenceError,
    TrainState,
    init_state,
    restore_train_state,
    save_train_checkpoint,
    train,
)
from .plotting import plot_complementarity, plot_marginal_curve, plot_method_bars, plot_training_curve
from .policy import ActionSpace, Featurizer, load_checkpoint
from .protocol import RolloutBudget, lint
from .simenv import ConfigError, Dataset, ToolOutputTable, ToolPool, generate_dataset, load_json, precompute_tool_table, save_json

log = logging.getLogger("toolsynergy")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3


class Manifest:
    def __init__(self, out: Path, config: ExperimentConfig):
        self.path = out / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"artifacts": {}, "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
        self.data["config_hash"] = config.digest()
        self.data["versions"] = {
            "toolsynergy": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        }

    def add(self, name: str, path: Path) -> None:
        self.data["artifacts"][name] = str(path.relative_to(self.path.parent))

    def save(self) -> None:
        self.data["updated"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))


def _prepare_out(config: ExperimentConfig, out: Path) -> Manifest:
    out.mkdir(parents=True, exist_ok=True)
    frozen = out / "config.frozen.json"
    frozen.write_text(json.dumps(config.to_json(), indent=2, sort_keys=True))
    m = Manifest(out, config)
    m.add("config", frozen)
    return m


def _write_csv(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def _dump(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


def _featurizer(config: ExperimentConfig, ds: Dataset, n_tools: int, budget: RolloutBudget | None = None) -> Featurizer:
    return Featurizer(ds.n_features, ds.n_queries, n_tools, budget or config.budget, config.policy.interactions)


def load_artifacts(out: Path) -> tuple[Dataset, ToolPool, ToolOutputTable]:
    missing = [n for n in ("dataset.json", "pool.json", "tool_table.json") if not (out / n).exists()]
    if missing:
        raise FileNotFoundError(f"missing simulate outputs in {out}: {missing}; run `simulate` first")
    return (
        Dataset.from_json(load_json(out / "dataset.json")),
        ToolPool.from_json(load_json(out / "pool.json")),
        ToolOutputTable.from_json(load_json(out / "tool_table.json")),
    )


# ------------------------------------------------------------------ commands


def cmd_simulate(config: ExperimentConfig, out: Path) -> dict:
    m = _prepare_out(config, out)
    ds = generate_dataset(config.dataset, config.dataset_seed)
    pool = config.pool.build(config.dataset.n_regions, config.dataset.n_queries)
    table = precompute_tool_table(pool, ds)
    paths = {
        "dataset": save_json(ds.to_json(), out / "dataset.json"),
        "pool": save_json(pool.to_json(), out / "pool.json"),
        "tool_table": save_json(table.to_json(), out / "tool_table.json"),
    }
    for k, p in paths.items():
        m.add(k, p)
    m.save()
    return paths


def cmd_analyze(config: ExperimentConfig, out: Path) -> dict:
    ds, _, table = load_artifacts(out)
    m = _prepare_out(config, out)
    rep = risk_report(table, ds)
    comp = complementarity(table, ds)
    index = stratify(ds, table, config.reward, config.egs)
    rows = [
        {"tool": name, "zero_one_risk": r, "accuracy": 1.0 - r}
        for name, r in zip(table.names, rep.tool_risks)
    ]
    rows.append({"tool": "selection_oracle", "zero_one_risk": rep.oracle_risk, "accuracy": 1.0 - rep.oracle_risk})
    paths = {
        "risk_report": _dump(out / "reports" / "risk_report.json", rep.to_json()),
        "risk_table": _write_csv(out / "reports" / "risk_report.csv", rows),
        "complementarity": _dump(out / "reports" / "complementarity.json", comp.to_json()),
        "strata": _dump(out / "reports" / "strata.json", index.to_json()),
        "fig_complementarity": plot_complementarity(comp, out / "figures" / "complementarity.png"),
        "fig_marginal_curve": plot_marginal_curve(comp, out / "figures" / "marginal_curve.png"),
    }
    for k, p in paths.items():
        m.add(k, p)
    m.save()
    return {"risk": rep, "complementarity": comp, "strata": index, "paths": paths}


def _latest_checkpoint(ckdir: Path) -> Path | None:
    cands = sorted(ckdir.glob("ckpt_*.json"))
    return cands[-1] if cands else None


def run_training(
    config: ExperimentConfig,
    out: Path,
    seed: int,
    *,
    budget: RolloutBudget | None = None,
    tag: str = "",
    iterations: int | None = None,
    sampler: str | None = None,
    reward=None,
    resume: bool = False,
    threads: int | None = None,
    figures: bool = True,
) -> tuple[TrainState, Featurizer, ActionSpace, dict]:
    ds, _, table = load_artifacts(out)
    featurizer = _featurizer(config, ds, table.n_tools, budget)
    space = ActionSpace(table.n_tools, config.policy.n_bins)
    reward = reward or config.reward
    tc = dataclasses.replace(
        config.train,
        seed=seed,
        iterations=config.train.iterations if iterations is None else iterations,
        sampler=sampler or ("egs" if config.egs.enabled else config.train.sampler),
        threads=threads or config.train.threads,
    )
    index = stratify(ds, table, reward, config.egs)
    name = f"seed{seed}{tag}"
    ckdir = out / "checkpoints" / name
    log_path = out / "logs" / f"train_{name}.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)

    state = None
    if resume:
        ck = _latest_checkpoint(ckdir)
        if ck is not None:
            params, _, _, extra = load_checkpoint(ck)
            state = restore_train_state(params, extra)
            kept = []
            if log_path.exists():
                for line in log_path.read_text().splitlines():
                    rec = json.loads(line)
                    if rec["iteration"] < state.iteration:
                        kept.append(rec)
            log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))
            state.log = kept
            log.info("resuming %s from iteration %d", name, state.iteration)
    if state is None:
        log_path.write_text("")
        state = init_state(featurizer, space)

    state = train(tc, ds, table, index, featurizer, space, reward, state, log_path, ckdir)
    paths = {
        f"checkpoint_{name}": save_train_checkpoint(ckdir / "final.json", state, featurizer, space),
        f"train_log_{name}": log_path,
    }
    if figures and state.log:
        paths[f"fig_training_{name}"] = plot_training_curve(state.log, out / "figures" / f"training_{name}.png")
    return state, featurizer, space, paths


def cmd_train(config: ExperimentConfig, out: Path, resume: bool = False, threads: int | None = None) -> dict:
    load_artifacts(out)
    m = _prepare_out(config, out)
    results = {}
    for seed in config.seeds:
        state, _, _, paths = run_training(config, out, seed, resume=resume, threads=threads)
        for k, p in paths.items():
            m.add(k, p)
        results[seed] = state
        m.save()
    return results


def cmd_eval(config: ExperimentConfig, out: Path, checkpoint: Path | None = None) -> dict:
    ds, _, table = load_artifacts(out)
    m = _prepare_out(config, out)
    ckpts = [checkpoint] if checkpoint else [out / "checkpoints" / f"seed{s}" / "final.json" for s in config.seeds]
    missing = [str(c) for c in ckpts if not c.exists()]
    if missing:
        raise FileNotFoundError(f"missing checkpoints: {missing}; run `train` first")

    per_seed = []
    for ck in ckpts:
        params, featurizer, space, _ = load_checkpoint(ck)
        rep = eval_policy(params, ds, table, featurizer, space, "test", reward_config=config.reward)
        per_seed.append({"checkpoint": str(ck.relative_to(out)) if ck.is_relative_to(out) else str(ck), **rep.to_json()})

    rows = []
    for b in eval_baselines(table, ds):
        rows.append({"method": b.method, "macro_accuracy": b.macro_accuracy, "macro_f1": b.macro_f1,
                     "macro_accuracy_std": 0.0, "macro_f1_std": 0.0, "n_seeds": 0, "sandwich": "",
                     "note": b.note + (" f1 zero-division" if b.f1_zero_division else "")})
    acc_m, acc_s = mean_std([r["macro_accuracy"] for r in per_seed])
    f1_m, f1_s = mean_std([r["macro_f1"] for r in per_seed])
    rows.append({"method": "policy", "macro_accuracy": acc_m, "macro_f1": f1_m,
                 "macro_accuracy_std": acc_s, "macro_f1_std": f1_s, "n_seeds": len(per_seed),
                 "sandwich": all(r["sandwich"] for r in per_seed), "note": ""})
    paths = {
        "metrics_csv": _write_csv(out / "reports" / "metrics.csv", rows),
        "metrics_json": _dump(out / "reports" / "metrics.json", {"table": rows, "policy_per_seed": per_seed}),
        "fig_metrics": plot_method_bars(rows, out / "figures" / "metrics.png", err="macro_accuracy_std"),
    }
    for k, p in paths.items():
        m.add(k, p)
    m.save()
    return {"rows": rows, "per_seed": per_seed, "paths": paths}


def ablation_variants(config: ExperimentConfig, n_tools: int) -> list[tuple[str, dict]]:
    b = config.budget
    variants = [
        ("no_egs", {"sampler": "uniform"}),
        ("no_override", {"reward": dataclasses.replace(config.reward, override_alpha=0.0)}),
    ]
    for k in range(1, n_tools + 1):
        variants.append(
            (f"budget_{k}", {"budget": RolloutBudget(b.max_turns, b.max_parallel_calls, k)})
        )
    return variants


def cmd_ablate(config: ExperimentConfig, out: Path, threads: int | None = None) -> dict:
    ds, _, table = load_artifacts(out)
    m = _prepare_out(config, out)
    variants = ablation_variants(config, table.n_tools)
    per_variant = {}
    for name, overrides in variants:
        accs, f1s = [], []
        for seed in config.seeds:
            state, featurizer, space, _ = run_training(
                config,
                out,
                seed,
                tag=f"_{name}",
                iterations=config.ablate.iterations,
                threads=threads,
                figures=False,
                **overrides,
            )
            rep = eval_policy(state.params, ds, table, featurizer, space, config.ablate.split,
                              reward_config=overrides.get("reward", config.reward))
            accs.append(rep.macro_accuracy)
            f1s.append(rep.macro_f1)
            log.info("ablate %s seed %d acc %.4f", name, seed, rep.macro_accuracy)
        per_variant[name] = {"macro_accuracy": accs, "macro_f1": f1s}

    rows = []
    for name, vals in per_variant.items():
        am, asd = mean_std(vals["macro_accuracy"])
        fm, fsd = mean_std(vals["macro_f1"])
        rows.append({"method": name, "macro_accuracy": am, "macro_accuracy_std": asd,
                     "macro_f1": fm, "macro_f1_std": fsd, "n_seeds": len(vals["macro_accuracy"])})
    paths = {
        "ablation_csv": _write_csv(out / "reports" / "ablation.csv", rows),
        "ablation_json": _dump(out / "reports" / "ablation.json", {"rows": rows, "per_seed": per_variant}),
        "fig_ablation": plot_method_bars(rows, out / "figures" / "ablation.png", err="macro_accuracy_std"),
    }
    for k, p in paths.items():
        m.add(k, p)
    m.save()
    return {"rows": rows, "per_seed": per_variant, "paths": paths}


def cmd_lint(path: Path, budget: RolloutBudget) -> list[str]:
    return lint(Path(path).read_text(), budget)


# ------------------------------------------------------------------ argparse


def _resolve_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.out and (Path(args.out) / "config.frozen.json").exists():
        cfg = load_frozen(Path(args.out) / "config.frozen.json")
    else:
        raise ConfigError("no --config given and no frozen config in --out")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    if args.out:
        cfg = dataclasses.replace(cfg, out_dir=str(args.out))
    if getattr(args, "threads", None):
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, threads=args.threads))
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="toolsynergy", description="Instance-level tool synergy experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--out", help="output directory (defaults to experiment.out_dir)")
        p.add_argument("--seed", type=int, help="run a single seed instead of the configured set")
        p.add_argument("--threads", type=int, default=None, help="rollout worker threads")
        return p

    common(sub.add_parser("simulate", help="generate dataset and tool outputs"))
    common(sub.add_parser("analyze", help="risk, oracle and complementarity reports"))
    p = common(sub.add_parser("train", help="GRPO training per seed"))
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p = common(sub.add_parser("eval", help="policy and baseline metric table"))
    p.add_argument("--checkpoint", help="evaluate this checkpoint only")
    common(sub.add_parser("ablate", help="no-EGS, no-override and tool-budget variants"))
    p = sub.add_parser("lint-transcript", help="check a transcript file")
    p.add_argument("path")
    p.add_argument("--max-turns", type=int, default=4)
    p.add_argument("--max-parallel-calls", type=int, default=6)
    p.add_argument("--max-tool-calls", type=int, default=None)
    p = sub.add_parser("init-config", help="write the B1 benchmark config")
    p.add_argument("path")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "lint-transcript":
            budget = RolloutBudget(args.max_turns, args.max_parallel_calls, args.max_tool_calls)
            problems = cmd_lint(Path(args.path), budget)
            for line in problems:
                print(line)
            if not problems:
                print("ok")
            return EXIT_OK if not problems else EXIT_RUNTIME
        if args.command == "init-config":
            Path(args.path).write_text(B1_TOML)
            return EXIT_OK
        cfg = _resolve_config(args)
        out = Path(cfg.out_dir)
        if args.command == "simulate":
            paths = cmd_simulate(cfg, out)
            print("\n".join(str(p) for p in paths.values()))
        elif args.command == "analyze":
            res = cmd_analyze(cfg, out)
            r = res["risk"]
            print(f"best single risk {r.single_risk:.4f}  oracle risk {r.oracle_risk:.4f}  gap {r.synergy_gap:.4f}")
        elif args.command == "train":
            res = cmd_train(cfg, out, resume=args.resume, threads=args.threads)
            for seed, st in res.items():
                last = st.log[-1] if st.log else {}
                print(f"seed {seed}: {st.iteration} iterations, last reward {last.get('reward_overall', float('nan')):.4f}")
        elif args.command == "eval":
            res = cmd_eval(cfg, out, Path(args.checkpoint) if args.checkpoint else None)
            for r in res["rows"]:
                print(f"{r['method']:<24} acc {r['macro_accuracy']:.4f}  f1 {r['macro_f1']:.4f}")
        elif args.command == "ablate":
            res = cmd_ablate(cfg, out, threads=args.threads)
            for r in res["rows"]:
                print(f"{r['method']:<14} acc {r['macro_accuracy']:.4f} ± {r['macro_accuracy_std']:.4f}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, KeyError, LookupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
