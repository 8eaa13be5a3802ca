import json
from pathlib import Path

import pytest

from toolsynergy import cli
from toolsynergy.config import B1_TOML, load_config
from toolsynergy.grpo import DivergenceError

SMALL = """
[experiment]
dataset_seed = 3
seeds = [0, 1]
out_dir = "{out}"
[dataset]
n_instances = 240
region_masses = [0.5, 0.5]
[pool]
n_tools = 2
[train]
group_size = 4
batch_size = 6
iterations = {iters}
learning_rate = 2.0
checkpoint_every = 2
[ablate]
iterations = 2
"""


def write_cfg(tmp_path, name="cfg.toml", out="run", iters=4, extra=""):
    p = tmp_path / name
    p.write_text(SMALL.format(out=tmp_path / out, iters=iters) + extra)
    return str(p)


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(tmp)
    for cmd in ("simulate", "analyze", "train", "eval"):
        assert run(cmd, "--config", cfg) == 0
    return tmp, cfg, tmp / "run"


def test_simulate_idempotent_and_manifest(pipeline):
    tmp, cfg, out = pipeline
    before = {n: (out / n).read_bytes() for n in ("dataset.json", "tool_table.json")}
    assert run("simulate", "--config", cfg) == 0
    assert all((out / n).read_bytes() == b for n, b in before.items())
    man = json.loads((out / "manifest.json").read_text())
    assert {"dataset", "tool_table", "pool", "config"} <= set(man["artifacts"])
    assert man["config_hash"] == load_config(cfg).digest()
    assert "numpy" in man["versions"]


def test_invalid_masses_rejected_before_writing(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(f'[experiment]\nout_dir = "{tmp_path / "bad"}"\n[dataset]\nregion_masses = [0.5, 0.6]\n')
    assert run("simulate", "--config", cfg) == 1
    assert not (tmp_path / "bad").exists()


def test_unknown_key_is_config_error(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[train]\nlearnin_rate = 1.0\n")
    assert run("simulate", "--config", cfg) == 1


def test_missing_inputs_is_runtime_error(tmp_path):
    cfg = write_cfg(tmp_path, out="empty")
    assert run("train", "--config", cfg) == 2


def test_analyze_outputs(pipeline):
    _, _, out = pipeline
    rep = json.loads((out / "reports" / "risk_report.json").read_text())
    comp = json.loads((out / "reports" / "complementarity.json").read_text())
    assert rep["synergy_gap"] >= 0
    assert len(comp["marginal_curve"]) == 2
    assert (out / "figures" / "complementarity.png").stat().st_size > 0
    assert (out / "figures" / "marginal_curve.png").exists()


def test_train_logs_increase(pipeline):
    _, _, out = pipeline
    for seed in (0, 1):
        its = [json.loads(l)["iteration"] for l in (out / "logs" / f"train_seed{seed}.jsonl").read_text().splitlines()]
        assert its == sorted(set(its)) and len(its) == 4
        assert (out / "checkpoints" / f"seed{seed}" / "final.json").exists()


def test_resume_reproduces_uninterrupted(pipeline, tmp_path):
    _, _, out = pipeline
    cfg_short = write_cfg(tmp_path, "short.toml", out="r", iters=2)
    cfg_full = write_cfg(tmp_path, "full.toml", out="r", iters=4)
    assert run("simulate", "--config", cfg_short) == 0
    assert run("train", "--config", cfg_short, "--seed", 0) == 0
    assert run("train", "--config", cfg_full, "--seed", 0, "--resume") == 0
    r = tmp_path / "r"
    assert (r / "logs" / "train_seed0.jsonl").read_text() == (out / "logs" / "train_seed0.jsonl").read_text()
    a = json.loads((r / "checkpoints" / "seed0" / "final.json").read_text())
    b = json.loads((out / "checkpoints" / "seed0" / "final.json").read_text())
    assert a["weights"] == b["weights"] and a["bias"] == b["bias"]


def test_eval_table_and_repeatability(pipeline):
    _, cfg, out = pipeline
    csv_text = (out / "reports" / "metrics.csv").read_text()
    rows = csv_text.strip().splitlines()[1:]
    assert len(rows) == 6 and rows[-1].startswith("policy,")
    assert run("eval", "--config", cfg) == 0
    assert (out / "reports" / "metrics.csv").read_text() == csv_text
    metrics = json.loads((out / "reports" / "metrics.json").read_text())
    for r in metrics["policy_per_seed"]:
        assert r["sandwich"] == (r["oracle_risk"] <= r["policy_risk"] < r["single_risk"])


def test_ablate_variants(pipeline):
    _, cfg, out = pipeline
    variants = cli.ablation_variants(load_config(cfg), 2)
    assert len(variants) == 2 + 2
    assert dict(variants)["no_egs"] == {"sampler": "uniform"}
    assert run("ablate", "--config", cfg, "--seed", 0) == 0
    rows = (out / "reports" / "ablation.csv").read_text().strip().splitlines()[1:]
    assert [r.split(",")[0] for r in rows] == ["no_egs", "no_override", "budget_1", "budget_2"]
    assert (out / "figures" / "ablation.png").exists()


def test_divergence_exit_code(pipeline, monkeypatch):
    _, cfg, _ = pipeline

    def boom(*a, **k):
        raise DivergenceError("non-finite objective at iteration 0")

    monkeypatch.setattr(cli, "train", boom)
    assert run("train", "--config", cfg, "--seed", 0) == 3


def test_lint_transcript(tmp_path, capsys):
    good = tmp_path / "good.txt"
    good.write_text('q\n<tools>[{"name": "tool_0"}]</tools>\n<answer>0.4</answer>')
    assert run("lint-transcript", good) == 0
    bad = tmp_path / "bad.txt"
    bad.write_text('q\n<tools>[{"name": "tool_0"}]</tools>\n<answer>1.4</answer>')
    assert run("lint-transcript", bad) == 2
    assert "answer outside [0,1]" in capsys.readouterr().out


def test_b1_config_parses(tmp_path):
    assert run("init-config", tmp_path / "b1.toml") == 0
    cfg = load_config(tmp_path / "b1.toml")
    assert cfg.train.batch_size == 64 and cfg.train.group_size == 16 and cfg.train.iterations == 300
    assert len(cfg.seeds) == 5
    assert (tmp_path / "b1.toml").read_text() == B1_TOML == Path(__file__).parents[1].joinpath("configs/b1.toml").read_text()
