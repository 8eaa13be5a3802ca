import numpy as np
import pytest

from toolsynergy.policy import ActionSpace, Featurizer
from toolsynergy.protocol import RolloutBudget
from toolsynergy.simenv import DatasetConfig, disjoint_expert_pool, generate_dataset, precompute_tool_table


@pytest.fixture(scope="session")
def small_world():
    """Three disjoint experts over a few hundred instances."""
    ds = generate_dataset(DatasetConfig(n_instances=300, n_queries=2), seed=11)
    pool = disjoint_expert_pool(3, 2)
    table = precompute_tool_table(pool, ds)
    feat = Featurizer(ds.n_features, ds.n_queries, 3, RolloutBudget())
    return ds, pool, table, feat, ActionSpace(3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_params(feat, space, rng, scale=0.5):
    from toolsynergy.policy import PolicyParams

    return PolicyParams(rng.normal(0, scale, (feat.dim, space.size)), rng.normal(0, scale, space.size))


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
