import numpy as np
import pytest

from otblab.oracle import enumerate_space
from otblab.policy import Policy
from otblab.rewards import RewardModel

ACCEPTANCE_LINES: list[str] = []


def random_policy(rng, kind="tabular", vocab=None, t_max=None, sigma=1.0, feature_dim=3):
    V = int(vocab or rng.integers(2, 5))
    T = int(t_max or rng.integers(1, 6))
    return Policy.create(kind, V, T, feature_dim=feature_dim, init="gaussian",
                         sigma=sigma, seed=int(rng.integers(2**31)))


def random_reward(rng, vocab):
    """Dense per-token rewards keep every step's return non-trivial."""
    if rng.random() < 0.5:
        return RewardModel.dense(rng.normal(size=vocab).round(3))
    return RewardModel.terminal_target(int(rng.integers(1, vocab)), float(rng.uniform(0.5, 2.0)))


def random_instance(seed, kind="tabular", **kw):
    rng = np.random.default_rng(seed)
    pol = random_policy(rng, kind, **kw)
    rm = random_reward(rng, pol.vocab_size)
    return pol, rm, enumerate_space(pol)


@pytest.fixture
def small_space():
    pol = Policy.create("tabular", 3, 3, init="gaussian", sigma=0.7, seed=11)
    rm = RewardModel.dense((0.0, 1.0, -0.5))
    return pol, rm, enumerate_space(pol)


@pytest.fixture
def report():
    """Record an acceptance line: printed inline and repeated in the terminal summary."""
    def _report(criterion: int, passed: bool, detail: str) -> None:
        line = f"[criterion {criterion:2d}] {'PASS' if passed else 'FAIL'}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
