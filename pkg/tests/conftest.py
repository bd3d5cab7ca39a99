import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bwdq.dataset import Dataset, fill_next_actions

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_dataset(n=20, obs_dim=3, act_dim=2, discount=0.9, seed=0, traj_len=5, rewards=None):
    rng = np.random.default_rng(seed)
    starts = np.arange(0, n, traj_len) if n else np.zeros(0, dtype=np.int64)
    ds = Dataset(obs_dim, act_dim, discount, rng.normal(size=(n, obs_dim)), rng.uniform(-1, 1, size=(n, act_dim)),
                 rng.normal(size=n) if rewards is None else np.broadcast_to(rewards, (n,)).copy(),
                 rng.normal(size=(n, obs_dim)), np.zeros((n, act_dim)), np.zeros(n, bool), np.zeros(n, bool),
                 starts)
    return fill_next_actions(ds)


@pytest.fixture
def small_dataset():
    return make_dataset()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
