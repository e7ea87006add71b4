import sys
import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_gradients(fn, params, h=1e-5):
    """Central finite differences of a scalar ``fn()`` w.r.t. arrays modified in place."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = fn()
            p[i] = old - h
            down = fn()
            p[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def max_rel_error(a, b, floor=1e-6):
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))))


TINY_CONFIG = """
[experiment]
env = pendulum
seeds = 0, 1
epochs = 2
env_steps_per_epoch = 100
iterations_per_epoch = 2
eval_episodes = 2
episode_length = 50
threshold = -300
random_epochs = 1

[model]
ensemble_size = 2
select = 1
hidden = 16
epochs_per_round = 2
batch_size = 32
min_data = 50

[mpc]
horizon = 5
rollouts = 10
model_transitions_per_epoch = 100

[sac]
hidden = 16
batch_size = 32
updates_per_epoch = 20
mpc_capacity = 500

[ars]
iterations = 3
directions = 2
top = 1

[demolayer]
horizon = 5
rollouts = 8
model_data = 300
policy_env = cartpole

[regret]
rounds = 50
grid = 20
"""


@pytest.fixture
def tiny_cfg():
    from demorl.config import load_config

    return load_config(text=TINY_CONFIG)


def pytest_terminal_summary(terminalreporter):
    verdicts = getattr(sys.modules.get("test_acceptance"), "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
