import numpy as np
import pytest

from ctrldt.environments import LinearSystemSpec, RewardSpec
from ctrldt.tasks import TaskSpec, is_detectable, is_stabilizable


def random_system(rng, n_s=4, n_a=2, n_o=2, noise_cov=0.01, radius=1.05, n_steps=50):
    """Random (A, B2, C) with spectral radius ``radius``, stabilizable and detectable."""
    while True:
        A = rng.standard_normal((n_s, n_s))
        A *= radius / max(abs(np.linalg.eigvals(A)))
        B = rng.standard_normal((n_s, n_a))
        C = rng.standard_normal((n_o, n_s))
        if is_stabilizable(A, B) and is_detectable(A, C):
            return LinearSystemSpec(A=A, B2=B, C=C, noise_cov=noise_cov, n_steps=n_steps)


def random_task(rng, task_id="rand", **kw):
    sys = random_system(rng, **kw)
    return TaskSpec(env=sys, reward=RewardSpec.identity(sys.n_s, sys.n_a), task_id=task_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
