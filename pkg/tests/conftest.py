import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from amortlab.task_gen import Task

settings.register_profile("amortlab", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("amortlab")


def random_task(rng, p=3, n_obs=7, seed=0):
    x = rng.standard_normal((n_obs, p))
    beta = rng.standard_normal(p)
    return Task(x, x @ beta + 0.1 * rng.standard_normal(n_obs), beta, n_obs, "test", seed)


def jitter(params, rng, scale=0.1):
    """Move parameters off ReLU kinks and zero biases before finite differences."""
    for p in params:
        p += scale * rng.standard_normal(p.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[str, str] = {}


def record_criterion(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[name] = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    print(ACCEPTANCE[name])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[1].rstrip("ab"))):
            terminalreporter.write_line(ACCEPTANCE[key])
