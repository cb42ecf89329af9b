import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedsketch.lora import Batch, LoraState
from fedsketch.timing import ClientProfile

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_state(rng, m=4, n=5, gamma=4, scale=0.5):
    """LoRA state with nonzero B so every gradient path is exercised."""
    return LoraState(
        rng.standard_normal((m, n)) * scale,
        rng.standard_normal((m, gamma)) * scale,
        rng.standard_normal((gamma, n)) * scale,
    )


def random_batch(rng, n=5, m=4, size=6):
    return Batch(rng.standard_normal((size, n)), rng.integers(0, m, size=size))


def random_profiles(rng, N, tau=(0.5, 5.0), t=(1.0, 50.0)):
    a = rng.dirichlet(np.ones(N))
    a = np.maximum(a, 1e-3)
    a /= a.sum()
    return [ClientProfile(float(a[i]), float(rng.uniform(*tau)), float(rng.uniform(*t)))
            for i in range(N)]


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
