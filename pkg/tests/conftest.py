import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from obstacle_bbm.env import Environment, EnvironmentSpec, KillingFunction, empty_environment

settings.register_profile(
    "default",
    deadline=None,
    max_examples=int(os.environ.get("HYPOTHESIS_MAX_EXAMPLES", "40")),
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def env7():
    """d=2, nu=1, alpha=1, a=0.5, master seed 7."""
    return Environment(EnvironmentSpec(2, 1.0, KillingFunction(1.0, 0.5), master_seed=7))


@pytest.fixture
def blank2():
    return empty_environment(2, alpha=1.0, a=0.5)


def single_atom_env(point, alpha=1.0, a=0.5):
    env = empty_environment(len(point), alpha=alpha, a=a)
    return env.with_atoms(np.asarray([point], dtype=float))


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(name: str, ok: bool, detail: str) -> None:
        _VERDICTS.append(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
