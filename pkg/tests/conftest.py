import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import vffgp  # noqa: F401  (enables x64 before any jax array is created)

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

ORDERS = ("1/2", "3/2", "5/2")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (status, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
