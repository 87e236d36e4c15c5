import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_boxes(rng, n, spread=2.0):
    b = np.empty((n, 7))
    b[:, 0:3] = rng.uniform(-spread, spread, (n, 3))
    b[:, 3:6] = rng.uniform(0.5, 3.0, (n, 3))
    b[:, 6] = rng.uniform(-np.pi, np.pi, n)
    return b


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE: dict = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (title, ok, detail)
    print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {title} {detail}".rstrip())
