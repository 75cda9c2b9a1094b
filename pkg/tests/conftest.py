import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from famm.data import build_dataset

settings.register_profile(
    "famm", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("famm")


def make_dataset(n=12, T=15, seed=0, scalars=("z",), functional=("x",), groups=None, H=21):
    """Small regular-grid dataset with random covariates and a smooth response."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, T)
    recs = []
    for i in range(n):
        y = np.sin(2 * np.pi * t) + rng.normal(0, 0.1, T)
        recs += [(i + 1, tt, yy) for tt, yy in zip(t, y)]
    ids = list(range(1, n + 1))
    st = {"curve_id": ids}
    for name in scalars:
        st[name] = rng.uniform(0, 1, n)
    ft = {}
    s = np.linspace(0, 1, H)
    for name in functional:
        ft[name] = (s, ids, rng.normal(size=(n, 3)) @ np.vstack([np.ones(H), s, np.cos(np.pi * s)]))
    gt = None
    if groups:
        gt = {"curve_id": ids, "g": (np.arange(n) % groups) + 1}
    return build_dataset(recs, st if scalars else None, ft or None, gt)


@pytest.fixture
def small_ds():
    return make_dataset()


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


ACCEPTANCE_LINES = []


def record_criterion(number, name, ok, detail):
    """Print and keep one pass/fail line for the acceptance summary."""
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
