import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from selftrain_backdoor.dataio import ImageDataset, make_synthetic

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion number -> (passed, detail), filled by test_acceptance
CRITERIA = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_fixture():
    return make_synthetic(4, 12, 8, seed=0, name="small")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_dataset(rng, n=6, side=8, classes=3, labeled=True):
    imgs = rng.random((n, side, side, 3), dtype=np.float32)
    labels = rng.integers(0, classes, n) if labeled else None
    return ImageDataset(imgs, labels, classes, "random")
