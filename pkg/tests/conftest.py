import os
from pathlib import Path

import numpy as np
import pytest

from laddervat import ladder
from laddervat.data import load_mnist, mnist_paths
from laddervat.numerics import RngStream

MNIST_DIR = Path(os.environ.get("LADDERVAT_MNIST", "/root/data/mnist"))


def mnist_available() -> bool:
    try:
        mnist_paths(MNIST_DIR)
    except FileNotFoundError:
        return False
    return True


def pytest_collection_modifyitems(config, items):
    if mnist_available():
        return
    skip = pytest.mark.skip(reason=f"MNIST IDX files not found under {MNIST_DIR} "
                                   "(set LADDERVAT_MNIST)")
    for item in items:
        if "mnist" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def mnist():
    return load_mnist(MNIST_DIR)


@pytest.fixture
def small_params():
    return ladder.LadderParams.init((6, 5, 4, 3), RngStream(0).child("w"), dtype=np.float64)


@pytest.fixture
def small_batches():
    rng = RngStream(1)
    x_l = rng.child("xl").normal((5, 6))
    y_l = np.array([0, 1, 2, 1, 0])
    x_u = rng.child("xu").normal((7, 6))
    return (x_l, y_l), x_u


_CRITERIA: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)`` for the end-of-session summary."""
    def record(number: int, passed: bool, detail: str):
        _CRITERIA.setdefault(number, []).append((bool(passed), detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        results = _CRITERIA[number]
        status = "PASS" if all(ok for ok, _ in results) else "FAIL"
        detail = " | ".join(d for _, d in results)
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
