from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

REPO = Path(__file__).resolve().parents[1]
MNIST_DIR = REPO / "data" / "mnist10k"


def central_differences(fn, params: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Independent gradient oracle: (f(p + h e_i) - f(p - h e_i)) / 2h."""
    grad = np.empty_like(params)
    for i in range(params.size):
        up = params.copy()
        down = params.copy()
        up[i] += step
        down[i] -= step
        grad[i] = (fn(up) - fn(down)) / (2 * step)
    return grad


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_paths() -> tuple[Path, Path]:
    images = MNIST_DIR / "images-idx3-ubyte.gz"
    labels = MNIST_DIR / "labels-idx1-ubyte.gz"
    if not images.exists():
        pytest.skip("bundled MNIST sample missing")
    return images, labels


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
