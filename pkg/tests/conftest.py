import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]


def mnist_dir() -> Path:
    return Path(os.environ.get("SORTPOOL_MNIST_DIR", ROOT / "data" / "mnist"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def mnist_path():
    d = mnist_dir()
    if not (d / "train-images-idx3-ubyte").exists() and not (d / "train-images-idx3-ubyte.gz").exists():
        pytest.skip(f"MNIST files not found in {d} (set SORTPOOL_MNIST_DIR)")
    return d


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance(request, capsys):
    """Record and echo one PASS/FAIL line for an acceptance criterion, then assert it."""
    def report(number: int, title: str, passed: bool, detail: str):
        line = f"criterion {number} {'PASS' if passed else 'FAIL'} - {title}: {detail}"
        request.config.acceptance_lines.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert passed, line
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
