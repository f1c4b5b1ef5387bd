from pathlib import Path

import numpy as np
import pytest

from cordes_mfg.config import build_problem, load_config
from cordes_mfg.mfg import solve_mfg

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def random_symmetric(rng, size=None, scale=1.0):
    shape = (2, 2) if size is None else (size, 2, 2)
    R = rng.normal(scale=scale, size=shape)
    return 0.5 * (R + np.swapaxes(R, -1, -2))


@pytest.fixture(scope="session")
def reference_config():
    return load_config(CONFIGS / "reference.yaml")


@pytest.fixture(scope="session")
def reference_spec(reference_config):
    return build_problem(reference_config)


@pytest.fixture(scope="session")
def reference_solution(reference_spec, reference_config):
    return solve_mfg(reference_spec, reference_config.solver)


ACCEPTANCE_LINES: list = []


def record_criterion(number, title, ok, detail):
    """Print and store one PASS/FAIL line; the caller then asserts ``ok``."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
