import numpy as np
import pytest

from fglab import datagen, models
from fglab.numkit import rng_stream


def finite_diff(f, w, h=1e-5):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def principal_angle_sin(A, B):
    """Sine of the largest principal angle between the column spans of A and B."""
    Qa, _ = np.linalg.qr(A)
    Qb, _ = np.linalg.qr(B)
    return float(np.linalg.norm(Qb - Qa @ (Qa.T @ Qb), 2))


@pytest.fixture(scope="session")
def digits_pool():
    return datagen.make_digits(120, rng_stream(0, "digits"))


@pytest.fixture(scope="session")
def small_digits(digits_pool):
    X, y = digits_pool
    return datagen.partition_noniid(X, y, 20, 2, rng_stream(0, "part"))


@pytest.fixture(scope="session")
def mclr_digits():
    return models.ModelSpec(models.MCLR, 64, 10)


ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Log an acceptance criterion outcome; echoed again in the run summary."""
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
