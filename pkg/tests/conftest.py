import numpy as np
import pytest


def fd_grad(f, x, h=1e-6):
    """Plain central differences, kept separate from the package's own checker."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.abs(a).max(), np.abs(b).max())
    return 0.0 if scale == 0 else float(np.abs(a - b).max() / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA_LINES = []


def record_criterion(label, passed, detail):
    """Print a one-line verdict now and repeat it in the terminal summary."""
    line = f"{'PASS' if passed else 'FAIL'} {label}: {detail}"
    print(line)
    CRITERIA_LINES.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
