import numpy as np
import pytest

from emocaps import tensor as tc


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.empty_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / (np.abs(a).max() + np.abs(b).max() + 1e-12)


@pytest.fixture
def rng():
    return tc.Rng(1234)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for name, ok, detail in ACCEPTANCE:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
