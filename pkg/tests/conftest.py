import sys

import numpy as np
import pytest

from flmn import diffmath as dm


def central_diff(graph, loss, inputs, name, step=1e-5):
    """Plain central differences of the scalar ``loss`` w.r.t. one input."""
    base = {k: np.array(v, dtype=float) for k, v in inputs.items()}
    x = base[name]
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + step
        fp = float(dm.evaluate(graph, base, loss))
        x[idx] = old - step
        fm = float(dm.evaluate(graph, base, loss))
        x[idx] = old
        out[idx] = (fp - fm) / (2 * step)
    return out


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
