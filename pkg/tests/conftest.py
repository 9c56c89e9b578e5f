import numpy as np
import pytest

from lidartrack import autodiff as ad


def numeric_grad(fn, arrays, eps=1e-6):
    """Central differences of scalar ``fn()`` w.r.t. every entry of each array (mutated in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = fn()
            a[i] = old - eps
            lo = fn()
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def rel_err(analytic, numeric):
    """Relative error ||a - n|| / (||a|| + ||n||); an absolute floor covers true zeros."""
    diff = np.linalg.norm(analytic - numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale < 1e-8:
        return diff
    return diff / scale


def tape_grads(build, params):
    """Run ``build()`` under a tape and return (loss value, grads for ``params``)."""
    with ad.Tape() as tape:
        loss = build()
    return float(loss.data), tape.backward(loss, params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts at the end of the run, uncaptured."""
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
