import numpy as np
import pytest

from neurotype import datapipe as dp

# Filled by test_acceptance.py, printed at the end of the session.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def central_difference(f, arrays, step=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each array (in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = a[i]
            a[i] = orig + step
            up = f()
            a[i] = orig - step
            down = f()
            a[i] = orig
            g[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return np.linalg.norm(analytic - numeric) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs_splits():
    data = dp.synth_blobs(n=600, seed=0)
    parts = dp.split(data, dp.SplitSpec(0.8, 0, 0.2, seed=0, stratify_on="subclass"))
    stats = dp.fit_normalize(parts["train"])
    return {k: dp.apply_normalize(v, stats) for k, v in parts.items()}, data
