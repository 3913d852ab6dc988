import sys

import numpy as np
import pytest
from hypothesis import settings

from promptspk.prompt import load_schema

settings.register_profile("repo", max_examples=60, deadline=None)
settings.load_profile("repo")


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)


def fd_check(loss_fn, arrays, grads, rng, probes=100, step=1e-5):
    """Central-difference check of ``grads`` against ``loss_fn()`` at ``probes``
    random entries of ``arrays`` (perturbed in place and restored).
    Returns the worst relative error."""
    sizes = np.array([a.size for a in arrays])
    worst = 0.0
    for _ in range(probes):
        k = rng.choice(len(arrays), p=sizes / sizes.sum())
        idx = np.unravel_index(rng.integers(arrays[k].size), arrays[k].shape)
        orig = arrays[k][idx]
        arrays[k][idx] = orig + step
        up = loss_fn()
        arrays[k][idx] = orig - step
        down = loss_fn()
        arrays[k][idx] = orig
        worst = max(worst, rel_err(grads[k][idx], (up - down) / (2 * step)))
    return worst


@pytest.fixture(scope="session")
def schema():
    return load_schema()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
