import numpy as np
import pytest

from cmetrack.types import FeatureMap, Mask, MemoryBank, make_rng

ACCEPTANCE_LINES = []


def drift_sequence(seed, h=4, w=4, c=6, frames=10, step=0.15, noise=0.05):
    """Random frame drifting along a fixed direction, with random binary fg masks."""
    rng = make_rng(seed)
    base = rng.standard_normal((h, w, c))
    direction = rng.standard_normal((h, w, c))
    seq = []
    for t in range(frames):
        data = base + step * t * direction + noise * rng.standard_normal((h, w, c))
        fg = (rng.uniform(size=(h, w)) < 0.4).astype(float)
        seq.append((FeatureMap(data), Mask(fg)))
    return seq


def random_bank(rng, n, c, binary=False):
    keys = rng.standard_normal((n, c))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    fg = (rng.uniform(size=n) < 0.5).astype(float) if binary else rng.uniform(size=n)
    return MemoryBank(keys, fg, 1.0 - fg, n_initial=n)


@pytest.fixture
def rng():
    return make_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
