import numpy as np
import pytest

from egma.contrastive import EmbeddingBundle
from egma.heatmap import GazeMatrices


def random_gaze(rng, m, n, density=0.4):
    gs = rng.random((m, n)) * (rng.random((m, n)) < density)
    peak = gs.max(axis=1, keepdims=True)
    gs = np.where(peak > 0, gs / np.where(peak > 0, peak, 1.0), 0.0)
    return GazeMatrices(gs, (gs > 0).astype(float))


@pytest.fixture
def toy_batch():
    """b=2 fixture: two bundles (n=3 patches, m=2 sentences, d=4), one gaze-free."""
    rng = np.random.default_rng(2024)
    batch = [EmbeddingBundle(rng.normal(size=(3, 4)), rng.normal(size=(2, 4))) for _ in range(2)]
    gs = np.array([[0.0, 1.0, 0.4], [0.0, 0.0, 0.0]])
    gaze = [GazeMatrices(gs, (gs > 0).astype(float)), None]
    return batch, gaze


_ACCEPTANCE = {}


@pytest.fixture
def record():
    """``record("A1", passed, detail)`` stores one acceptance line for the summary."""
    def _record(criterion, passed, detail):
        _ACCEPTANCE[criterion] = (bool(passed), detail)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if passed else 'FAIL'}: {detail}")
