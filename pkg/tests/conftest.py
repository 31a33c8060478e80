import numpy as np
import pytest
import torch

from stvsa.core.types import Dataset, GridTopology, Label, Provenance
from stvsa.gridgen import SimConfig, build_ieee39_topology, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def topo39():
    return build_ieee39_topology()


@pytest.fixture
def path3():
    return GridTopology(3, ((0, 1), (1, 2)))


@pytest.fixture
def ring5():
    return GridTopology(5, ((0, 1), (1, 2), (2, 3), (3, 4), (4, 0)))


@pytest.fixture(scope="session")
def small_raw(topo39):
    """60 simulated scenarios at 20 Hz (30 steps): quick to build, has all label kinds."""
    return generate_dataset(60, topo39, SimConfig(record_dt=0.05), master_seed=11)


def random_dataset(topo, n, steps=6, channels=4, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    feats = rng.random((n, topo.node_count, steps, channels)).astype(np.float32)
    if labels is None:
        labels = rng.integers(0, 2, n)
    return Dataset(topo, feats, labels, [Provenance.SIMULATED] * n, [{"i": i} for i in range(n)], seed=seed)


def two_blob_dataset(topo, n, steps=8, seed=0, gap=0.5):
    """Stable samples sit near 0.5 + gap/2, unstable near 0.5 - gap/2; separable by the mean."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    centre = np.where(y == 1, 0.5 + gap / 2, 0.5 - gap / 2)
    feats = centre[:, None, None, None] + 0.03 * rng.standard_normal((n, topo.node_count, steps, 4))
    feats = np.clip(feats, 0, 1).astype(np.float32)
    return Dataset(topo, feats, y, [Provenance.SIMULATED] * n, seed=seed)


def labels_of(ds):
    return [Label(int(v)) for v in ds.labels]


# --- acceptance summary ---------------------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: str, ok: bool, detail: str) -> None:
    """Print and remember one pass/fail line; the lines are repeated in the terminal summary."""
    line = f"criterion {number:>3s}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
