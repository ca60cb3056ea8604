import os
from pathlib import Path

import numpy as np
import pytest

from nodecul.graph import Graph

ROOT = Path(__file__).resolve().parents[1]
CORA_DIR = ROOT / "data" / "cora"
CITESEER_DIR = ROOT / "data" / "citeseer"


def random_graph(rng, n, p=0.15, dim=4, classes=3, features=None):
    """Erdos-Renyi graph with dense gaussian features and random labels."""
    iu = np.triu_indices(n, 1)
    keep = rng.random(len(iu[0])) < p
    feats = rng.normal(size=(n, dim)) if features is None else features
    return Graph.from_edges(n, iu[0][keep], iu[1][keep], feats,
                            rng.integers(0, classes, size=n), classes)


def sbm_graph(n=20, p_in=0.6, p_out=0.02, dim=8, seed=0):
    """Two-block SBM; features are noisy block indicators."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    src, dst = [], []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < (p_in if labels[i] == labels[j] else p_out):
                src.append(i)
                dst.append(j)
    feats = rng.normal(scale=0.5, size=(n, dim))
    feats[:, 0] += np.where(labels == 0, 1.0, -1.0)
    return Graph.from_edges(n, src, dst, feats, labels, 2)


def path_graph(n, dim=3, labels=None):
    feats = np.eye(n, dim) if dim >= n else np.ones((n, dim))
    labels = np.zeros(n, dtype=np.int64) if labels is None else labels
    return Graph.from_edges(n, np.arange(n - 1), np.arange(1, n), feats, labels, int(max(labels)) + 1)


@pytest.fixture(scope="session")
def cora():
    from nodecul.datasets import load_planetoid_files
    content, cites = CORA_DIR / "cora.content.gz", CORA_DIR / "cora.cites.gz"
    if not content.is_file():
        pytest.skip("Cora files not available")
    return load_planetoid_files(content, cites)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def jobs() -> int:
    return max(1, min(4, os.cpu_count() or 1))


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
