import numpy as np
import pytest

from deqkg.datasets import fd2_graph
from deqkg.graph import KnowledgeGraph


@pytest.fixture
def fd2_depth2():
    return fd2_graph([2])


@pytest.fixture
def small_graph():
    # 6 nodes, 2 relations, includes a parallel edge and a cycle
    return KnowledgeGraph(
        [(0, 0, 1), (1, 1, 2), (2, 0, 0), (3, 1, 4), (4, 0, 5), (5, 1, 3), (0, 1, 1), (2, 1, 3)], 6, 2
    )


def random_graph(rng: np.random.Generator, max_nodes=12, max_rels=3, density=0.25) -> KnowledgeGraph:
    N = int(rng.integers(1, max_nodes + 1))
    R = int(rng.integers(1, max_rels + 1))
    mask = rng.random((N, R, N)) < density
    return KnowledgeGraph(np.argwhere(mask), N, R)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record the one-line outcome of an acceptance criterion."""
    def record(n: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
