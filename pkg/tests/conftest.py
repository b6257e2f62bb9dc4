import numpy as np
import pytest

from bym2.graph import Graph


def random_connected_graph(rng, n, extra_edge_prob=0.15):
    """Random spanning tree plus extra edges; always connected."""
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < extra_edge_prob:
                edges.append((i, j))
    perm = rng.permutation(n)
    return Graph.from_edges(n, [(perm[i], perm[j]) for i, j in edges])


@pytest.fixture
def p2():
    return Graph.from_edges(2, [(0, 1)])


@pytest.fixture
def p3():
    return Graph.from_edges(3, [(0, 1), (1, 2)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, echoed at the end of the run
ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    verdict = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    line = f"criterion {number:>2}: {verdict}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
