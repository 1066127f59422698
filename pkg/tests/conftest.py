import numpy as np
import pytest

from kgbs.graph import KnowledgeGraph

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").lstrip("#"))):
            terminalreporter.write_line(line)


def random_graph(rng, n, p=0.15, labels=True, bias_p=0.2):
    """Erdos-Renyi style graph with optional Bernoulli labels."""
    edges = [(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < p]
    y = (rng.random(n) < bias_p).astype(np.int8) if labels else None
    return KnowledgeGraph.from_edges(n, edges, labels=y)


def path_graph(n, labels=None):
    return KnowledgeGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)], labels=labels)


def star_graph(n_leaves, labels=None):
    return KnowledgeGraph.from_edges(n_leaves + 1, [(0, i) for i in range(1, n_leaves + 1)], labels=labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
