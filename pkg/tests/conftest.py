import numpy as np
import pytest

from hypersub.hypergraph import build_hypergraph


def random_hypergraph(rng, max_nodes=12, max_edges=6, allow_isolated=True):
    """Small random hypergraph with random positive weights."""
    n = int(rng.integers(2, max_nodes + 1))
    e = int(rng.integers(1, max_edges + 1))
    lists = []
    for _ in range(e):
        size = int(rng.integers(1, n + 1))
        lists.append(rng.choice(n, size=size, replace=False).tolist())
    if not allow_isolated:
        covered = set(i for lst in lists for i in lst)
        missing = [i for i in range(n) if i not in covered]
        if missing:
            lists[0] = sorted(set(lists[0]) | set(missing))
    weights = rng.uniform(0.2, 3.0, size=e)
    return build_hypergraph(lists, edge_weights=weights, num_nodes=n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
