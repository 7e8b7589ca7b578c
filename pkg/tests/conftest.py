import numpy as np
import pytest

from topgnn.graph import build_graph

ACCEPTANCE_LINES: list[str] = []


def random_graph(n, p, seed):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    return build_graph(np.stack([iu[keep], ju[keep]], axis=1), n)


def path_graph(n):
    return build_graph([(i, i + 1) for i in range(n - 1)], n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def graph12():
    # connected 12-node graph with a few isolated-degree variations
    g = random_graph(12, 0.3, 7)
    return g


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def numeric_grad(f, params, eps=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``params`` (in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            fp = f()
            p[i] = old - eps
            fm = f()
            p[i] = old
            g[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-4):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
