import numpy as np
import pytest

from conftest import max_rel_error, numeric_grad, random_graph
from topgnn.baselines import (
    HistoryStore,
    forward_gas,
    forward_plain_subgraph,
    full_gradient,
    train_full_batch,
)
from topgnn.graph import batch_context
from topgnn.linalg import ShapeError
from topgnn.models import AccessCounter, GnnModel, backward, forward_full, softmax_xent


@pytest.fixture
def setup(rng):
    g = random_graph(20, 0.2, 5)
    x = rng.standard_normal((20, 3))
    labels = rng.integers(0, 2, 20)
    return g, x, labels


@pytest.mark.parametrize("arch", ["gcn", "sage"])
class TestGas:
    def test_zero_history_equals_plain(self, arch, setup):
        g, x, _ = setup
        m = GnnModel.init(arch, [3, 4, 2], seed=0)
        ctx = batch_context(g, range(7))
        hist = HistoryStore.zeros(g.n, m)
        h_gas, _ = forward_gas(m, ctx, x[ctx.batch], hist, update=False)
        np.testing.assert_allclose(h_gas, forward_plain_subgraph(m, ctx, x[ctx.batch]), atol=1e-12)

    def test_fresh_history_is_exact(self, arch, setup):
        g, x, _ = setup
        m = GnnModel.init(arch, [3, 4, 2], seed=1)
        ctx = batch_context(g, [1, 5, 9, 13])
        hist = HistoryStore.warm_start(m, g, x)
        hf, _ = forward_full(m, g, x)
        h, _ = forward_gas(m, ctx, x[ctx.batch], hist)
        np.testing.assert_allclose(h, hf[ctx.batch], atol=1e-12)

    def test_gradient(self, arch, setup):
        g, x, labels = setup
        ctx = batch_context(g, range(8))
        stale = GnnModel.init(arch, [3, 4, 2], activation="leaky_relu", seed=2)
        hist = HistoryStore.warm_start(stale, g, x)
        m = GnnModel.init(arch, [3, 4, 2], activation="leaky_relu", seed=3)
        yb = labels[ctx.batch]

        def loss():
            h, _ = forward_gas(m, ctx, x[ctx.batch], hist, update=False)
            return softmax_xent(h, yb, np.arange(8))[0]

        h, tape = forward_gas(m, ctx, x[ctx.batch], hist, update=False)
        _, g_out = softmax_xent(h, yb, np.arange(8))
        grads, _ = backward(m, tape, g_out)
        assert max_rel_error(grads, numeric_grad(loss, m.params)) < 1e-5


class TestHistory:
    def test_push_and_staleness(self, setup):
        g, x, _ = setup
        m = GnnModel.init("gcn", [3, 4, 2], seed=0)
        hist = HistoryStore.zeros(g.n, m)
        ctx = batch_context(g, [0, 1, 2])
        forward_gas(m, ctx, x[ctx.batch], hist)
        np.testing.assert_array_equal(hist.tables[0][[0, 1, 2]], x[[0, 1, 2]])
        assert np.all(hist.tables[1][3:] == 0)
        forward_gas(m, batch_context(g, [5]), x[[5]], hist)
        assert hist.staleness[0] == 1 and hist.staleness[5] == 0

    def test_counter_includes_boundary_reads(self, setup):
        g, x, _ = setup
        m = GnnModel.init("gcn", [3, 4, 2], seed=0)
        ctx = batch_context(g, range(5))
        c = AccessCounter()
        forward_gas(m, ctx, x[ctx.batch], HistoryStore.zeros(g.n, m), counter=c, update=False)
        assert c.rows == 2 * (5 + ctx.boundary.size)

    def test_shape_checks(self, setup):
        g, x, _ = setup
        m = GnnModel.init("gcn", [3, 4, 2], seed=0)
        ctx = batch_context(g, range(5))
        with pytest.raises(ShapeError):
            forward_gas(m, ctx, x[:4], HistoryStore.zeros(g.n, m))
        other = GnnModel.init("gcn", [3, 2], seed=0)
        with pytest.raises(ShapeError):
            forward_gas(m, ctx, x[:5], HistoryStore.zeros(g.n, other))


class TestFullBatch:
    def test_loss_decreases(self, setup):
        g, x, labels = setup
        m = GnnModel.init("gcn", [3, 8, 2], seed=0)
        trained, losses = train_full_batch(m, g, x, labels, np.arange(20), epochs=30, lr=0.5)
        assert losses[-1] < losses[0]
        # input model untouched
        np.testing.assert_array_equal(m.params[0], GnnModel.init("gcn", [3, 8, 2], seed=0).params[0])

    def test_full_gradient_fd(self, setup):
        g, x, labels = setup
        m = GnnModel.init("sage", [3, 3, 2], activation="leaky_relu", seed=4)
        mask = np.arange(0, 20, 2)
        _, grads = full_gradient(m, g, x, labels, mask)
        num = numeric_grad(lambda: full_gradient(m, g, x, labels, mask)[0], m.params)
        assert max_rel_error(grads, num) < 1e-5
