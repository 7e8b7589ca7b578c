import numpy as np
import pytest

from conftest import random_graph
from topgnn.compensation import (
    CacheHeader,
    CompensationError,
    FlopCounter,
    apply_compensation,
    basic_embeddings,
    build_compensation_exact,
    build_compensation_fast,
    estimate_r_exact,
    load_cache,
    partition_digest,
    precompute_all,
    save_cache,
)
from topgnn.datasets import copy_nodes, gen_duplication, gen_two_orbit
from topgnn.graph import batch_context
from topgnn.models import GnnModel, forward_batch, forward_full


def residual(h_c, est):
    return float(np.linalg.norm(h_c - est))


class TestBasicEmbeddings:
    def test_layout(self, rng):
        g = random_graph(10, 0.3, 0)
        x = rng.standard_normal((10, 3))
        hb = basic_embeddings(g, x, "gcn", num_layers=2, hidden=4, n_inits=2, seed=1)
        assert hb.layer_dims == [3, 4, 4, 3, 4, 4]
        assert hb.matrix.shape == (10, 22)
        np.testing.assert_array_equal(hb.matrix[:, :3], x)
        assert hb.seeds[0] != hb.seeds[1]

    def test_zero_layers_is_features(self, rng):
        g = random_graph(6, 0.3, 0)
        x = rng.standard_normal((6, 2))
        np.testing.assert_array_equal(basic_embeddings(g, x, num_layers=0).matrix, x)

    def test_deterministic(self, rng):
        g = random_graph(10, 0.3, 0)
        x = rng.standard_normal((10, 3))
        a = basic_embeddings(g, x, "sage", 2, 4, 3, seed=7).matrix
        b = basic_embeddings(g, x, "sage", 2, 4, 3, seed=7).matrix
        np.testing.assert_array_equal(a, b)

    def test_errors(self, rng):
        g = random_graph(6, 0.3, 0)
        with pytest.raises(CompensationError):
            basic_embeddings(g, np.zeros((5, 2)))
        with pytest.raises(CompensationError):
            basic_embeddings(g, np.zeros((6, 2)), n_inits=0)


class TestExactEstimator:
    def test_is_least_squares(self, rng):
        g = random_graph(30, 0.15, 1)
        h = rng.standard_normal((30, 5))
        ctx = batch_context(g, range(12))
        r = estimate_r_exact(h, ctx)
        assert r.shape == (ctx.boundary.size, 12)
        resid = h[ctx.boundary] - r @ h[ctx.batch]
        # residual is orthogonal to the row space of H_B
        np.testing.assert_allclose(resid @ h[ctx.batch].T, 0, atol=1e-9)

    def test_empty_boundary(self, rng):
        g = random_graph(8, 0.3, 0)
        ctx = batch_context(g, range(8))
        assert estimate_r_exact(rng.standard_normal((8, 2)), ctx).shape == (0, 8)
        comp = build_compensation_exact(rng.standard_normal((8, 2)), ctx)
        assert np.all(comp.d_hat_a == 0)

    def test_exact_when_boundary_in_span(self, rng):
        g = random_graph(20, 0.2, 2)
        ctx = batch_context(g, range(10))
        h = rng.standard_normal((20, 4))
        mix = rng.standard_normal((10, 10))
        h[10:] = mix @ h[:10]
        r = estimate_r_exact(h, ctx)
        np.testing.assert_allclose(r @ h[ctx.batch], h[ctx.boundary], atol=1e-10)


class TestFastEstimator:
    def test_full_rank_matches_exact_residual(self, rng):
        g = random_graph(30, 0.15, 3)
        h = rng.standard_normal((30, 6))
        ctx = batch_context(g, range(10))
        exact = estimate_r_exact(h, ctx)
        comp = build_compensation_fast(h, ctx, k=ctx.size, seed=0)
        assert comp.k == ctx.size and comp.rank == 6
        np.testing.assert_array_equal(comp.s_local, np.arange(10))
        re = residual(h[ctx.boundary], exact @ h[ctx.batch])
        rf = residual(h[ctx.boundary], comp.boundary_estimate(h[ctx.batch]))
        assert abs(re - rf) < 1e-8

    def test_sizes_clamped(self, rng):
        g = random_graph(30, 0.15, 3)
        h = rng.standard_normal((30, 4))
        ctx = batch_context(g, range(10))
        comp = build_compensation_fast(h, ctx, k=6, seed=1)
        assert comp.k == 6 and comp.rank == 4
        assert comp.q_s.shape == (4, 6) and comp.d_hat_a.shape == (10, 4)

    def test_seeded_subsample(self, rng):
        g = random_graph(30, 0.15, 3)
        h = rng.standard_normal((30, 4))
        ctx = batch_context(g, range(15))
        a = build_compensation_fast(h, ctx, 5, seed=3)
        b = build_compensation_fast(h, ctx, 5, seed=3)
        np.testing.assert_array_equal(a.s_local, b.s_local)
        np.testing.assert_array_equal(a.d_hat_a, b.d_hat_a)

    def test_bad_k(self, rng):
        g = random_graph(10, 0.3, 3)
        with pytest.raises(CompensationError):
            build_compensation_fast(rng.standard_normal((10, 2)), batch_context(g, [0, 1]), 0)


class TestApply:
    def test_matches_dense_formula(self, rng):
        g = random_graph(25, 0.2, 4)
        ctx = batch_context(g, range(9))
        h = rng.standard_normal((25, 5))
        comp = build_compensation_fast(h, ctx, 4, seed=0)
        counter = FlopCounter()
        z = apply_compensation(comp, ctx.a_bb, h[ctx.batch], counter)
        expected = ctx.a_bb.toarray() @ h[ctx.batch] + ctx.a_bc.toarray() @ comp.boundary_estimate(h[ctx.batch])
        np.testing.assert_allclose(z, expected, atol=1e-12)
        assert counter.flops > 0

    def test_shape_mismatch(self, rng):
        g = random_graph(10, 0.3, 0)
        ctx = batch_context(g, range(4))
        comp = build_compensation_exact(rng.standard_normal((10, 2)), ctx)
        with pytest.raises(CompensationError):
            apply_compensation(comp, ctx.a_bb, np.zeros((3, 2)))


class TestExactInvariance:
    @pytest.mark.parametrize("arch", ["gcn", "sage"])
    def test_two_orbit_mixed_batch(self, arch):
        ds = gen_two_orbit(feature_dim=3, seed=0)
        ctx = batch_context(ds.graph, [0, 1, 2])
        hb = basic_embeddings(ds.graph, ds.features, arch, 2, 4, 1, 5)
        for comp in (build_compensation_exact(hb, ctx, arch), build_compensation_fast(hb, ctx, 3, 0, arch)):
            for t in range(5):
                m = GnnModel.init(arch, [3, 4, 2], seed=100 + t)
                hf, _ = forward_full(m, ds.graph, ds.features)
                h, _ = forward_batch(m, ctx, ds.features[ctx.batch], comp=comp)
                np.testing.assert_allclose(h, hf[ctx.batch], atol=1e-8)

    def test_duplication_copy_batch(self):
        ds = gen_duplication(base_n=8, copies=3, p_edge=0.3, feature_dim=6, seed=1)
        batch = copy_nodes(8, 1)
        pre = precompute_all(ds.graph, ds.features, [batch], num_layers=2, hidden=5, mode="exact")
        m = GnnModel.init("gcn", [6, 5, 2], seed=3)
        hf, _ = forward_full(m, ds.graph, ds.features)
        h, _ = forward_batch(m, batch_context(ds.graph, batch), ds.features[batch], comp=pre.comps[0])
        np.testing.assert_allclose(h, hf[batch], atol=1e-6)


class TestCache:
    def _setup(self):
        ds = gen_duplication(base_n=6, copies=2, p_edge=0.4, feature_dim=3, seed=0)
        clusters = [np.arange(0, 7), np.arange(7, 12)]
        pre = precompute_all(ds.graph, ds.features, clusters, k=3, hidden=3, seed=4)
        header = CacheHeader(ds.graph.digest(), partition_digest(clusters), 3, 1, 4, "gcn", "fast")
        return ds, clusters, pre, header

    def test_round_trip(self, tmp_path):
        _, _, pre, header = self._setup()
        save_cache(tmp_path / "c.bin", pre.comps, header)
        h2, comps = load_cache(tmp_path / "c.bin")
        assert h2 == header
        for a, b in zip(pre.comps, comps):
            for attr in ("batch", "boundary", "s_local", "q_s", "d_hat_a"):
                np.testing.assert_array_equal(getattr(a, attr), getattr(b, attr))

    def test_byte_identical_rerun(self, tmp_path):
        _, _, pre, header = self._setup()
        _, _, pre2, _ = self._setup()
        save_cache(tmp_path / "a.bin", pre.comps, header)
        save_cache(tmp_path / "b.bin", pre2.comps, header)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_rejects_other_files(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"0" * 100)
        with pytest.raises(CompensationError):
            load_cache(tmp_path / "x.bin")

    def test_precompute_reports_cost(self):
        _, _, pre, _ = self._setup()
        assert len(pre.comps) == 2
        assert pre.seconds >= 0 and pre.nbytes == sum(c.nbytes for c in pre.comps)

    def test_unknown_mode(self):
        ds, clusters, _, _ = self._setup()
        with pytest.raises(CompensationError):
            precompute_all(ds.graph, ds.features, clusters, mode="magic")
