import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import path_graph, random_graph
from topgnn.datasets import gen_duplication, gen_two_orbit
from topgnn.graph import build_graph
from topgnn.wl import check_equal_colors, check_color_separation, same_color_pairs, wl_refine


def as_partition(colors):
    return sorted(sorted(np.flatnonzero(colors == c).tolist()) for c in np.unique(colors))


class TestRefinement:
    def test_path5_by_hand(self):
        table = wl_refine(path_graph(5), np.ones((5, 1)), 2)
        assert as_partition(table.colors(0)) == [[0, 1, 2, 3, 4]]
        assert as_partition(table.colors(1)) == [[0, 4], [1, 3], [2]]
        assert table.num_classes(2) == 3

    def test_features_split_initial_colors(self):
        x = np.array([[0.0], [1.0], [0.0]])
        table = wl_refine(build_graph([], 3), x, 0)
        assert as_partition(table.colors()) == [[0, 2], [1]]

    def test_two_orbit_stable_colors(self):
        ds = gen_two_orbit(feature_dim=3, seed=0)
        table = wl_refine(ds.graph, ds.features, 4)
        assert as_partition(table.colors()) == [[0, 1, 4, 5], [2, 3]]

    def test_edge_weights_matter(self):
        # star center vs leaf have different degrees even with equal features
        g = build_graph([(0, 1), (0, 2), (0, 3)], 4)
        assert as_partition(wl_refine(g, np.ones((4, 1)), 1).colors()) == [[0], [1, 2, 3]]

    def test_each_round_refines(self):
        g = random_graph(25, 0.12, 3)
        table = wl_refine(g, np.ones((25, 1)), 4)
        for a, b in zip(table.rounds, table.rounds[1:]):
            # same color in round r+1 implies same color in round r
            for i, j in same_color_pairs(b):
                assert a[i] == a[j]

    def test_negative_rounds(self):
        with pytest.raises(ValueError):
            wl_refine(path_graph(3), np.ones((3, 1)), -1)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_permutation_equivariance(self, seed):
        r = np.random.default_rng(seed)
        g = random_graph(12, 0.25, seed)
        x = r.integers(0, 2, (12, 1)).astype(float)
        perm = r.permutation(12)
        inv = np.argsort(perm)
        edges = [(int(inv[u]), int(inv[v])) for u, v in g.edge_list()]
        gp = build_graph(edges, 12)
        c = wl_refine(g, x, 3).colors()
        cp = wl_refine(gp, x[perm], 3).colors()
        np.testing.assert_array_equal(cp, c[perm])


class TestEqualColors:
    @pytest.mark.parametrize("family", ["gcn", "sage"])
    def test_two_orbit(self, family):
        ds = gen_two_orbit(feature_dim=3, seed=1)
        rep = check_equal_colors(ds.graph, ds.features, family, rounds=2, trials=10)
        assert rep.pairs == 7 and rep.violations == 0

    def test_duplication(self):
        ds = gen_duplication(base_n=8, copies=3, p_edge=0.3, feature_dim=4, seed=0)
        rep = check_equal_colors(ds.graph, ds.features, rounds=3, trials=10)
        assert rep.violations == 0 and rep.max_gap <= 1e-9
        # distinct continuous features: one class per base node
        assert wl_refine(ds.graph, ds.features, 3).num_classes() == 8

    def test_relu_also_respects_colors(self):
        g = random_graph(15, 0.2, 0)
        rep = check_equal_colors(g, np.ones((15, 1)), activation="relu", trials=5)
        assert rep.violations == 0


class TestColorSeparation:
    def test_path_fully_separated(self):
        rep = check_color_separation(path_graph(5), np.ones((5, 1)), rounds=2, trials=20)
        assert rep.pairs == 8
        assert rep.min_fraction == 1.0 and rep.fully_separated == 1.0

    def test_no_pairs(self):
        rep = check_color_separation(path_graph(1), np.ones((1, 1)))
        assert rep.pairs == 0 and rep.min_fraction == 1.0

    def test_max_pairs_subsample(self):
        g = random_graph(20, 0.2, 1)
        rep = check_color_separation(g, np.ones((20, 1)), trials=3, max_pairs=10)
        assert rep.pairs == 10
