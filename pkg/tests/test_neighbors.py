import math

import numpy as np
import pytest

from memsaga import (
    DataError,
    EpsBoundTable,
    LossModel,
    ProblemInstance,
    build_knn_graph,
    load_graph,
    save_graph,
    synthesize_problem,
    verify_uniformity,
)

from conftest import make_logistic, make_ridge


class TestGraphConstruction:
    def test_q1_is_self_only(self):
        inst, _ = synthesize_problem(20, 3, "ridge", 0.1, seed=0)
        graph = build_knn_graph(inst, 1)
        for i in range(20):
            np.testing.assert_array_equal(graph.children[i], [i])
            np.testing.assert_array_equal(graph.parents[i], [i])
            assert graph.parent_dist[i, 0] == 0.0

    def test_collinear_points_tie_break(self):
        # equally spaced points on a line; ties resolved by ascending index
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        inst = ProblemInstance(X, np.zeros(4), "ridge", 0.1)
        graph = build_knn_graph(inst, 2)
        expected_parents = {0: {0, 1}, 1: {1, 0}, 2: {2, 1}, 3: {3, 2}}
        for j, par in expected_parents.items():
            assert set(graph.parents[j]) == par
        report = verify_uniformity(graph)
        assert report.ok
        np.testing.assert_array_equal(report.in_degrees, [2, 2, 2, 2])

    def test_parents_match_brute_force_oracle(self):
        inst, _ = synthesize_problem(60, 4, "ridge", 0.1, seed=3)
        q = 5
        graph = build_knn_graph(inst, q)
        X = inst.features
        for j in range(inst.n):
            d = np.linalg.norm(X - X[j], axis=1)
            order = np.lexsort((np.arange(inst.n), d))[:q]
            assert set(order) == set(graph.parents[j])
            assert j in graph.parents[j]

    def test_random_instance_uniformity(self):
        inst, _ = synthesize_problem(200, 6, "ridge", 0.1, seed=9)
        for q in (1, 3, 17):
            report = verify_uniformity(build_knn_graph(inst, q))
            assert report.ok

    def test_duplicate_points_keep_self_edge(self):
        X = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
        inst = ProblemInstance(X, np.zeros(4), "ridge", 0.1)
        graph = build_knn_graph(inst, 1)
        for i in range(4):
            assert i in graph.children[i]

    def test_pair_distances_match_recomputation(self):
        inst, _ = synthesize_problem(80, 5, "ridge", 0.1, seed=4)
        graph = build_knn_graph(inst, 4)
        X = inst.features
        for i in range(inst.n):
            true = np.linalg.norm(X[graph.children[i]] - X[i], axis=1)
            np.testing.assert_allclose(graph.children_dist[i], true, atol=1e-12)

    def test_logistic_same_label_edges_only(self):
        model = make_logistic(n=60, d=3, seed=6)
        inst = model.instance
        graph = build_knn_graph(inst, 4)
        y = inst.labels
        for i in range(inst.n):
            assert np.all(y[graph.children[i]] == y[i])

    def test_logistic_small_class_error(self):
        X = np.vstack([np.random.default_rng(0).standard_normal((10, 2)), [[9.0, 9.0]]])
        y = np.array([1.0] * 10 + [-1.0])
        inst = ProblemInstance(X, y, "logistic", 0.1)
        with pytest.raises(ValueError, match="fewer than q"):
            build_knn_graph(inst, 3)

    def test_q_out_of_range(self):
        inst, _ = synthesize_problem(5, 2, "ridge", 0.1, seed=0)
        with pytest.raises(ValueError):
            build_knn_graph(inst, 6)

    def test_complete_graph(self):
        inst, _ = synthesize_problem(7, 2, "ridge", 0.1, seed=0)
        graph = build_knn_graph(inst, 7)
        assert verify_uniformity(graph).ok
        for i in range(7):
            assert len(graph.children[i]) == 7


class TestUniformityReport:
    def test_corrupted_graph_names_node(self):
        inst, _ = synthesize_problem(15, 3, "ridge", 0.1, seed=2)
        graph = build_knn_graph(inst, 2)
        victim = graph.children[3][-1]
        graph.children[3] = graph.children[3][:-1]
        graph.children_dist[3] = graph.children_dist[3][:-1]
        report = verify_uniformity(graph)
        assert not report.ok
        assert victim in report.bad_nodes
        assert str(victim) in report.summary()


class TestGraphFile:
    def test_roundtrip(self, tmp_path):
        inst, _ = synthesize_problem(40, 4, "ridge", 0.1, seed=5)
        graph = build_knn_graph(inst, 3)
        path = tmp_path / "graph.txt"
        save_graph(graph, path)
        loaded = load_graph(path, inst)
        assert loaded.q == graph.q
        for i in range(inst.n):
            np.testing.assert_array_equal(np.sort(loaded.children[i]), np.sort(graph.children[i]))
        np.testing.assert_allclose(np.sort(loaded.parents, axis=1), np.sort(graph.parents, axis=1))

    def test_stale_cache_detected(self, tmp_path):
        inst, _ = synthesize_problem(30, 4, "ridge", 0.1, seed=5)
        other, _ = synthesize_problem(30, 4, "ridge", 0.1, seed=6)
        graph = build_knn_graph(inst, 2)
        path = tmp_path / "graph.txt"
        save_graph(graph, path)
        with pytest.raises(DataError, match="match the data"):
            load_graph(path, other)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "g.txt"
        path.write_text("oops\n")
        inst, _ = synthesize_problem(5, 2, "ridge", 0.1, seed=0)
        with pytest.raises(DataError, match="header"):
            load_graph(path, inst)

    def test_missing_edges_detected(self, tmp_path):
        inst, _ = synthesize_problem(10, 2, "ridge", 0.1, seed=1)
        graph = build_knn_graph(inst, 2)
        path = tmp_path / "g.txt"
        save_graph(graph, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(DataError, match="in-degree"):
            load_graph(path, inst)


def shared_write_error(model, i, j, w):
    """|xi'_j(w) - xi'_i(w)| * ||x_j||: the exact slot error of a shared write."""
    xi_i = model.xi_prime(i, w)
    xi_j = model.xi_prime(j, w)
    return abs(xi_j - xi_i) * float(np.linalg.norm(model.instance.features[j]))


class TestEpsBounds:
    def test_self_edge_zero(self):
        for model in (make_ridge(n=12, seed=7), make_logistic(n=30, seed=8)):
            graph = build_knn_graph(model.instance, 3)
            table = EpsBoundTable(model.instance, graph)
            w = np.random.default_rng(0).standard_normal(model.d)
            for i in range(model.n):
                assert table.edge_bound(i, i, w) == 0.0

    def test_ridge_hand_value(self):
        # delta = sqrt(2), |dy| = 1, ||x_j|| = 1, ||w|| = 2 -> 2*sqrt(2) + 1
        X = np.array([[0.0, 1.0], [1.0, 0.0]])
        inst = ProblemInstance(X, np.array([1.0, 0.0]), "ridge", 0.1)
        graph = build_knn_graph(inst, 2)
        table = EpsBoundTable(inst, graph)
        val = table.edge_bound(0, 1, np.array([2.0, 0.0]))
        assert val == pytest.approx(2 * math.sqrt(2) + 1, rel=1e-12)

    def test_non_edge_query(self):
        inst, _ = synthesize_problem(30, 3, "ridge", 0.1, seed=3)
        graph = build_knn_graph(inst, 1)
        table = EpsBoundTable(inst, graph)
        with pytest.raises(ValueError, match="not an edge"):
            table.edge_bound(0, 1, np.zeros(3))

    @pytest.mark.parametrize("factory", [make_ridge, make_logistic])
    def test_soundness_on_random_edges(self, factory):
        model = factory(n=50, d=4)
        graph = build_knn_graph(model.instance, 5)
        table = EpsBoundTable(model.instance, graph)
        rng = np.random.default_rng(17)
        checked = 0
        while checked < 1000:
            i = int(rng.integers(model.n))
            w = rng.standard_normal(model.d) * rng.choice([0.3, 1.0, 3.0])
            bounds = table.neighborhood_bounds(i, w)
            for j, b in zip(graph.children[i], bounds):
                assert shared_write_error(model, i, int(j), w) <= b + 1e-10
                checked += 1

    @pytest.mark.parametrize("factory", [make_ridge, make_logistic])
    def test_monotone_along_rays(self, factory):
        model = factory(n=30, d=3)
        graph = build_knn_graph(model.instance, 3)
        table = EpsBoundTable(model.instance, graph)
        rng = np.random.default_rng(21)
        for _ in range(20):
            i = int(rng.integers(model.n))
            w = rng.standard_normal(model.d)
            scales = [0.0, 0.5, 1.0, 2.0, 5.0]
            vals = [table.neighborhood_bounds(i, s * w) for s in scales]
            for a, b in zip(vals, vals[1:]):
                assert np.all(b >= a - 1e-12)


class TestNormBall:
    def test_r_zero_ridge(self):
        model = make_ridge(n=25, d=3, seed=10)
        graph = build_knn_graph(model.instance, 3)
        table = EpsBoundTable(model.instance, graph)
        eps_j, _ = table.norm_ball(0.0)
        y = model.instance.labels
        norms = graph.row_norms
        for j in range(model.n):
            expected = max(abs(y[j] - y[i]) for i in graph.parents[j]) * norms[j]
            assert eps_j[j] == pytest.approx(expected, rel=1e-12)

    def test_self_only_graph_is_zero(self):
        model = make_ridge(n=10, seed=11)
        graph = build_knn_graph(model.instance, 1)
        table = EpsBoundTable(model.instance, graph)
        eps_j, eps_mean = table.norm_ball(3.0)
        np.testing.assert_array_equal(eps_j, 0.0)
        assert eps_mean == 0.0

    @pytest.mark.parametrize("factory", [make_ridge, make_logistic])
    def test_dominates_sampled_w(self, factory):
        model = factory(n=30, d=3)
        graph = build_knn_graph(model.instance, 4)
        table = EpsBoundTable(model.instance, graph)
        r = 2.5
        eps_j, eps_mean = table.norm_ball(r)
        assert eps_mean == pytest.approx(eps_j.mean())
        rng = np.random.default_rng(30)
        for _ in range(50):
            w = rng.standard_normal(model.d)
            w *= rng.uniform(0, r) / np.linalg.norm(w)
            for i in range(model.n):
                bounds = table.neighborhood_bounds(i, w)
                for j, b in zip(graph.children[i], bounds):
                    assert b <= eps_j[j] + 1e-10

    def test_negative_radius(self):
        model = make_ridge()
        table = EpsBoundTable(model.instance, build_knn_graph(model.instance, 2))
        with pytest.raises(ValueError):
            table.norm_ball(-1.0)
