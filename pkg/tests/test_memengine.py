import math
from fractions import Fraction

import numpy as np
import pytest

from memsaga import (
    DivergenceError,
    EpsBoundTable,
    LossModel,
    MemoryState,
    apply_shared_update,
    build_knn_graph,
    enumerate_update_distribution,
    gradient_estimate,
    init_state,
    make_sampler,
    memory_mean_rebuild,
    reference_optimum,
    run,
    sample_update_set,
    step,
    synthesize_problem,
)

from conftest import fill_memory, make_logistic, make_ridge


def all_samplers(model, q=3, eps=0.1):
    graph = build_knn_graph(model.instance, q)
    return [
        make_sampler("saga", model.n),
        make_sampler("q_saga", model.n, q=q),
        make_sampler("svrg", model.n, q=q),
        make_sampler("n_saga", model.n, graph=graph),
        make_sampler("eps_n_saga", model.n, graph=graph, eps=eps),
    ]


class TestMakeSampler:
    def test_saga_is_q1(self):
        s = make_sampler("saga", 10)
        assert s.q == 1

    def test_q_exceeds_n(self):
        with pytest.raises(ValueError):
            make_sampler("q_saga", 5, q=6)

    def test_graph_indegree_mismatch(self):
        model = make_ridge(n=12)
        graph = build_knn_graph(model.instance, 3)
        graph.children[2] = graph.children[2][:-1]
        graph.children_dist[2] = graph.children_dist[2][:-1]
        with pytest.raises(ValueError, match="in-degree"):
            make_sampler("n_saga", model.n, graph=graph)

    def test_negative_eps(self):
        model = make_ridge(n=12)
        graph = build_knn_graph(model.instance, 2)
        with pytest.raises(ValueError):
            make_sampler("eps_n_saga", model.n, graph=graph, eps=-1.0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_sampler("sag", 10)


class TestSampleUpdateSet:
    def test_saga_is_step_index(self):
        s = make_sampler("saga", 10)
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(sample_update_set(s, rng, 3), [3])

    def test_q_saga_contains_i_and_q_distinct(self):
        s = make_sampler("q_saga", 12, q=4)
        rng = np.random.default_rng(1)
        for i in range(12):
            J = sample_update_set(s, rng, i)
            assert i in J
            assert len(set(J.tolist())) == 4

    def test_q_saga_full_set(self):
        s = make_sampler("q_saga", 6, q=6)
        rng = np.random.default_rng(2)
        np.testing.assert_array_equal(sample_update_set(s, rng, 3), np.arange(6))

    def test_svrg_all_or_nothing(self):
        s = make_sampler("svrg", 8, q=2)
        rng = np.random.default_rng(3)
        sizes = {len(sample_update_set(s, rng, 0)) for _ in range(200)}
        assert sizes == {0, 8}

    @pytest.mark.parametrize("kind,q", [("saga", 1), ("q_saga", 3), ("svrg", 3),
                                        ("n_saga", 3), ("eps_n_saga", 3)])
    def test_monte_carlo_membership_frequency(self, kind, q):
        # every slot lands in J with frequency q/n, within 3 binomial sigma
        model = make_ridge(n=20, d=3, seed=14)
        if kind in ("n_saga", "eps_n_saga"):
            graph = build_knn_graph(model.instance, q)
            s = make_sampler(kind, model.n, graph=graph,
                             eps=0.1 if kind == "eps_n_saga" else None)
        else:
            s = make_sampler(kind, model.n, q=q)
        rng = np.random.default_rng(100)
        draws = 100_000
        counts = np.zeros(model.n)
        for _ in range(draws):
            i = int(rng.integers(model.n))
            counts[sample_update_set(s, rng, i)] += 1
        p = q / model.n
        sigma = math.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) <= 3 * sigma)


class TestEnumerateDistribution:
    def test_q_saga_uniform_over_subsets(self):
        dist = enumerate_update_distribution(make_sampler("q_saga", 4, q=2))
        assert len(dist) == 6
        assert all(p == Fraction(1, 6) for _, p in dist)

    def test_svrg_two_point(self):
        dist = dict(enumerate_update_distribution(make_sampler("svrg", 4, q=2)))
        assert dist[frozenset()] == Fraction(1, 2)
        assert dist[frozenset(range(4))] == Fraction(1, 2)

    def test_membership_sums_exact(self):
        model = make_ridge(n=8, d=2, seed=15)
        for s in all_samplers(model, q=3):
            dist = enumerate_update_distribution(s)
            assert sum(p for _, p in dist) == 1
            for j in range(model.n):
                mass = sum(p for J, p in dist if j in J)
                assert mass == Fraction(s.q, model.n)

    def test_large_n_rejected(self):
        with pytest.raises(ValueError):
            enumerate_update_distribution(make_sampler("saga", 50))


class TestStepSemantics:
    def test_memory_at_optimum_freezes_iterate(self, ridge_model, ridge_ref):
        model, ref = ridge_model, ridge_ref
        state = init_state(model, seed=0, mode="full_vectors", growing=False)
        for j in range(model.n):
            state.memory.write_vector(j, model.point_gradient(j, ref.w_star)[0])
        state.w[:] = ref.w_star
        gamma = 0.01
        before = state.w.copy()
        step(state, model, make_sampler("saga", model.n), gamma)
        # corrections cancel the stochastic part exactly; only the residual
        # gradient norm of the reference solve can move the iterate
        assert np.linalg.norm(state.w - before) <= gamma * 1e-9

    def test_zero_memory_is_plain_sgd(self, ridge_model):
        model = ridge_model
        state = init_state(model, seed=5, mode="full_vectors", growing=False)
        rng_probe = np.random.default_rng(5)
        i_expected = int(rng_probe.integers(model.n))
        w0 = state.w.copy()
        gamma = 0.05
        step(state, model, make_sampler("sgd", model.n), gamma)
        grad, _ = ridge_model.point_gradient(i_expected, w0)
        np.testing.assert_allclose(state.w, w0 - gamma * grad, rtol=1e-15)

    @pytest.mark.parametrize("mode", ["full_vectors", "glm_scalars"])
    def test_enumerated_unbiasedness(self, mode):
        for factory, seed in ((make_ridge, 20), (make_logistic, 21)):
            model = factory(n=8, d=3)
            rng = np.random.default_rng(seed)
            memory = fill_memory(MemoryState(model, mode=mode), model, rng)
            w = rng.standard_normal(model.d)
            _, full_grad = model.objective_and_gradient(w)
            mean_g = np.zeros(model.d)
            for i in range(model.n):
                g, _, _ = gradient_estimate(model, memory, i, w)
                mean_g += g
            mean_g /= model.n
            err = np.linalg.norm(mean_g - full_grad) / max(np.linalg.norm(full_grad), 1e-30)
            assert err <= 1e-10

    def test_pre_step_write_point(self, ridge_model):
        # the memory write must use the same w the step direction used
        model = ridge_model
        state = init_state(model, seed=2, mode="full_vectors", growing=False)
        rng_probe = np.random.default_rng(2)
        i_expected = int(rng_probe.integers(model.n))
        w0 = state.w.copy()
        step(state, model, make_sampler("saga", model.n), 0.1)
        expected_grad, _ = model.point_gradient(i_expected, w0)
        np.testing.assert_array_equal(state.memory.slot(i_expected), expected_grad)

    def test_divergence_reports_step_index(self, ridge_model):
        state = init_state(ridge_model, seed=0, growing=False)
        sampler = make_sampler("saga", ridge_model.n)
        with pytest.raises(DivergenceError) as err, np.errstate(over="ignore"):
            for _ in range(2000):
                step(state, ridge_model, sampler, 1e18)
        assert err.value.step_index >= 0

    def test_bad_gamma(self, ridge_model):
        state = init_state(ridge_model, seed=0)
        with pytest.raises(ValueError):
            step(state, ridge_model, make_sampler("saga", ridge_model.n), 0.0)


class TestCounters:
    def test_saga_one_eval_per_step(self, ridge_model):
        state = init_state(ridge_model, seed=3, growing=False)
        run(state, ridge_model, make_sampler("saga", ridge_model.n), 0.05, 500)
        assert state.counters.gradient_evals == state.counters.datapoint_evals == 500

    def test_q_saga_exactly_q_per_step(self, ridge_model):
        q = 4
        state = init_state(ridge_model, seed=3, growing=False)
        run(state, ridge_model, make_sampler("q_saga", ridge_model.n, q=q), 0.05, 300)
        assert state.counters.datapoint_evals == 300
        assert state.counters.gradient_evals == q * 300

    def test_sgd_one_eval_per_step(self, ridge_model):
        state = init_state(ridge_model, seed=3, growing=False)
        run(state, ridge_model, make_sampler("sgd", ridge_model.n), 0.01, 200)
        assert state.counters.gradient_evals == 200

    def test_svrg_counts_full_passes(self, ridge_model):
        n, q = ridge_model.n, 2
        state = init_state(ridge_model, seed=7, growing=False)
        sampler = make_sampler("svrg", n, q=q)
        triggers = 0
        for _ in range(400):
            info = step(state, ridge_model, sampler, 0.05)
            if info.updated.size == n:
                triggers += 1
        assert state.counters.gradient_evals == 400 - triggers + triggers * n

    def test_eps_n_saga_extremes(self):
        model = make_ridge(n=30, d=3, seed=22)
        graph = build_knn_graph(model.instance, 4)
        # eps = +inf: every neighbor shares; no extra evals over the step's own
        state = init_state(model, seed=1, mode="glm_scalars", growing=False)
        run(state, model, make_sampler("eps_n_saga", model.n, graph=graph, eps=np.inf),
            0.02, 200)
        assert state.counters.gradient_evals == state.counters.datapoint_evals == 200
        # eps = 0: identical to n_saga, every neighbor exact
        st_eps = init_state(model, seed=9, mode="glm_scalars", growing=False)
        st_ns = init_state(model, seed=9, mode="glm_scalars", growing=False)
        run(st_eps, model, make_sampler("eps_n_saga", model.n, graph=graph, eps=0.0),
            0.02, 300)
        run(st_ns, model, make_sampler("n_saga", model.n, graph=graph), 0.02, 300)
        np.testing.assert_allclose(st_eps.w, st_ns.w, rtol=1e-10, atol=1e-14)
        assert st_eps.counters.gradient_evals == st_ns.counters.gradient_evals


class TestSharedUpdates:
    @pytest.mark.parametrize("mode", ["full_vectors", "glm_scalars"])
    def test_share_respects_bound_and_threshold(self, mode):
        for factory, seed in ((make_ridge, 31), (make_logistic, 32)):
            model = factory(n=40, d=3)
            graph = build_knn_graph(model.instance, 5)
            sampler = make_sampler("eps_n_saga", model.n, graph=graph, eps=0.3)
            table = EpsBoundTable(model.instance, graph)
            rng = np.random.default_rng(seed)
            memory = MemoryState(model, mode=mode)
            mu = model.mu
            X = model.instance.features
            for _ in range(50):
                i = int(rng.integers(model.n))
                w = rng.standard_normal(model.d)
                bounds = table.neighborhood_bounds(i, w)
                fresh = apply_shared_update(memory, model, sampler, i, w)
                assert fresh == int(np.sum(bounds > sampler.eps))
                for j, b in zip(graph.children[i], bounds):
                    stored = memory.slot(int(j))
                    loss_part = stored if mode == "glm_scalars" else stored - mu * w
                    true_loss = model.xi_prime(int(j), w) * X[j]
                    err = np.linalg.norm(true_loss - loss_part)
                    if b <= sampler.eps:  # shared write: bound must cover the error
                        assert err <= b + 1e-10
                        assert b <= sampler.eps
                    else:  # exact write
                        assert err <= 1e-12

    def test_requires_eps_sampler(self, ridge_model):
        memory = MemoryState(ridge_model)
        with pytest.raises(ValueError):
            apply_shared_update(memory, ridge_model, make_sampler("saga", ridge_model.n),
                                0, np.zeros(ridge_model.d))


class TestMemoryMean:
    def test_fresh_state_zero(self, ridge_model):
        memory = MemoryState(ridge_model)
        np.testing.assert_array_equal(memory_mean_rebuild(memory), 0.0)
        np.testing.assert_array_equal(memory.mean(), 0.0)

    @pytest.mark.parametrize("mode", ["full_vectors", "glm_scalars"])
    def test_incremental_matches_rebuild_after_long_run(self, mode):
        model = make_ridge(n=50, d=4, seed=33)
        state = init_state(model, seed=4, mode=mode, growing=True)
        sampler = make_sampler("q_saga", model.n, q=3)
        run(state, model, sampler, 1.0 / (5 * model.lipschitz), 10_000)
        rebuilt = memory_mean_rebuild(state.memory)
        drift = np.linalg.norm(state.memory.mean() - rebuilt)
        assert drift <= 1e-8 * (1.0 + np.linalg.norm(rebuilt))

    def test_storage_modes_encode_same_history(self):
        """Replaying one update history into both storage modes must agree
        slot-by-slot: full vector = scalar * x_j + mu * w_at_update."""
        model = make_logistic(n=25, d=3, mu=0.2, seed=34)
        X, mu = model.instance.features, model.mu
        state = init_state(model, seed=11, mode="full_vectors", growing=False)
        shadow = MemoryState(model, mode="glm_scalars")
        sampler = make_sampler("q_saga", model.n, q=3)
        w_at_update = {}
        for _ in range(400):
            w_pre = state.w.copy()
            info = step(state, model, sampler, 0.05)
            shadow.write_scalars(info.updated, model.xi_prime_batch(info.updated, w_pre))
            for j in info.updated:
                w_at_update[int(j)] = w_pre
        mu_part = np.zeros(model.d)
        for j in range(model.n):
            if j in w_at_update:
                np.testing.assert_allclose(
                    state.memory.slot(j),
                    shadow.scal[j] * X[j] + mu * w_at_update[j],
                    rtol=1e-12, atol=1e-14,
                )
                mu_part += mu * w_at_update[j]
        np.testing.assert_allclose(
            state.memory.mean(), shadow.mean() + mu_part / model.n, rtol=1e-10, atol=1e-13
        )

    def test_variance_corrections_converge_to_optimum_gradients(self):
        model = make_ridge(n=30, d=3, mu=0.3, seed=35)
        ref = reference_optimum(model)
        state = init_state(model, seed=6, mode="full_vectors", growing=True)
        run(state, model, make_sampler("saga", model.n), 1.0 / (5 * model.lipschitz), 40_000)
        worst = max(
            np.linalg.norm(state.memory.slot(i) - model.point_gradient(i, ref.w_star)[0])
            for i in range(model.n)
        )
        assert worst <= 1e-4


class TestGrowingPass:
    def test_indices_restricted_to_prefix(self):
        model = make_ridge(n=20, d=3, seed=36)
        state = init_state(model, seed=12, mode="glm_scalars", growing=True)
        order = state.order.copy()
        sampler = make_sampler("q_saga", model.n, q=5)
        for t in range(model.n):
            assert state.memory.seen == t
            info = step(state, model, sampler, 0.05)
            prefix = set(order[: t + 1].tolist())
            assert info.i in prefix
            assert set(info.updated.tolist()) <= prefix
        assert state.memory.seen == model.n

    def test_denominator_tracks_seen(self):
        model = make_ridge(n=15, d=2, seed=37)
        state = init_state(model, seed=3, mode="full_vectors", growing=True)
        sampler = make_sampler("saga", model.n)
        for t in range(30):
            step(state, model, sampler, 0.05)
            assert state.memory.denominator == min(t + 1, model.n)
            rebuilt = memory_mean_rebuild(state.memory)
            np.testing.assert_allclose(state.memory.mean(), rebuilt, atol=1e-12)

    def test_same_seed_same_trajectory(self):
        model = make_logistic(n=30, d=3, seed=38)
        sampler = make_sampler("saga", model.n)
        runs = []
        for _ in range(2):
            state = init_state(model, seed=99, mode="glm_scalars", growing=True)
            run(state, model, sampler, 0.05, 500)
            runs.append(state.w.copy())
        np.testing.assert_array_equal(runs[0], runs[1])
