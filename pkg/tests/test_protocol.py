import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from ntkdfl.mlp import Batch, ModelDims, forward, init_weights
from ntkdfl.protocol import (ClientState, ProtocolConfig, _batch_rows,
                             count_messages, phase_average, phase_evolve,
                             phase_jacobians, run_round)
from ntkdfl.topology import Topology, complete, empty, random_regular, ring


def make_states(dims, sizes, seed=0, scheme="shared", init_seed=11):
    rng = np.random.default_rng(seed)
    states = []
    for i, n in enumerate(sizes):
        X = rng.random((n, dims.input_dim))
        labels = rng.integers(0, dims.output_dim, n)
        Y = np.zeros((n, dims.output_dim))
        if n:
            Y[np.arange(n), labels] = 1.0
        states.append(ClientState(i, init_weights(init_seed, dims, scheme, i),
                                  Batch(X, Y, labels)))
    return states


DIMS = ModelDims(5, 6, 3)


class TestPhaseAverage:
    def test_two_client_midpoint(self):
        w = [np.zeros(4), np.full(4, 2.0)]
        out = phase_average(w, complete(2))
        np.testing.assert_array_equal(out[0], np.ones(4))
        np.testing.assert_array_equal(out[1], np.ones(4))

    def test_fully_connected_is_global_mean(self):
        rng = np.random.default_rng(1)
        w = [rng.normal(size=6) for _ in range(5)]
        out = phase_average(w, complete(5))
        mean = np.mean(w, axis=0)
        for o in out:
            np.testing.assert_allclose(o, mean, atol=1e-12)

    def test_ring_hand_computed(self):
        w = [np.array([float(3 ** i)]) for i in range(4)]
        out = phase_average(w, ring(4))
        expected = [(w[0] + w[1] + w[3]) / 3, (w[1] + w[0] + w[2]) / 3,
                    (w[2] + w[1] + w[3]) / 3, (w[3] + w[2] + w[0]) / 3]
        for got, exp in zip(out, expected):
            np.testing.assert_allclose(got, exp, atol=1e-12)

    def test_isolated_client_unchanged(self):
        w = [np.array([5.0]), np.array([9.0])]
        out = phase_average(w, empty(2))
        np.testing.assert_array_equal(out[0], w[0])
        np.testing.assert_array_equal(out[1], w[1])

    def test_conservation_on_regular_graphs(self):
        # uniform mixing over closed neighborhoods is doubly stochastic
        # when all degrees are equal, so the coordinate sums are conserved
        rng = np.random.default_rng(2)
        w = [rng.normal(size=8) for _ in range(12)]
        for seed in range(5):
            topo = random_regular(12, 4, seed=seed)
            out = phase_average(w, topo)
            np.testing.assert_allclose(np.sum(out, axis=0), np.sum(w, axis=0),
                                       atol=1e-9)


class TestPhaseJacobians:
    def test_isolated_client_stacks_only_own_rows(self):
        states = make_states(DIMS, [4, 3])
        cfg = ProtocolConfig(dims=DIMS)
        rows = [np.arange(4), np.arange(3)]
        bundles = phase_jacobians(states, empty(2), [s.weights for s in states],
                                  rows, cfg)
        assert len(bundles[0]) == 4
        np.testing.assert_array_equal(bundles[0].row_owner, [0, 0, 0, 0])

    def test_closed_neighborhood_row_count(self):
        # kappa=5 with equal client sizes: stacks hold 6N rows
        sizes = [4] * 6
        states = make_states(DIMS, sizes)
        cfg = ProtocolConfig(dims=DIMS)
        topo = random_regular(6, 5, seed=0)  # complete graph
        rows = [np.arange(4)] * 6
        bundles = phase_jacobians(states, topo, [s.weights for s in states],
                                  rows, cfg)
        for b in bundles:
            assert len(b) == 6 * 4

    def test_row_order_own_first_then_ascending(self):
        states = make_states(DIMS, [2, 2, 2])
        cfg = ProtocolConfig(dims=DIMS)
        bundles = phase_jacobians(states, complete(3), [s.weights for s in states],
                                  [np.arange(2)] * 3, cfg)
        np.testing.assert_array_equal(bundles[1].row_owner, [1, 1, 0, 0, 2, 2])

    def test_zero_sample_client_receives_neighbor_rows(self):
        states = make_states(DIMS, [0, 3])
        cfg = ProtocolConfig(dims=DIMS)
        bundles = phase_jacobians(states, complete(2), [s.weights for s in states],
                                  [np.arange(0), np.arange(3)], cfg)
        assert len(bundles[0]) == 3
        np.testing.assert_array_equal(bundles[0].row_owner, [1, 1, 1])

    def test_evals_match_forward_at_reference(self):
        states = make_states(DIMS, [3, 2])
        w_ref = [s.weights for s in states]
        cfg = ProtocolConfig(dims=DIMS)
        bundles = phase_jacobians(states, complete(2), w_ref,
                                  [np.arange(3), np.arange(2)], cfg)
        # client 0's stack: own rows at w0, then client 1's rows at w0
        expected = np.vstack([forward(DIMS, w_ref[0], states[0].data.inputs),
                              forward(DIMS, w_ref[0], states[1].data.inputs)])
        np.testing.assert_allclose(bundles[0].evals, expected, atol=1e-12)

    def test_batching_partitions_rows(self):
        states = make_states(DIMS, [5, 3])
        for m in (1, 2, 3):
            schedule = _batch_rows(states, m)
            assert len(schedule) == m
            for i, n in enumerate([5, 3]):
                seen = np.concatenate([schedule[s][i] for s in range(m)])
                np.testing.assert_array_equal(np.sort(seen), np.arange(n))


class TestAccounting:
    def test_hand_counted_scalars(self):
        # d=10 (1-2-2 net), N_i=4, d2=2, ring(3): jacobians = 3*2*4*2*10
        dims = ModelDims(1, 2, 2)
        assert dims.param_count == 10
        states = make_states(dims, [4, 4, 4])
        cfg = ProtocolConfig(dims=dims)
        log = count_messages(states, ring(3), cfg)
        assert log.jacobians == 480
        assert log.weights_out == 3 * 2 * 10
        assert log.avg_weights_back == 3 * 2 * 10
        assert log.labels == 3 * 2 * 4 * 2
        assert log.evals == 3 * 2 * 4 * 2
        assert log.bytes_sent == log.scalars_sent * 4

    def test_no_averaging_drops_send_back(self):
        dims = ModelDims(1, 2, 2)
        states = make_states(dims, [4, 4, 4])
        cfg = ProtocolConfig(dims=dims, per_round_averaging=False)
        log = count_messages(states, ring(3), cfg)
        assert log.avg_weights_back == 0
        assert log.weights_out == 3 * 2 * 10

    def test_empty_graph_sends_nothing(self):
        states = make_states(DIMS, [4, 4])
        cfg = ProtocolConfig(dims=DIMS)
        _, log = run_round(states, empty(2), cfg)
        assert log.scalars_sent == 0

    def test_bytes_per_scalar(self):
        states = make_states(DIMS, [2, 2])
        cfg = ProtocolConfig(dims=DIMS, bytes_per_scalar=8)
        log = count_messages(states, complete(2), cfg)
        assert log.bytes_sent == 8 * log.scalars_sent


class TestRunRound:
    def test_fully_connected_shared_init_stays_identical(self):
        states = make_states(DIMS, [3, 3, 3, 3])
        cfg = ProtocolConfig(dims=DIMS, eta=0.01, t_grid=(5, 10))
        out, _ = run_round(states, complete(4), cfg)
        for s in out[1:]:
            np.testing.assert_allclose(s.weights, out[0].weights, atol=1e-9)

    def test_single_client_equals_local_evolution(self):
        from ntkdfl.ntk import evolve_weights
        states = make_states(DIMS, [6])
        cfg = ProtocolConfig(dims=DIMS, eta=0.01, t_grid=(5, 10), engine="dense")
        out, _ = run_round(states, empty(1), cfg)
        from ntkdfl.mlp import jacobian
        s = states[0]
        stack = jacobian(DIMS, s.weights, s.data.inputs)
        expected = evolve_weights(stack, s.data.targets,
                                  forward(DIMS, s.weights, s.data.inputs),
                                  s.weights, 0.01, (5, 10)).new_weights
        np.testing.assert_allclose(out[0].weights, expected, atol=1e-12)

    def test_round_reduces_predicted_stack_loss(self):
        # with 0 in the grid, the selected loss is at most the t=0 loss
        states = make_states(DIMS, [4, 4, 4])
        cfg = ProtocolConfig(dims=DIMS, eta=0.01, t_grid=(0, 5, 25))
        w_ref = phase_average([s.weights for s in states], ring(3))
        bundles = phase_jacobians(states, ring(3), w_ref,
                                  [np.arange(4)] * 3, cfg)
        from ntkdfl.ntk import evolve_weights
        for b in bundles:
            res = evolve_weights(b.source, b.targets, b.evals,
                                 w_ref[b.client], cfg.eta, cfg.t_grid)
            assert res.losses[res.chosen_t] <= res.losses[0] + 1e-15
            assert res.losses[res.chosen_t] <= min(res.losses.values()) + 1e-15

    def test_engines_agree(self):
        states = make_states(DIMS, [3, 2, 4])
        topo = ring(3)
        dense_out, _ = run_round(states, topo, ProtocolConfig(dims=DIMS, engine="dense",
                                                              t_grid=(5, 10)))
        fact_out, _ = run_round(states, topo, ProtocolConfig(dims=DIMS, engine="factored",
                                                             t_grid=(5, 10)))
        for a, b in zip(dense_out, fact_out):
            np.testing.assert_allclose(a.weights, b.weights, atol=1e-9)

    def test_ablated_round_differentiates_at_own_weights(self):
        states = make_states(DIMS, [3, 3], scheme="per_client")
        cfg = ProtocolConfig(dims=DIMS, per_round_averaging=False)
        w_own = [s.weights.copy() for s in states]
        bundles = phase_jacobians(states, complete(2), w_own,
                                  [np.arange(3)] * 2, cfg)
        from ntkdfl.mlp import unpack
        for i, b in enumerate(bundles):
            np.testing.assert_array_equal(b.source.w2, unpack(DIMS, w_own[i])[2])

    def test_worker_count_invariance(self):
        states = make_states(DIMS, [3, 4, 2, 5])
        topo = random_regular(4, 2, seed=3)
        with threadpool_limits(limits=1):
            a, _ = run_round(states, topo, ProtocolConfig(dims=DIMS, workers=1,
                                                          t_grid=(5, 10)))
            b, _ = run_round(states, topo, ProtocolConfig(dims=DIMS, workers=3,
                                                          t_grid=(5, 10)))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.weights, y.weights)

    def test_batched_round_runs_and_differs(self):
        # m>1 evolves weights m times per round, so outputs differ from
        # m=1 but remain finite and deterministic
        states = make_states(DIMS, [4, 4, 4])
        topo = ring(3)
        one, _ = run_round(states, topo, ProtocolConfig(dims=DIMS, t_grid=(5, 10)))
        two, _ = run_round(states, topo, ProtocolConfig(dims=DIMS, t_grid=(5, 10),
                                                        jacobian_batches=2))
        two_again, _ = run_round(states, topo, ProtocolConfig(dims=DIMS, t_grid=(5, 10),
                                                              jacobian_batches=2))
        assert any(np.any(a.weights != b.weights) for a, b in zip(one, two))
        for a, b in zip(two, two_again):
            np.testing.assert_array_equal(a.weights, b.weights)

    def test_states_must_be_ordered(self):
        states = make_states(DIMS, [2, 2])
        states = [states[1], states[0]]
        with pytest.raises(ValueError):
            run_round(states, complete(2), ProtocolConfig(dims=DIMS))
