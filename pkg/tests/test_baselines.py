import numpy as np
import pytest

from ntkdfl.baselines import (DFEDAVG_DEFAULTS, DFEDAVGM_DEFAULTS, DPSGD_DEFAULTS,
                              SgdConfig, _client_seed, dfedavg_round, dpsgd_round,
                              local_sgd)
from ntkdfl.mlp import Batch, ModelDims, init_weights, loss_gradient
from ntkdfl.protocol import ClientState
from ntkdfl.topology import complete, empty, ring

DIMS = ModelDims(4, 5, 3)


def make_batch(n, seed=0, dims=DIMS):
    rng = np.random.default_rng(seed)
    X = rng.random((n, dims.input_dim))
    labels = rng.integers(0, dims.output_dim, n)
    Y = np.zeros((n, dims.output_dim))
    Y[np.arange(n), labels] = 1.0
    return Batch(X, Y, labels)


class TestDefaults:
    def test_published_hyperparameters(self):
        assert (DPSGD_DEFAULTS.lr, DPSGD_DEFAULTS.batch_size,
                DPSGD_DEFAULTS.local_epochs) == (0.1, 10, 1)
        assert (DFEDAVG_DEFAULTS.lr, DFEDAVG_DEFAULTS.batch_size,
                DFEDAVG_DEFAULTS.local_epochs) == (0.1, 25, 20)
        assert (DFEDAVGM_DEFAULTS.lr, DFEDAVGM_DEFAULTS.batch_size,
                DFEDAVGM_DEFAULTS.local_epochs, DFEDAVGM_DEFAULTS.momentum) \
            == (0.01, 50, 20, 0.9)

    def test_momentum_range(self):
        with pytest.raises(ValueError):
            SgdConfig(0.1, 10, 1, momentum=1.0)


class TestLocalSgd:
    def test_zero_lr_unchanged(self):
        w = init_weights(1, DIMS)
        out = local_sgd(DIMS, w, make_batch(8), SgdConfig(0.0, 4, 3), seed=5)
        np.testing.assert_array_equal(out, w)

    def test_single_full_batch_step_oracle(self):
        w = init_weights(2, DIMS)
        batch = make_batch(6, seed=3)
        cfg = SgdConfig(lr=0.05, batch_size=6, local_epochs=1)
        out = local_sgd(DIMS, w, batch, cfg, seed=7)
        # one step over the full (shuffled) batch: shuffle order is
        # irrelevant because the whole batch is one minibatch
        grad = loss_gradient(DIMS, w, batch, "softmax_ce")
        np.testing.assert_allclose(out, w - 0.05 * grad, atol=1e-12)

    def test_heavy_ball_two_step_pattern(self):
        # with a (nearly) constant gradient g, two momentum steps move
        # by lr*g*(1 + 1.9): v1 = g, v2 = 0.9 g + g
        w = init_weights(3, DIMS)
        batch = make_batch(5, seed=4)
        lr = 1e-9  # so the gradient barely changes between the steps
        cfg = SgdConfig(lr=lr, batch_size=5, local_epochs=2, momentum=0.9)
        out = local_sgd(DIMS, w, batch, cfg, seed=8)
        g = loss_gradient(DIMS, w, batch, "softmax_ce")
        np.testing.assert_allclose(out, w - lr * g * 2.9, rtol=1e-6, atol=1e-18)

    def test_momentum_recursion_matches_hand_unrolled(self):
        w0 = init_weights(4, DIMS)
        batch = make_batch(4, seed=6)
        cfg = SgdConfig(lr=0.1, batch_size=4, local_epochs=3, momentum=0.7)
        out = local_sgd(DIMS, w0, batch, cfg, seed=9)
        w, v = w0.copy(), np.zeros_like(w0)
        for _ in range(3):
            g = loss_gradient(DIMS, w, batch, "softmax_ce")
            v = 0.7 * v + g
            w = w - 0.1 * v
        np.testing.assert_allclose(out, w, atol=1e-12)

    def test_seeded_shuffling(self):
        w = init_weights(5, DIMS)
        batch = make_batch(20, seed=10)
        cfg = SgdConfig(lr=0.1, batch_size=4, local_epochs=1)
        a = local_sgd(DIMS, w, batch, cfg, seed=11)
        b = local_sgd(DIMS, w, batch, cfg, seed=11)
        c = local_sgd(DIMS, w, batch, cfg, seed=12)
        np.testing.assert_array_equal(a, b)
        assert np.any(a != c)

    def test_batch_size_truncated_to_data(self):
        w = init_weights(6, DIMS)
        batch = make_batch(3, seed=13)
        big = local_sgd(DIMS, w, batch, SgdConfig(0.1, 100, 1), seed=1)
        exact = local_sgd(DIMS, w, batch, SgdConfig(0.1, 3, 1), seed=1)
        np.testing.assert_array_equal(big, exact)


def make_states(sizes, scheme="shared", seed=20):
    rng = np.random.default_rng(seed)
    states = []
    for i, n in enumerate(sizes):
        X = rng.random((n, DIMS.input_dim))
        labels = rng.integers(0, DIMS.output_dim, n)
        Y = np.zeros((n, DIMS.output_dim))
        if n:
            Y[np.arange(n), labels] = 1.0
        states.append(ClientState(i, init_weights(21, DIMS, scheme, i),
                                  Batch(X, Y, labels)))
    return states


class TestDpsgd:
    def test_empty_graph_equals_plain_local_sgd_bitwise(self):
        states = make_states([6, 4])
        out, _ = dpsgd_round(DIMS, states, empty(2), DPSGD_DEFAULTS,
                             run_seed=1, round_index=3)
        for s, w in zip(states, out):
            direct = local_sgd(DIMS, s.weights, s.data, DPSGD_DEFAULTS,
                               _client_seed(1, 3, s.id))
            np.testing.assert_array_equal(w, direct)

    def test_fully_connected_identical_data_matches_centralized(self):
        # same data, shared init, full-batch steps: every client follows
        # the centralized full-batch trajectory and mixing is a no-op
        batch = make_batch(5, seed=30)
        states = [ClientState(i, init_weights(22, DIMS), batch) for i in range(3)]
        cfg = SgdConfig(lr=0.1, batch_size=5, local_epochs=1)
        out, _ = dpsgd_round(DIMS, states, complete(3), cfg, run_seed=2, round_index=1)
        g = loss_gradient(DIMS, states[0].weights, batch, "softmax_ce")
        central = states[0].weights - 0.1 * g
        for w in out:
            np.testing.assert_allclose(w, central, atol=1e-12)

    def test_round_log_counts_weight_broadcast(self):
        states = make_states([4, 4, 4])
        _, log = dpsgd_round(DIMS, states, ring(3), DPSGD_DEFAULTS,
                             run_seed=1, round_index=1)
        assert log.weights_out == 3 * 2 * DIMS.param_count
        assert log.jacobians == 0
        assert log.scalars_sent == log.weights_out


class TestDfedavg:
    def test_zero_epochs_is_pure_gossip_and_contracts(self):
        states = make_states([3, 3, 3, 3], scheme="per_client")
        cfg = SgdConfig(lr=0.1, batch_size=3, local_epochs=0)
        topo = ring(4)

        def spread(weights):
            return max(np.linalg.norm(a - b) for a in weights for b in weights)

        weights = [s.weights for s in states]
        from ntkdfl.protocol import phase_average
        before = spread(weights)
        out, _ = dfedavg_round(DIMS, states, topo, cfg, run_seed=3, round_index=1)
        np.testing.assert_allclose(np.array(out), np.array(phase_average(weights, topo)),
                                   atol=1e-12)
        after = spread(out)
        assert after < before

    def test_momentum_flag_off_equals_zero_momentum(self):
        states = make_states([5, 5])
        cfg = SgdConfig(lr=0.05, batch_size=5, local_epochs=2, momentum=0.9)
        off, _ = dfedavg_round(DIMS, states, complete(2), cfg, run_seed=4,
                               round_index=1, momentum_on=False)
        zero_cfg = SgdConfig(lr=0.05, batch_size=5, local_epochs=2, momentum=0.0)
        zero, _ = dfedavg_round(DIMS, states, complete(2), zero_cfg, run_seed=4,
                                round_index=1, momentum_on=True)
        for a, b in zip(off, zero):
            np.testing.assert_array_equal(a, b)

    def test_averages_before_training(self):
        states = make_states([4, 4], scheme="per_client")
        cfg = SgdConfig(lr=0.0, batch_size=4, local_epochs=1)
        out, _ = dfedavg_round(DIMS, states, complete(2), cfg, run_seed=5,
                               round_index=1)
        mean = (states[0].weights + states[1].weights) / 2
        for w in out:
            np.testing.assert_allclose(w, mean, atol=1e-12)

    def test_zero_sample_client_keeps_average(self):
        states = make_states([0, 6], scheme="per_client")
        out, _ = dfedavg_round(DIMS, states, complete(2), DFEDAVG_DEFAULTS,
                               run_seed=6, round_index=1)
        mean = (states[0].weights + states[1].weights) / 2
        np.testing.assert_allclose(out[0], mean, atol=1e-12)
