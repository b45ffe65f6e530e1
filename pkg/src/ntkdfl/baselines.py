"""Decentralized SGD baselines sharing the model, data, and topologies."""

from dataclasses import dataclass

import numpy as np

from . import seeding
from .mlp import Batch, ModelDims, loss_gradient
from .protocol import RoundMessageLog, client_map, phase_average
from .topology import Topology


@dataclass
class SgdConfig:
    lr: float
    batch_size: int
    local_epochs: int
    momentum: float = 0.0
    loss: str = "softmax_ce"

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


# Tuned baseline settings (best test accuracy at round 30 in the source
# experiments); D-PSGD is defined with a single local epoch.
DPSGD_DEFAULTS = SgdConfig(lr=0.1, batch_size=10, local_epochs=1)
DFEDAVG_DEFAULTS = SgdConfig(lr=0.1, batch_size=25, local_epochs=20)
DFEDAVGM_DEFAULTS = SgdConfig(lr=0.01, batch_size=50, local_epochs=20, momentum=0.9)


def local_sgd(dims: ModelDims, w: np.ndarray, data: Batch, cfg: SgdConfig,
              seed: int) -> np.ndarray:
    """Mini-batch SGD with seeded shuffling and optional heavy-ball
    momentum (v <- mu v + g; w <- w - lr v). The momentum buffer starts
    at zero: callers average weights between rounds, so a carried-over
    buffer would reference stale iterates."""
    if len(data) == 0:
        raise ValueError("empty batch")
    rng = np.random.default_rng(np.random.SeedSequence([seed, seeding.SGD]))
    w = w.copy()
    velocity = np.zeros_like(w)
    batch = max(1, min(cfg.batch_size, len(data)))
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), batch):
            rows = order[start:start + batch]
            mini = Batch(data.inputs[rows], data.targets[rows], data.labels[rows])
            grad = loss_gradient(dims, w, mini, cfg.loss)
            if cfg.momentum > 0.0:
                velocity = cfg.momentum * velocity + grad
                w = w - cfg.lr * velocity
            else:
                w = w - cfg.lr * grad
    return w


def _round_log(states, topo, dims, bytes_per_scalar) -> RoundMessageLog:
    # one weight broadcast per client per round
    log = RoundMessageLog(bytes_per_scalar=bytes_per_scalar)
    log.weights_out = sum(topo.degree(i) for i in range(len(states))) * dims.param_count
    return log


def _client_seed(run_seed: int, round_index: int, client: int) -> int:
    ss = np.random.SeedSequence([run_seed, seeding.SGD, round_index, client])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def dpsgd_round(dims: ModelDims, states: list, topo: Topology, cfg: SgdConfig,
                run_seed: int, round_index: int, workers: int = 1,
                bytes_per_scalar: int = 4):
    """Local SGD first, then replace weights by the closed-neighborhood
    average (uniform mixing, same operator as the kernel protocol)."""

    def work(state):
        if len(state.data) == 0:
            return state.weights
        return local_sgd(dims, state.weights, state.data, cfg,
                         _client_seed(run_seed, round_index, state.id))

    trained = client_map(work, states, workers)
    mixed = phase_average(trained, topo)
    return mixed, _round_log(states, topo, dims, bytes_per_scalar)


def dfedavg_round(dims: ModelDims, states: list, topo: Topology, cfg: SgdConfig,
                  run_seed: int, round_index: int, momentum_on: bool = False,
                  workers: int = 1, bytes_per_scalar: int = 4):
    """Neighborhood averaging first, then local epochs of SGD (momentum
    iff momentum_on)."""
    averaged = phase_average([s.weights for s in states], topo)
    local_cfg = cfg if momentum_on else SgdConfig(cfg.lr, cfg.batch_size,
                                                  cfg.local_epochs, 0.0, cfg.loss)

    def work(item):
        i, state = item
        if len(state.data) == 0 or local_cfg.local_epochs == 0:
            return averaged[i]
        return local_sgd(dims, averaged[i], state.data, local_cfg,
                         _client_seed(run_seed, round_index, i))

    new_weights = client_map(work, list(enumerate(states)), workers)
    return new_weights, _round_log(states, topo, dims, bytes_per_scalar)
