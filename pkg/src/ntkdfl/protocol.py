"""The kernel-exchange round state machine.

A round runs three barrier-separated phases:

1. phase_average — every client averages weights over its closed
   neighborhood and sends the average back to neighbors.
2. phase_jacobians — every client differentiates its own data at each
   neighbor's averaged weights and ships the Jacobians, one-hot labels,
   and function evaluations over; each client stacks its own block with
   the received ones (own rows first, then neighbors ascending).
3. phase_evolve — every client assembles its kernel and evolves weights
   in closed form, keeping the lowest-loss timestep.

With jacobian_batches = m > 1, each client's rows are split into m
near-equal batches and phases 2-3 repeat per batch against the weights
evolved in the previous sub-batch; averaging happens only at round start.

All cross-client data moves through staged inboxes owned by the
orchestrator and tagged with the phase that produced them; per-client
work items are pure, so they may run on a thread pool and are always
reduced in client-index order.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericalError
from .mlp import Batch, JacobianFeatures, ModelDims, jacobian_features, unpack
from .ntk import evolve_weights
from .topology import Topology

DEFAULT_T_GRID = tuple(range(100, 900, 100))


@dataclass
class ClientState:
    id: int
    weights: np.ndarray
    data: Batch


@dataclass
class RoundMessageLog:
    """Scalar counts per message class; bytes are scalars * wire width."""

    bytes_per_scalar: int = 4
    weights_out: int = 0
    avg_weights_back: int = 0
    jacobians: int = 0
    labels: int = 0
    evals: int = 0

    @property
    def scalars_sent(self) -> int:
        return (self.weights_out + self.avg_weights_back + self.jacobians
                + self.labels + self.evals)

    @property
    def bytes_sent(self) -> int:
        return self.scalars_sent * self.bytes_per_scalar


@dataclass
class ProtocolConfig:
    dims: ModelDims
    eta: float = 0.01
    t_grid: tuple = DEFAULT_T_GRID
    jacobian_batches: int = 1
    per_round_averaging: bool = True
    engine: str = "auto"          # auto | dense | factored
    workers: int = 1
    bytes_per_scalar: int = 4


def client_map(fn, items, workers: int) -> list:
    """Apply fn per client, optionally on a thread pool; results are
    returned in submission order regardless of completion order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def phase_average(weights: list, topo: Topology) -> list:
    """Closed-neighborhood means; isolated clients keep their own weights.

    Neighbor contributions accumulate in ascending index order so the
    result is bit-stable across runs and worker counts.
    """
    averaged = []
    for i, w in enumerate(weights):
        nbrs = topo.neighbors(i)
        stack = np.vstack([w] + [weights[j] for j in nbrs])
        averaged.append(stack.sum(axis=0) / (len(nbrs) + 1))
    return averaged


@dataclass
class StackBundle:
    """One client's assembled evolution inputs for a (sub-)round."""

    client: int
    phase: str                    # producing phase tag, asserted downstream
    source: object                # JacobianFeatures or dense (N, d2, d) array
    targets: np.ndarray           # (N, d2)
    evals: np.ndarray             # (N, d2) f at the reference weights
    row_owner: np.ndarray         # (N,) sender client index per row

    def __len__(self) -> int:
        return self.targets.shape[0]


def _pair_message(dims, w_ref_j, X_rows, dense: bool):
    """What sender i ships to receiver j for its rows: the Jacobian block
    (dense tensor or its factored form) plus evaluations f(X_i; w_ref_j)."""
    feat = jacobian_features(dims, w_ref_j, X_rows)
    _, _, _, b2 = unpack(dims, w_ref_j)
    evals = feat.hidden @ feat.w2.T + b2
    return (feat.dense() if dense else feat), evals


def phase_jacobians(states: list, topo: Topology, w_ref: list, rows: list,
                    cfg: ProtocolConfig) -> list:
    """Compute, exchange, and stack Jacobian blocks for the given rows.

    `w_ref` is the per-client reference weight (averaged unless the
    ablation turned averaging off); `rows[i]` selects which of client i's
    samples participate in this sub-round. Returns one StackBundle per
    client; a client with no own or neighbor rows gets an empty bundle.
    """
    dims = cfg.dims
    dense = _resolve_engine(cfg.engine) == "dense"

    def sender_work(i: int) -> dict:
        X = states[i].data.inputs[rows[i]]
        out = {}
        if X.shape[0]:
            for j in [i] + topo.neighbors(i):
                out[j] = _pair_message(dims, w_ref[j], X, dense)
        return out

    outboxes = client_map(sender_work, range(len(states)), cfg.workers)
    # Barrier: stage every message in the receiver's inbox before assembly.
    inboxes = [{} for _ in states]
    for i, outbox in enumerate(outboxes):
        for j, message in outbox.items():
            inboxes[j][i] = message

    bundles = []
    for i in range(len(states)):
        senders = [s for s in [i] + topo.neighbors(i) if s in inboxes[i]]
        blocks = [inboxes[i][s][0] for s in senders]
        evals = [inboxes[i][s][1] for s in senders]
        targets = [states[s].data.targets[rows[s]] for s in senders]
        owners = [np.full(len(rows[s]), s) for s in senders]
        if not senders:
            empty = np.zeros((0, dims.output_dim))
            source = (np.zeros((0, dims.output_dim, dims.param_count)) if dense
                      else JacobianFeatures(dims, np.zeros((0, dims.input_dim)),
                                            np.zeros((0, dims.hidden_dim)),
                                            np.zeros((0, dims.hidden_dim)),
                                            unpack(dims, w_ref[i])[2].copy()))
            bundles.append(StackBundle(i, "jacobians", source, empty, empty,
                                       np.zeros(0, dtype=np.int64)))
            continue
        if dense:
            source = np.concatenate(blocks, axis=0)
        else:
            source = JacobianFeatures(
                dims,
                np.concatenate([b.inputs for b in blocks], axis=0),
                np.concatenate([b.hidden for b in blocks], axis=0),
                np.concatenate([b.gates for b in blocks], axis=0),
                blocks[0].w2,
            )
        bundles.append(StackBundle(i, "jacobians", source,
                                   np.concatenate(targets, axis=0),
                                   np.concatenate(evals, axis=0),
                                   np.concatenate(owners, axis=0)))
    return bundles


def phase_evolve(bundles: list, w_ref: list, cfg: ProtocolConfig) -> list:
    """Per-client closed-form evolution; empty stacks leave weights as-is."""

    def work(bundle: StackBundle) -> np.ndarray:
        assert bundle.phase == "jacobians", "evolve consumed a stale bundle"
        i = bundle.client
        if len(bundle) == 0:
            return w_ref[i]
        try:
            result = evolve_weights(bundle.source, bundle.targets, bundle.evals,
                                    w_ref[i], cfg.eta, cfg.t_grid)
        except NumericalError as e:
            raise NumericalError(f"client {i}: {e}") from e
        return result.new_weights

    return client_map(work, bundles, cfg.workers)


def _resolve_engine(engine: str) -> str:
    if engine == "auto":
        return "factored"
    if engine in ("dense", "factored"):
        return engine
    raise ValueError(f"unknown engine: {engine!r}")


def _batch_rows(states: list, m: int) -> list:
    """rows[s][i]: client i's sample indices in sub-round s; every sample
    appears in exactly one sub-round."""
    per_client = [np.array_split(np.arange(len(s.data)), m) for s in states]
    return [[per_client[i][s] for i in range(len(states))] for s in range(m)]


def count_messages(states: list, topo: Topology, cfg: ProtocolConfig) -> RoundMessageLog:
    """Wire tallies for one round, independent of engine and batching."""
    d = cfg.dims.param_count
    d2 = cfg.dims.output_dim
    log = RoundMessageLog(bytes_per_scalar=cfg.bytes_per_scalar)
    for i, state in enumerate(states):
        deg = topo.degree(i)
        n_i = len(state.data)
        log.weights_out += deg * d
        if cfg.per_round_averaging:
            log.avg_weights_back += deg * d
        log.jacobians += deg * n_i * d2 * d
        log.labels += deg * n_i * d2
        log.evals += deg * n_i * d2
    return log


def run_round(states: list, topo: Topology, cfg: ProtocolConfig):
    """Execute one full communication round; returns (states', log)."""
    if [s.id for s in states] != list(range(len(states))):
        raise ValueError("states must be ordered by client id 0..M-1")
    weights = [s.weights for s in states]
    if cfg.per_round_averaging:
        current = phase_average(weights, topo)
    else:
        current = list(weights)
    log = count_messages(states, topo, cfg)
    for rows in _batch_rows(states, max(1, cfg.jacobian_batches)):
        bundles = phase_jacobians(states, topo, current, rows, cfg)
        current = phase_evolve(bundles, current, cfg)
    for i, w in enumerate(current):
        if not np.all(np.isfinite(w)):
            raise NumericalError(f"client {i}: non-finite weights after round")
    new_states = [replace(s, weights=current[i]) for i, s in enumerate(states)]
    return new_states, log
