"""Experiment orchestration: rounds loop, metrics, and run artifacts.

Each run writes metrics.csv (one row per round), selection.csv (prefix
accuracies for all three selection criteria), and manifest.json (the
effective config plus provenance notes). Given (config, seed), outputs
are byte-identical across repetitions and worker counts: BLAS pools are
pinned to one thread for the whole run (client-level parallelism comes
from the `workers` setting) and every reduction runs in client order.
"""

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, baselines, data, topology
from .aggregation import (evaluate_accuracy, final_average, inter_model_variance,
                          selection_order)
from .config import RunConfig, serialize
from .errors import NumericalError
from .mlp import Batch, ModelDims, init_weights
from .protocol import ClientState, ProtocolConfig, client_map, run_round

DATA_ROOT_ENV = "NTKDFL_DATA_DIR"

METRICS_HEADER = ("round,agg_test_acc,mean_client_acc,std_client_acc,"
                  "min_client_acc,max_client_acc,variance_V,scalars_sent,bytes_sent")


@dataclass
class RoundRecord:
    round: int
    agg_test_acc: float
    mean_client_acc: float
    std_client_acc: float
    min_client_acc: float
    max_client_acc: float
    variance_V: float
    scalars_sent: int
    bytes_sent: int


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def emit_metrics(records) -> str:
    """Render per-round records as diff-friendly CSV (9 significant digits)."""
    lines = [METRICS_HEADER]
    for r in records:
        lines.append(",".join([
            str(r.round), _fmt(r.agg_test_acc), _fmt(r.mean_client_acc),
            _fmt(r.std_client_acc), _fmt(r.min_client_acc), _fmt(r.max_client_acc),
            _fmt(r.variance_V), str(r.scalars_sent), str(r.bytes_sent),
        ]))
    return "\n".join(lines) + "\n"


def emit_selection(orders) -> str:
    lines = ["criterion,prefix_size,test_acc"]
    for order in orders:
        for size, acc in enumerate(order.prefix_accuracies, start=1):
            lines.append(f"{order.criterion},{size},{_fmt(acc)}")
    return "\n".join(lines) + "\n"


def resolve_data_path(path: str) -> Path:
    """Relative dataset paths resolve against $NTKDFL_DATA_DIR when set."""
    p = Path(path)
    if p.is_absolute():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    return (Path(root) / p) if root else p


def _load_datasets(cfg: RunConfig, seed: int):
    ds = cfg.dataset
    train = data.load_dataset(resolve_data_path(ds.train_images),
                              resolve_data_path(ds.train_labels), ds.downsample)
    test = data.load_dataset(resolve_data_path(ds.test_images),
                             resolve_data_path(ds.test_labels), ds.downsample)
    if ds.train_limit:
        train = data.subset(train, ds.train_limit, seed)
    if ds.test_limit:
        test = data.subset(test, ds.test_limit, seed + 1)
    return train, test


def _partition(cfg: RunConfig, labels, seed: int) -> data.Partition:
    if cfg.heterogeneity.kind == "iid":
        return data.iid_partition(labels, cfg.num_clients, seed)
    return data.dirichlet_partition(labels, cfg.num_clients,
                                    cfg.heterogeneity.alpha, seed)


def _make_states(cfg: RunConfig, dims: ModelDims, train, part, seed: int):
    states = []
    for i, idx in enumerate(part.assignment):
        w = init_weights(seed, dims, cfg.init_scheme, i)
        batch = Batch(train.images[idx], data.one_hot(train.labels[idx], 10),
                      train.labels[idx])
        states.append(ClientState(i, w, batch))
    return states


def _sgd_config(cfg: RunConfig) -> baselines.SgdConfig:
    base = {"dpsgd": baselines.DPSGD_DEFAULTS,
            "dfedavg": baselines.DFEDAVG_DEFAULTS,
            "dfedavgm": baselines.DFEDAVGM_DEFAULTS}[cfg.algorithm]
    o = cfg.sgd
    return baselines.SgdConfig(
        lr=base.lr if o.lr is None else o.lr,
        batch_size=base.batch_size if o.batch_size is None else o.batch_size,
        local_epochs=base.local_epochs if o.local_epochs is None else o.local_epochs,
        momentum=base.momentum if o.momentum is None else o.momentum,
    )


def _round_topology(cfg: RunConfig, seed: int, k: int) -> topology.Topology:
    param = cfg.topology.kappa if cfg.topology.kind == "regular" else cfg.topology.mean_degree
    return topology.for_round(cfg.topology.kind, cfg.num_clients, param,
                              seed, k, cfg.topology.dynamic)


def _evaluate(cfg, dims, states, sizes, holdout, round_index, log) -> RoundRecord:
    accs = np.array(client_map(
        lambda s: evaluate_accuracy(dims, s.weights, holdout), states, cfg.workers))
    agg = final_average([s.weights for s in states], sizes, range(len(states)))
    variance = (inter_model_variance([s.weights for s in states])
                if len(states) > 1 else 0.0)
    return RoundRecord(
        round=round_index,
        agg_test_acc=evaluate_accuracy(dims, agg, holdout),
        mean_client_acc=float(accs.mean()),
        std_client_acc=float(accs.std()),
        min_client_acc=float(accs.min()),
        max_client_acc=float(accs.max()),
        variance_V=variance,
        scalars_sent=0 if log is None else log.scalars_sent,
        bytes_sent=0 if log is None else log.bytes_sent,
    )


def run_single(cfg: RunConfig, seed: int, out_dir: Path) -> Path:
    """Execute one seed of the configured experiment into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=1):
        train, test = _load_datasets(cfg, seed)
        dims = ModelDims(train.images.shape[1], cfg.hidden_dim, 10)
        part = _partition(cfg, train.labels, seed)
        sizes = part.sizes
        val, holdout = data.split_validation(test, cfg.validation_ratio, seed)
        states = _make_states(cfg, dims, train, part, seed)

        pcfg = ProtocolConfig(dims=dims, eta=cfg.eta, t_grid=tuple(cfg.t_grid),
                              jacobian_batches=cfg.jacobian_batches,
                              per_round_averaging=cfg.per_round_averaging,
                              engine=cfg.engine, workers=cfg.workers,
                              bytes_per_scalar=cfg.bytes_per_scalar)
        records = [_evaluate(cfg, dims, states, sizes, holdout, 0, None)]
        edge_dumps = {}
        for k in range(1, cfg.rounds + 1):
            topo = _round_topology(cfg, seed, k)
            if cfg.dump_edges:
                edge_dumps[k] = topo.edge_list_text()
            if cfg.algorithm == "ntk_dfl":
                try:
                    states, log = run_round(states, topo, pcfg)
                except NumericalError as e:
                    raise NumericalError(f"round {k}: {e}") from e
            else:
                sgd = _sgd_config(cfg)
                if cfg.algorithm == "dpsgd":
                    weights, log = baselines.dpsgd_round(
                        dims, states, topo, sgd, seed, k, cfg.workers,
                        cfg.bytes_per_scalar)
                else:
                    weights, log = baselines.dfedavg_round(
                        dims, states, topo, sgd, seed, k,
                        momentum_on=(cfg.algorithm == "dfedavgm"),
                        workers=cfg.workers, bytes_per_scalar=cfg.bytes_per_scalar)
                states = [replace(s, weights=w) for s, w in zip(states, weights)]
            records.append(_evaluate(cfg, dims, states, sizes, holdout, k, log))

        weights = [s.weights for s in states]
        orders = [selection_order(dims, weights, sizes, val, holdout, criterion, seed)
                  for criterion in ("high_to_low", "random", "low_to_high")]

    (out_dir / "metrics.csv").write_text(emit_metrics(records))
    (out_dir / "selection.csv").write_text(emit_selection(orders))
    manifest = {
        "config": serialize(cfg),
        "seed": seed,
        "version": __version__,
        "exponent_sign": "negative",
        "empty_clients": part.empty_clients,
        "client_sizes": sizes.tolist(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    if edge_dumps:
        edges_dir = out_dir / "edges"
        edges_dir.mkdir(exist_ok=True)
        for k, text in edge_dumps.items():
            (edges_dir / f"round_{k:04d}.txt").write_text(text)
    return out_dir


def run_experiment(cfg: RunConfig, out_dir=None) -> list:
    """Run every configured seed; a multi-seed sweep writes one
    subdirectory per seed. Returns the run directories."""
    base = Path(out_dir) if out_dir is not None else Path(cfg.output_dir)
    if len(cfg.seed) == 1:
        return [run_single(cfg, cfg.seed[0], base)]
    return [run_single(cfg, s, base / f"seed_{s}") for s in cfg.seed]
