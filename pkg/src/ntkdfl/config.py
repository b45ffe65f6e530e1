"""Run configuration: strict JSON parsing, defaults, and echoing.

Unknown keys are rejected at every level (typo safety) and every
validation error names the offending field path. `serialize` emits the
fully defaulted document, so manifest files echo effective values.
"""

import json
from dataclasses import dataclass, field

from .errors import ConfigError

ALGORITHMS = ("ntk_dfl", "dpsgd", "dfedavg", "dfedavgm")
DEFAULT_T_GRID = list(range(100, 900, 100))


@dataclass
class DatasetConfig:
    name: str = "mnist"                 # mnist | fashion_mnist
    train_images: str = "train-images-idx3-ubyte.gz"
    train_labels: str = "train-labels-idx1-ubyte.gz"
    test_images: str = "t10k-images-idx3-ubyte.gz"
    test_labels: str = "t10k-labels-idx1-ubyte.gz"
    downsample: int = 1                 # mean-pool factor (2 -> 14x14)
    train_limit: int = 0                # 0 = use everything
    test_limit: int = 0


@dataclass
class HeterogeneityConfig:
    kind: str = "dirichlet"             # iid | dirichlet
    alpha: float = 0.1


@dataclass
class TopologyConfig:
    kind: str = "regular"               # regular | ring | erdos_renyi
    kappa: int = 5
    mean_degree: float = 5.0
    dynamic: bool = True


@dataclass
class SgdOverrides:
    """Optional overrides of the per-algorithm SGD defaults."""
    lr: float = None
    batch_size: int = None
    local_epochs: int = None
    momentum: float = None


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    num_clients: int = 300
    heterogeneity: HeterogeneityConfig = field(default_factory=HeterogeneityConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    algorithm: str = "ntk_dfl"
    rounds: int = 20
    eta: float = 0.01
    t_grid: list = field(default_factory=lambda: list(DEFAULT_T_GRID))
    jacobian_batches: int = 1
    init_scheme: str = "shared"         # shared | per_client
    per_round_averaging: bool = True
    selection_criterion: str = "high_to_low"
    validation_ratio: float = 0.5
    seed: list = field(default_factory=lambda: [1])   # one subdirectory per seed
    bytes_per_scalar: int = 4
    hidden_dim: int = 100
    engine: str = "auto"                # auto | dense | factored
    workers: int = 1
    sgd: SgdOverrides = field(default_factory=SgdOverrides)
    output_dir: str = "runs"
    dump_edges: bool = False


def _take(raw: dict, path: str, key: str, default, kinds, validator=None):
    value = raw.pop(key, default)
    if value is None:
        return None
    name = f"{path}.{key}" if path else key
    if kinds is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean")
    elif kinds is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer")
    elif kinds is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number")
        value = float(value)
    elif kinds is str:
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string")
    if validator is not None and not validator(value):
        raise ConfigError(f"{name}: invalid value {value!r}")
    return value


def _reject_unknown(raw: dict, path: str):
    if raw:
        name = f"{path}.{next(iter(raw))}" if path else next(iter(raw))
        raise ConfigError(f"unknown config key: {name}")


def _parse_dataset(raw) -> DatasetConfig:
    if not isinstance(raw, dict):
        raise ConfigError("dataset: expected an object")
    raw = dict(raw)
    cfg = DatasetConfig(
        name=_take(raw, "dataset", "name", "mnist", str,
                   lambda v: v in ("mnist", "fashion_mnist")),
        train_images=_take(raw, "dataset", "train_images",
                           DatasetConfig.train_images, str),
        train_labels=_take(raw, "dataset", "train_labels",
                           DatasetConfig.train_labels, str),
        test_images=_take(raw, "dataset", "test_images",
                          DatasetConfig.test_images, str),
        test_labels=_take(raw, "dataset", "test_labels",
                          DatasetConfig.test_labels, str),
        downsample=_take(raw, "dataset", "downsample", 1, int, lambda v: v >= 1),
        train_limit=_take(raw, "dataset", "train_limit", 0, int, lambda v: v >= 0),
        test_limit=_take(raw, "dataset", "test_limit", 0, int, lambda v: v >= 0),
    )
    _reject_unknown(raw, "dataset")
    return cfg


def _parse_heterogeneity(raw) -> HeterogeneityConfig:
    if not isinstance(raw, dict):
        raise ConfigError("heterogeneity: expected an object")
    raw = dict(raw)
    kind = _take(raw, "heterogeneity", "kind", "dirichlet", str,
                 lambda v: v in ("iid", "dirichlet"))
    alpha = _take(raw, "heterogeneity", "alpha", 0.1, float, lambda v: v > 0)
    _reject_unknown(raw, "heterogeneity")
    return HeterogeneityConfig(kind, alpha)


def _parse_topology(raw) -> TopologyConfig:
    if not isinstance(raw, dict):
        raise ConfigError("topology: expected an object")
    raw = dict(raw)
    cfg = TopologyConfig(
        kind=_take(raw, "topology", "kind", "regular", str,
                   lambda v: v in ("regular", "ring", "erdos_renyi")),
        kappa=_take(raw, "topology", "kappa", 5, int, lambda v: v >= 1),
        mean_degree=_take(raw, "topology", "mean_degree", 5.0, float, lambda v: v > 0),
        dynamic=_take(raw, "topology", "dynamic", True, bool),
    )
    _reject_unknown(raw, "topology")
    return cfg


def _parse_sgd(raw) -> SgdOverrides:
    if raw is None:
        return SgdOverrides()
    if not isinstance(raw, dict):
        raise ConfigError("sgd: expected an object")
    raw = dict(raw)
    cfg = SgdOverrides(
        lr=_take(raw, "sgd", "lr", None, float, lambda v: v > 0),
        batch_size=_take(raw, "sgd", "batch_size", None, int, lambda v: v >= 1),
        local_epochs=_take(raw, "sgd", "local_epochs", None, int, lambda v: v >= 0),
        momentum=_take(raw, "sgd", "momentum", None, float, lambda v: 0 <= v < 1),
    )
    _reject_unknown(raw, "sgd")
    return cfg


def _parse_seed(raw) -> list:
    value = raw.pop("seed", [1])
    if isinstance(value, bool):
        raise ConfigError("seed: expected an integer or list of integers")
    if isinstance(value, int):
        return [value]
    if (isinstance(value, list) and value
            and all(isinstance(s, int) and not isinstance(s, bool) for s in value)):
        if len(set(value)) != len(value):
            raise ConfigError("seed: duplicate entries")
        return list(value)
    raise ConfigError("seed: expected an integer or nonempty list of integers")


def _parse_t_grid(raw) -> list:
    value = raw.pop("t_grid", list(DEFAULT_T_GRID))
    ok = (isinstance(value, list) and value
          and all(isinstance(t, int) and not isinstance(t, bool) and t >= 0
                  for t in value)
          and all(a < b for a, b in zip(value, value[1:])))
    if not ok:
        raise ConfigError("t_grid: expected a strictly ascending list of"
                          " nonnegative integers")
    return list(value)


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected an object")
    raw = dict(raw)
    cfg = RunConfig(
        dataset=_parse_dataset(raw.pop("dataset", {})),
        num_clients=_take(raw, "", "num_clients", 300, int, lambda v: v >= 1),
        heterogeneity=_parse_heterogeneity(raw.pop("heterogeneity", {})),
        topology=_parse_topology(raw.pop("topology", {})),
        algorithm=_take(raw, "", "algorithm", "ntk_dfl", str,
                        lambda v: v in ALGORITHMS),
        rounds=_take(raw, "", "rounds", 20, int, lambda v: v >= 0),
        eta=_take(raw, "", "eta", 0.01, float, lambda v: v > 0),
        t_grid=_parse_t_grid(raw),
        jacobian_batches=_take(raw, "", "jacobian_batches", 1, int, lambda v: v >= 1),
        init_scheme=_take(raw, "", "init_scheme", "shared", str,
                          lambda v: v in ("shared", "per_client")),
        per_round_averaging=_take(raw, "", "per_round_averaging", True, bool),
        selection_criterion=_take(raw, "", "selection_criterion", "high_to_low", str,
                                  lambda v: v in ("high_to_low", "random", "low_to_high")),
        validation_ratio=_take(raw, "", "validation_ratio", 0.5, float,
                               lambda v: 0 < v < 1),
        seed=_parse_seed(raw),
        bytes_per_scalar=_take(raw, "", "bytes_per_scalar", 4, int, lambda v: v >= 1),
        hidden_dim=_take(raw, "", "hidden_dim", 100, int, lambda v: v >= 1),
        engine=_take(raw, "", "engine", "auto", str,
                     lambda v: v in ("auto", "dense", "factored")),
        workers=_take(raw, "", "workers", 1, int, lambda v: v >= 1),
        sgd=_parse_sgd(raw.pop("sgd", None)),
        output_dir=_take(raw, "", "output_dir", "runs", str),
        dump_edges=_take(raw, "", "dump_edges", False, bool),
    )
    _reject_unknown(raw, "")
    if cfg.topology.kind == "regular" and cfg.topology.kappa >= cfg.num_clients:
        raise ConfigError("topology.kappa: must be smaller than num_clients")
    if cfg.topology.kind == "erdos_renyi" and cfg.topology.mean_degree >= cfg.num_clients - 1:
        raise ConfigError("topology.mean_degree: must be smaller than num_clients - 1")
    return cfg


def parse_config(text: str) -> RunConfig:
    """Parse a UTF-8 JSON document into a validated RunConfig."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"JSON parse error at line {e.lineno}, column {e.colno}: "
                          f"{e.msg}") from e
    return from_dict(raw)


def serialize(cfg: RunConfig) -> dict:
    """Effective configuration with every default made explicit."""
    return {
        "dataset": {
            "name": cfg.dataset.name,
            "train_images": cfg.dataset.train_images,
            "train_labels": cfg.dataset.train_labels,
            "test_images": cfg.dataset.test_images,
            "test_labels": cfg.dataset.test_labels,
            "downsample": cfg.dataset.downsample,
            "train_limit": cfg.dataset.train_limit,
            "test_limit": cfg.dataset.test_limit,
        },
        "num_clients": cfg.num_clients,
        "heterogeneity": {"kind": cfg.heterogeneity.kind,
                          "alpha": cfg.heterogeneity.alpha},
        "topology": {"kind": cfg.topology.kind, "kappa": cfg.topology.kappa,
                     "mean_degree": cfg.topology.mean_degree,
                     "dynamic": cfg.topology.dynamic},
        "algorithm": cfg.algorithm,
        "rounds": cfg.rounds,
        "eta": cfg.eta,
        "t_grid": list(cfg.t_grid),
        "jacobian_batches": cfg.jacobian_batches,
        "init_scheme": cfg.init_scheme,
        "per_round_averaging": cfg.per_round_averaging,
        "selection_criterion": cfg.selection_criterion,
        "validation_ratio": cfg.validation_ratio,
        "seed": list(cfg.seed),
        "bytes_per_scalar": cfg.bytes_per_scalar,
        "hidden_dim": cfg.hidden_dim,
        "engine": cfg.engine,
        "workers": cfg.workers,
        "sgd": {"lr": cfg.sgd.lr, "batch_size": cfg.sgd.batch_size,
                "local_epochs": cfg.sgd.local_epochs, "momentum": cfg.sgd.momentum},
        "output_dir": cfg.output_dir,
        "dump_edges": cfg.dump_edges,
    }
