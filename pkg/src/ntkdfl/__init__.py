"""Decentralized federated learning with kernel-based weight evolution.

Clients on a per-round communication graph average weights with their
neighbors, exchange per-sample Jacobians, and evolve weights in closed
form under the empirical tangent kernel; SGD-based decentralized
baselines share the same model, data partitions, and topologies.
"""

__version__ = "0.1.0"

from .aggregation import (evaluate_accuracy, final_average, inter_model_variance,
                          rounds_to_threshold, selection_order)
from .config import RunConfig, parse_config
from .data import (Dataset, Partition, dirichlet_partition, iid_partition,
                   load_dataset, one_hot, read_idx, split_validation, write_idx)
from .experiment import emit_metrics, run_experiment, run_single
from .mlp import (Batch, JacobianFeatures, ModelDims, forward, init_weights,
                  jacobian, jacobian_features, loss_gradient)
from .ntk import (EvolutionResult, accumulate_residuals, evolve_residuals,
                  evolve_weights, expm_sym, gram, gram_from_features,
                  recover_weights, recover_weights_from_features, select_timestep)
from .protocol import (ClientState, ProtocolConfig, RoundMessageLog,
                       phase_average, phase_evolve, phase_jacobians, run_round)
from .topology import Topology, complete, erdos_renyi, random_regular, ring

__all__ = [name for name in dir() if not name.startswith("_")]
