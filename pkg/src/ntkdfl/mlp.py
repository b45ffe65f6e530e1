"""Two-layer MLP with analytic per-sample Jacobians.

The model is f(x) = W2 relu(W1 x + b1) + b2 with a linear output layer;
the linear output keeps the squared-loss kernel dynamics exact for the
linearized model. Weights live in a single flat float64 vector with the
layout [W1 row-major, b1, W2 row-major, b2], so elementwise averaging
across clients is well defined.
"""

from dataclasses import dataclass

import numpy as np

from . import seeding


@dataclass(frozen=True)
class ModelDims:
    input_dim: int
    hidden_dim: int = 100
    output_dim: int = 10

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ValueError("all model dimensions must be >= 1")

    @property
    def param_count(self) -> int:
        return (self.input_dim + 1) * self.hidden_dim + (self.hidden_dim + 1) * self.output_dim


@dataclass
class Batch:
    """One client's local data: inputs in [0,1], one-hot targets, labels."""

    inputs: np.ndarray   # (N, input_dim)
    targets: np.ndarray  # (N, output_dim) one-hot rows
    labels: np.ndarray   # (N,) ints

    def __len__(self) -> int:
        return self.inputs.shape[0]


def unpack(dims: ModelDims, w: np.ndarray):
    """Views (W1, b1, W2, b2) into the flat vector; no copies."""
    i, h, o = dims.input_dim, dims.hidden_dim, dims.output_dim
    n1 = h * i
    W1 = w[:n1].reshape(h, i)
    b1 = w[n1:n1 + h]
    W2 = w[n1 + h:n1 + h + o * h].reshape(o, h)
    b2 = w[n1 + h + o * h:]
    return W1, b1, W2, b2


def pack(dims: ModelDims, W1, b1, W2, b2) -> np.ndarray:
    w = np.empty(dims.param_count)
    pW1, pb1, pW2, pb2 = unpack(dims, w)
    pW1[:] = W1
    pb1[:] = b1
    pW2[:] = W2
    pb2[:] = b2
    return w


def init_weights(seed: int, dims: ModelDims, scheme: str = "shared",
                 client_id: int = 0) -> np.ndarray:
    """He-style init: N(0, 2/fan_in) weight blocks, zero biases.

    scheme="shared" gives every client the identical vector for a given
    seed; scheme="per_client" mixes client_id into the stream.
    """
    if scheme == "shared":
        rng = seeding.stream(seed, seeding.INIT)
    elif scheme == "per_client":
        rng = seeding.stream(seed, seeding.INIT, client_id + 1)
    else:
        raise ValueError(f"unknown init scheme: {scheme!r}")
    i, h, o = dims.input_dim, dims.hidden_dim, dims.output_dim
    W1 = rng.normal(0.0, np.sqrt(2.0 / i), size=(h, i))
    W2 = rng.normal(0.0, np.sqrt(2.0 / h), size=(o, h))
    return pack(dims, W1, np.zeros(h), W2, np.zeros(o))


def _check_inputs(dims: ModelDims, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != dims.input_dim:
        raise ValueError(f"inputs have shape {X.shape}, expected (*, {dims.input_dim})")


def forward(dims: ModelDims, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Evaluate the network on rows of X; returns (N, output_dim)."""
    _check_inputs(dims, X)
    W1, b1, W2, b2 = unpack(dims, w)
    hidden = np.maximum(X @ W1.T + b1, 0.0)
    return hidden @ W2.T + b2


@dataclass
class JacobianFeatures:
    """Factored per-sample Jacobians of rows sharing one weight vector.

    For this architecture the full (N, d2, d) Jacobian tensor is a
    deterministic function of (inputs, hidden activations, ReLU gates,
    W2), so kernels and weight recovery can be computed without ever
    materializing it. ``dense`` assembles the literal tensor.
    """

    dims: ModelDims
    inputs: np.ndarray   # (N, input_dim)
    hidden: np.ndarray   # (N, hidden_dim) post-activation
    gates: np.ndarray    # (N, hidden_dim) relu'(z1), 0.0 or 1.0
    w2: np.ndarray       # (output_dim, hidden_dim) at the shared weights

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def dense(self) -> np.ndarray:
        dims = self.dims
        n = len(self)
        i, h, o = dims.input_dim, dims.hidden_dim, dims.output_dim
        J = np.zeros((n, o, dims.param_count))
        # dz1[n, j, p] = d f_j / d z1_p = W2[j, p] * gate[n, p]
        dz1 = self.w2[None, :, :] * self.gates[:, None, :]
        J[:, :, :h * i].reshape(n, o, h, i)[:] = dz1[:, :, :, None] * self.inputs[:, None, None, :]
        J[:, :, h * i:h * i + h] = dz1
        w2_block = J[:, :, h * i + h:h * i + h + o * h].reshape(n, o, o, h)
        rows = np.arange(o)
        w2_block[:, rows, rows, :] = self.hidden[:, None, :]
        J[:, :, h * i + h + o * h:][:, rows, rows] = 1.0
        return J


def jacobian_features(dims: ModelDims, w: np.ndarray, X: np.ndarray) -> JacobianFeatures:
    """Factored Jacobians plus nothing else; O(N * (input+hidden)) memory."""
    _check_inputs(dims, X)
    W1, b1, W2, _ = unpack(dims, w)
    z1 = X @ W1.T + b1
    gates = (z1 > 0.0).astype(np.float64)  # subgradient at 0 is 0
    hidden = z1 * gates
    return JacobianFeatures(dims, X, hidden, gates, W2.copy())


def jacobian(dims: ModelDims, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Dense per-sample Jacobian tensor of shape (N, output_dim, d)."""
    return jacobian_features(dims, w, X).dense()


def loss_gradient(dims: ModelDims, w: np.ndarray, batch: Batch, loss: str = "softmax_ce") -> np.ndarray:
    """Gradient of the mean loss over the batch, as a flat vector.

    "softmax_ce" is softmax + cross-entropy; "mse" is the squared loss
    (1/(2 N d2)) * ||f - Y||^2 matching the kernel-evolution residuals.
    """
    X, Y = batch.inputs, batch.targets
    if len(batch) == 0:
        raise ValueError("empty batch")
    _check_inputs(dims, X)
    W1, b1, W2, b2 = unpack(dims, w)
    z1 = X @ W1.T + b1
    gates = (z1 > 0.0).astype(np.float64)
    hidden = z1 * gates
    f = hidden @ W2.T + b2
    n, d2 = f.shape
    if loss == "mse":
        G = (f - Y) / (n * d2)
    elif loss == "softmax_ce":
        p = np.exp(f - f.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        G = (p - Y) / n
    else:
        raise ValueError(f"unknown loss: {loss!r}")
    dW2 = G.T @ hidden
    db2 = G.sum(axis=0)
    dz1 = (G @ W2) * gates
    dW1 = dz1.T @ X
    db1 = dz1.sum(axis=0)
    return pack(dims, dW1, db1, dW2, db2)
