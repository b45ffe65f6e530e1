"""Kernel assembly, closed-form residual dynamics, and weight recovery.

The per-client kernel is H[m,n] = (1/d2) <J(x_m), J(x_n)>_F over stacked
per-sample Jacobians. Predictions evolve as

    f(t) = (I - E(t)) Y + E(t) f0,   E(t) = exp(-(eta t / N) H),

and weights are recovered through the transposed Jacobians applied to the
accumulated residual sum R(t) = (eta/(N d2)) * sum_{u<t} (Y - f(u)).

The exponent is implemented with a negative sign: the printed positive
sign diverges for PSD kernels, while the negative one drives f(t) -> Y,
which is what lowest-loss timestep selection presumes. The sign
convention is recorded in every run manifest.

Two equivalent compute paths exist: a dense path taking the literal
(N, d2, d) tensor, and a factored path taking JacobianFeatures, which
never materializes the tensor. They agree to roundoff; the factored path
is the only one that fits in time/memory at experiment scale.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .mlp import JacobianFeatures, pack, unpack

# Eigenvalues of a Gram matrix may round slightly negative; anything
# below -PSD_TOL * lambda_max means the kernel itself is broken.
PSD_TOL = 1e-8


def gram(stack: np.ndarray) -> np.ndarray:
    """Kernel from a dense (N, d2, d) Jacobian stack; symmetrized."""
    n, d2, _ = stack.shape
    flat = stack.reshape(n, -1)
    H = flat @ flat.T / d2
    return (H + H.T) / 2.0


def gram_from_features(feat: JacobianFeatures) -> np.ndarray:
    """Same kernel from the factored representation.

    Blockwise the Frobenius product splits into W2/b2 terms (d2 equal
    copies of h.h' and 1) and W1/b1 terms carrying the gate overlap
    weighted by column norms of W2, times (1 + x.x').
    """
    d2 = feat.w2.shape[0]
    col_norms = (feat.w2 ** 2).sum(axis=0)
    base = feat.hidden @ feat.hidden.T + 1.0
    gate_overlap = (feat.gates * col_norms) @ feat.gates.T
    H = base + gate_overlap * (1.0 + feat.inputs @ feat.inputs.T) / d2
    return (H + H.T) / 2.0


@dataclass
class KernelEigenbasis:
    """Eigendecomposition of a PSD kernel, reused across all timesteps."""

    eigenvalues: np.ndarray  # ascending, clamped at zero
    vectors: np.ndarray      # orthonormal columns


def eigenbasis(H: np.ndarray, psd_tol: float = PSD_TOL) -> KernelEigenbasis:
    """Symmetric eigendecomposition with PSD repair.

    Eigenvalues within -psd_tol * lambda_max of zero are clamped to 0;
    anything more negative raises NumericalError.
    """
    try:
        lam, vecs = np.linalg.eigh(H)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"eigendecomposition failed: {e}") from e
    lam_max = max(float(lam[-1]), 0.0) if lam.size else 0.0
    floor = -psd_tol * max(lam_max, np.finfo(np.float64).tiny)
    if lam.size and float(lam[0]) < floor:
        raise NumericalError(
            f"kernel not PSD: min eigenvalue {lam[0]:.3e} < {floor:.3e}")
    return KernelEigenbasis(np.maximum(lam, 0.0), vecs)


def expm_sym(H: np.ndarray, s: float) -> np.ndarray:
    """exp(-s * H) for symmetric H via eigendecomposition."""
    try:
        lam, vecs = np.linalg.eigh(H)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"eigendecomposition failed: {e}") from e
    return (vecs * np.exp(-s * lam)) @ vecs.T


def _as_eigenbasis(H) -> KernelEigenbasis:
    return H if isinstance(H, KernelEigenbasis) else eigenbasis(np.asarray(H))


def evolve_residuals(H, Y: np.ndarray, f0: np.ndarray, eta: float,
                     t_grid, n_rows: int) -> dict:
    """Predictions f(t) = Y + E(t) (f0 - Y) for every t in the grid.

    One eigendecomposition serves all timesteps; H may be a matrix or a
    precomputed KernelEigenbasis.
    """
    if Y.shape != f0.shape:
        raise ValueError(f"targets {Y.shape} vs evaluations {f0.shape}")
    if eta <= 0:
        raise ValueError("eta must be positive")
    eig = _as_eigenbasis(H)
    coords = eig.vectors.T @ (f0 - Y)
    rate = eta / n_rows
    return {t: Y + eig.vectors @ (np.exp(-rate * t * eig.eigenvalues)[:, None] * coords)
            for t in t_grid}


def accumulate_residuals(Y: np.ndarray, f_series: dict, eta: float, t: int,
                         n_rows: int, d2: int) -> np.ndarray:
    """Literal residual sum R(t) = (eta/(n_rows d2)) sum_{u<t} (Y - f(u)).

    Requires f_series to hold every integer timestep 0..t-1; the engine
    uses the closed-form equivalent (geometric series per eigendirection)
    so the grid never has to be that fine.
    """
    missing = [u for u in range(t) if u not in f_series]
    if missing:
        raise ValueError(f"f_series missing evaluations at u={missing[:5]}...")
    total = np.zeros_like(Y)
    for u in range(t):
        total += Y - f_series[u]
    return eta / (n_rows * d2) * total


def _geometric_sums(eig: KernelEigenbasis, rate: float, t: int) -> np.ndarray:
    """sum_{u<t} exp(-rate*lam*u) per eigendirection, stable near lam=0."""
    x = rate * eig.eigenvalues
    out = np.full(x.shape, float(t))
    nz = x > 0
    out[nz] = np.expm1(-x[nz] * t) / np.expm1(-x[nz])
    return out


def closed_form_residuals(eig: KernelEigenbasis, Y: np.ndarray, f0: np.ndarray,
                          eta: float, t: int, n_rows: int) -> np.ndarray:
    """R(t) without the per-timestep sum: since Y - f(u) = -E(u)(f0 - Y),
    the sum over u < t is a geometric series in each eigendirection,
    matching the literal sum exactly for the linearized dynamics."""
    d2 = Y.shape[1]
    coords = eig.vectors.T @ (f0 - Y)
    sums = _geometric_sums(eig, eta / n_rows, t)
    return -eta / (n_rows * d2) * (eig.vectors @ (sums[:, None] * coords))


def recover_weights(stack: np.ndarray, R: np.ndarray, w_base: np.ndarray) -> np.ndarray:
    """w_base + sum_j (stack[:, j, :])^T R[:, j] from the dense tensor."""
    if stack.shape[:2] != R.shape:
        raise ValueError(f"stack rows {stack.shape[:2]} vs residuals {R.shape}")
    return w_base + np.tensordot(R, stack, axes=([0, 1], [0, 1]))


def recover_weights_from_features(feat: JacobianFeatures, R: np.ndarray,
                                  w_base: np.ndarray) -> np.ndarray:
    """Factored equivalent of recover_weights."""
    if (len(feat), feat.w2.shape[0]) != R.shape:
        raise ValueError(f"feature rows {len(feat)} vs residuals {R.shape}")
    dW2 = R.T @ feat.hidden
    db2 = R.sum(axis=0)
    back = (R @ feat.w2) * feat.gates
    dW1 = back.T @ feat.inputs
    db1 = back.sum(axis=0)
    return w_base + pack(feat.dims, dW1, db1, dW2, db2)


def apply_jacobian(source, delta_w: np.ndarray) -> np.ndarray:
    """First-order prediction change J . delta_w for a stack or features."""
    if isinstance(source, JacobianFeatures):
        dW1, db1, dW2, db2 = unpack(source.dims, delta_w)
        hidden_delta = (source.inputs @ dW1.T + db1) * source.gates
        return source.hidden @ dW2.T + db2 + hidden_delta @ source.w2.T
    return np.tensordot(source, delta_w, axes=([2], [0]))


def select_timestep(f_series: dict, Y: np.ndarray):
    """argmin over the grid of (1/(N d2)) ||f(t) - Y||_F^2, ties to the
    smaller t; returns (t_star, loss_curve)."""
    if not f_series:
        raise ValueError("empty prediction series")
    losses = {t: float(np.mean((f_series[t] - Y) ** 2)) for t in f_series}
    t_star = None
    best = np.inf
    for t in sorted(losses):
        if losses[t] < best:
            best = losses[t]
            t_star = t
    return t_star, losses


@dataclass
class EvolutionResult:
    f_series: dict        # t -> (N, d2) predictions
    residual_sums: dict   # t -> (N, d2) accumulated R(t)
    losses: dict          # t -> scalar residual mse
    chosen_t: int
    new_weights: np.ndarray


def evolve_weights(source, Y: np.ndarray, f0: np.ndarray, w_base: np.ndarray,
                   eta: float, t_grid) -> EvolutionResult:
    """Full per-client evolution: kernel, dynamics over the timestep grid,
    lowest-loss selection, and weight recovery at the chosen t.

    `source` is a dense (N, d2, d) stack or JacobianFeatures.
    """
    t_grid = list(t_grid)
    if not t_grid:
        raise ValueError("empty timestep grid")
    factored = isinstance(source, JacobianFeatures)
    n_rows = len(source) if factored else source.shape[0]
    H = gram_from_features(source) if factored else gram(source)
    eig = eigenbasis(H)
    f_series = evolve_residuals(eig, Y, f0, eta, t_grid, n_rows)
    t_star, losses = select_timestep(f_series, Y)
    residual_sums = {t: closed_form_residuals(eig, Y, f0, eta, t, n_rows)
                     for t in t_grid}
    R = residual_sums[t_star]
    if factored:
        new_w = recover_weights_from_features(source, R, w_base)
    else:
        new_w = recover_weights(source, R, w_base)
    if not np.all(np.isfinite(new_w)):
        raise NumericalError("evolved weights contain non-finite entries")
    return EvolutionResult(f_series, residual_sums, losses, t_star, new_w)
