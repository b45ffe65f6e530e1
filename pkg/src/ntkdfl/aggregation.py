"""Final model averaging, validation-ordered client selection, and metrics."""

from dataclasses import dataclass

import numpy as np

from . import seeding
from .mlp import ModelDims, forward


def final_average(weights: list, sizes, subset) -> np.ndarray:
    """Sample-size-weighted mean over the chosen clients.

    Normalized by the subset's total sample count so the aggregate stays
    in the convex hull of the client models.
    """
    subset = list(subset)
    if not subset:
        raise ValueError("empty client subset")
    sizes = np.asarray(sizes, dtype=np.float64)
    total = sizes[subset].sum()
    if total <= 0:
        # all-empty clients: fall back to the unweighted mean
        return np.mean([weights[i] for i in subset], axis=0)
    out = np.zeros_like(weights[subset[0]])
    for i in subset:
        out += sizes[i] * weights[i]
    return out / total


def evaluate_accuracy(dims: ModelDims, w: np.ndarray, dataset) -> float:
    """Fraction of argmax-correct predictions; argmax ties resolve to the
    smallest class index."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    predicted = np.argmax(forward(dims, w, dataset.images), axis=1)
    return float(np.mean(predicted == dataset.labels))


def inter_model_variance(weights: list) -> float:
    """Average per-parameter dispersion: mean over coordinates of the
    client-wise deviation norm around the unweighted mean."""
    if len(weights) < 2:
        raise ValueError("variance needs at least two clients")
    stack = np.vstack(weights)
    deviations = stack - stack.mean(axis=0)
    return float(np.sqrt((deviations ** 2).sum(axis=0)).mean())


@dataclass
class SelectionOrder:
    criterion: str
    ordering: np.ndarray           # permutation of client indices
    val_accuracies: np.ndarray     # per client, in client order
    prefix_accuracies: np.ndarray  # holdout accuracy of each running average


def selection_order(dims: ModelDims, weights: list, sizes, val_set, holdout,
                    criterion: str, seed: int = 0) -> SelectionOrder:
    """Order clients by validation accuracy (or at random) and trace the
    holdout accuracy of the size-weighted running average per prefix."""
    if not weights:
        raise ValueError("no client models")
    val_acc = np.array([evaluate_accuracy(dims, w, val_set) for w in weights])
    if criterion == "high_to_low":
        ordering = np.argsort(-val_acc, kind="stable")
    elif criterion == "low_to_high":
        ordering = np.argsort(val_acc, kind="stable")
    elif criterion == "random":
        ordering = seeding.stream(seed, seeding.SELECTION).permutation(len(weights))
    else:
        raise ValueError(f"unknown selection criterion: {criterion!r}")
    sizes = np.asarray(sizes, dtype=np.float64)
    prefix = []
    running = np.zeros_like(weights[0])
    mass = 0.0
    count = 0
    for i in ordering:
        running = running + sizes[i] * weights[i]
        mass += sizes[i]
        count += 1
        if mass > 0:
            avg = running / mass
        else:
            avg = np.mean([weights[j] for j in ordering[:count]], axis=0)
        prefix.append(evaluate_accuracy(dims, avg, holdout))
    return SelectionOrder(criterion, ordering, val_acc, np.array(prefix))


def rounds_to_threshold(history, threshold: float):
    """First 1-based round whose accuracy reaches the threshold, else None.

    `history[k-1]` is the accuracy after round k (initialization rows are
    not part of the history).
    """
    for k, acc in enumerate(history, start=1):
        if acc >= threshold:
            return k
    return None
