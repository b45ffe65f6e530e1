"""Deterministic RNG stream derivation.

Every random choice in a run is drawn from a PCG64 generator seeded by
``SeedSequence([run_seed, tag, *context])``, where ``tag`` is one of the
stream constants below and ``context`` is e.g. a round or client index.
The derivation is the documented "hash(run_seed, k)" of the topology
contract: same keys, same stream, on every platform and worker count.
"""

import numpy as np

# Stream tags. Values are arbitrary but frozen: changing them changes
# every seeded artifact of every run.
INIT = 1
PARTITION = 2
TOPOLOGY = 3
VAL_SPLIT = 4
SGD = 5
SELECTION = 6
SUBSET = 7
CORPUS = 8


def stream(run_seed: int, tag: int, *context: int) -> np.random.Generator:
    """Return the generator for (run_seed, tag, *context)."""
    return np.random.default_rng(np.random.SeedSequence([run_seed, tag, *context]))
