"""Per-round communication graphs: random regular, ring, Erdos-Renyi."""

from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .errors import InfeasibleDegree


@dataclass
class Topology:
    """Undirected simple graph over clients 0..M-1."""

    num_clients: int
    edges: set          # unordered pairs stored as (i, j) with i < j
    kind: str = "custom"
    _adjacency: list = field(init=False, repr=False)

    def __post_init__(self):
        adj = [[] for _ in range(self.num_clients)]
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self-loop at node {i}")
            if not (0 <= i < self.num_clients and 0 <= j < self.num_clients):
                raise ValueError(f"edge ({i},{j}) outside 0..{self.num_clients - 1}")
            adj[i].append(j)
            adj[j].append(i)
        self._adjacency = [sorted(n) for n in adj]

    def neighbors(self, i: int) -> list:
        if not 0 <= i < self.num_clients:
            raise IndexError(f"client {i} out of range")
        return self._adjacency[i]

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))

    def edge_list_text(self) -> str:
        """One 'i j' pair per line, sorted, for debugging dumps."""
        return "".join(f"{i} {j}\n" for i, j in sorted(self.edges))


def ring(num_clients: int) -> Topology:
    if num_clients < 3:
        raise ValueError("ring needs at least 3 clients")
    edges = {(i, (i + 1) % num_clients) for i in range(num_clients - 1)}
    edges.add((0, num_clients - 1))
    return Topology(num_clients, edges, "ring")


def complete(num_clients: int) -> Topology:
    edges = {(i, j) for i in range(num_clients) for j in range(i + 1, num_clients)}
    return Topology(num_clients, edges, "complete")


def empty(num_clients: int) -> Topology:
    return Topology(num_clients, set(), "empty")


def random_regular(num_clients: int, kappa: int, seed: int,
                   max_restarts: int = 200_000) -> Topology:
    """Exact kappa-regular simple graph via the pairing model.

    Stubs are shuffled and paired; any self-loop or duplicate edge
    rejects the whole attempt. Adequate for kappa <= ~6 at M <= 1000;
    denser degrees make rejection astronomically unlikely to succeed.
    """
    if not 0 < kappa < num_clients:
        raise InfeasibleDegree(f"need 0 < kappa < M, got kappa={kappa}, M={num_clients}")
    if (num_clients * kappa) % 2:
        raise InfeasibleDegree(f"M*kappa must be even, got {num_clients}*{kappa}")
    rng = seeding.stream(seed, seeding.TOPOLOGY)
    stubs = np.repeat(np.arange(num_clients), kappa)
    for _ in range(max_restarts):
        perm = rng.permutation(stubs)
        a, b = perm[0::2], perm[1::2]
        if np.any(a == b):
            continue
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        keys = lo.astype(np.int64) * num_clients + hi
        if np.unique(keys).size != keys.size:
            continue
        edges = set(zip(lo.tolist(), hi.tolist()))
        return Topology(num_clients, edges, f"regular({kappa})")
    raise RuntimeError(f"pairing model failed after {max_restarts} restarts "
                       f"(M={num_clients}, kappa={kappa})")


def erdos_renyi(num_clients: int, mean_degree: float, seed: int) -> Topology:
    """G(M, p) with p = mean_degree / (M-1); isolated nodes permitted."""
    if not 0 < mean_degree < num_clients - 1:
        raise ValueError(f"need 0 < mean_degree < M-1, got {mean_degree}")
    p = mean_degree / (num_clients - 1)
    rng = seeding.stream(seed, seeding.TOPOLOGY)
    iu, ju = np.triu_indices(num_clients, k=1)
    mask = rng.random(iu.size) < p
    edges = set(zip(iu[mask].tolist(), ju[mask].tolist()))
    return Topology(num_clients, edges, f"erdos_renyi({mean_degree})")


def round_seed(run_seed: int, round_index: int) -> int:
    """Documented per-round derivation: hash (run_seed, TOPOLOGY, round)
    through SeedSequence; round_index 0 is the static graph's seed."""
    ss = np.random.SeedSequence([run_seed, seeding.TOPOLOGY, round_index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def for_round(kind: str, num_clients: int, param, run_seed: int,
              round_index: int, dynamic: bool) -> Topology:
    """Generate the graph used at `round_index` (1-based; 0 = static)."""
    k = round_index if dynamic else 0
    seed = round_seed(run_seed, k)
    if kind == "regular":
        return random_regular(num_clients, int(param), seed)
    if kind == "ring":
        return ring(num_clients)
    if kind == "erdos_renyi":
        return erdos_renyi(num_clients, float(param), seed)
    raise ValueError(f"unknown topology kind: {kind!r}")
