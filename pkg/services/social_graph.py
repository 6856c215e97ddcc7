from typing import Iterable, List, Set, Tuple

import numpy as np

from schemas.dataset import InteractionDataset
from utils.errors import DataError
from utils.logger import logger


class SocialGraph:
    """
    Undirected user-user relations over dense user indices.
    """

    def __init__(self, num_users: int, edges: Iterable[Tuple[int, int]] = ()):
        self.num_users = num_users
        self._adjacency: List[Set[int]] = [set() for _ in range(num_users)]
        for u, v in edges:
            self.add_edge(u, v)

    def add_edge(self, u: int, v: int) -> None:
        if u == v:
            raise ValueError(f"Self-loop on user {u}")
        if not (0 <= u < self.num_users and 0 <= v < self.num_users):
            raise ValueError(f"Edge ({u}, {v}) references an unknown user")
        self._adjacency[u].add(v)
        self._adjacency[v].add(u)

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return sorted((u, v) for u in range(self.num_users) for v in self._adjacency[u] if u < v)

    @property
    def num_edges(self) -> int:
        return sum(len(n) for n in self._adjacency) // 2

    def neighbors(self, u: int) -> Set[int]:
        return self._adjacency[u]

    def has_edge(self, u: int, v: int) -> bool:
        return v in self._adjacency[u]

    def degree(self, u: int) -> int:
        return len(self._adjacency[u])

    def two_hop_neighbors(self, u: int) -> Set[int]:
        """Users within graph distance 2 of u, u itself excluded."""
        reach = set(self._adjacency[u])
        for v in self._adjacency[u]:
            reach |= self._adjacency[v]
        reach.discard(u)
        return reach


def two_hop_neighbors(g: SocialGraph, u: int) -> Set[int]:
    return g.two_hop_neighbors(u)


def build_graph(raw_edges: Iterable[Tuple[str, str]], ds: InteractionDataset) -> SocialGraph:
    """
    Maps raw-id edges onto the dataset's user indices; edges touching users the
    dataset does not contain are dropped.
    """
    index = ds.user_index()
    graph = SocialGraph(ds.num_users)
    dropped = 0
    for a, b in raw_edges:
        u, v = index.get(a), index.get(b)
        if u is None or v is None or u == v:
            dropped += 1
            continue
        graph.add_edge(u, v)
    logger.info(f"Social graph: {graph.num_edges} edges kept, {dropped} dropped (unknown users)")
    return graph


def split_edges(graph: SocialGraph, holdout_fraction: float, seed: int) -> Tuple[SocialGraph, List[Tuple[int, int]]]:
    """
    Holds out a fraction of edges for relation-detection evaluation.
    Returns the graph of the remaining edges and the held-out edge list.
    """
    edges = graph.edges
    if not edges:
        return SocialGraph(graph.num_users), []
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(edges))
    n_holdout = int(round(holdout_fraction * len(edges)))
    held = sorted(edges[i] for i in order[:n_holdout])
    kept = [edges[i] for i in order[n_holdout:]]
    if n_holdout and not kept:
        raise DataError("Edge holdout leaves no edges for pre-training")
    return SocialGraph(graph.num_users, kept), held
