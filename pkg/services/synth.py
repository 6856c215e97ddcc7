"""
Planted-structure synthetic data: users belong to latent clusters that drive
their item sequences, their friendships and their attributes at once.
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from schemas.config import SynthConfig
from schemas.dataset import AttributeSchema, AttributeTable, InteractionDataset, RawRecord
from services.social_graph import SocialGraph
from utils.errors import ConfigError
from utils.logger import logger
from utils.preprocessing import build_dataset, kcore_filter, user_rng

SEGMENT = "segment"
SCORE = "score"
BASE_TIMESTAMP = 1_600_000_000


@dataclass
class SynthResult:
    records: List[RawRecord]
    dataset: InteractionDataset
    graph: SocialGraph
    attributes: AttributeTable
    schema: AttributeSchema
    labels: np.ndarray
    # per vocabulary index: planted cluster of the item (-1 for special tokens)
    item_cluster: np.ndarray
    # transition[a, b]: planted probability of item b following item a, vocabulary indices
    transition: np.ndarray

    def write_labels(self, path: Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps({
            "user_clusters": self.labels.tolist(),
            "item_clusters": self.item_cluster.tolist(),
        }))
        return path


def _check_feasible(cfg: SynthConfig) -> int:
    block = cfg.n_items // cfg.n_clusters
    longest = cfg.seq_len_range[1]
    if longest > cfg.n_items:
        raise ConfigError(f"Sequences of up to {longest} distinct items cannot be drawn from {cfg.n_items} items")
    if cfg.n_clusters > 1 and cfg.n_users < 2 * cfg.n_clusters and cfg.friends_per_user > 0:
        logger.warning("Fewer than two users per cluster on average; some users will have no intra-cluster friend")
    if longest > block:
        logger.warning(f"Sequences of up to {longest} items exceed the {block}-item cluster block; long sequences spill outside it")
    return block


def _draw_sequence(
    cluster: int,
    length: int,
    block: int,
    n_items: int,
    transitions: np.ndarray,
    intra_prob: float,
    rng: np.random.Generator,
) -> List[int]:
    """Raw item ids without repeats: in-block Markov steps mixed with uniform out-of-block noise."""
    low = cluster * block
    used = np.zeros(n_items, dtype=bool)
    in_block = np.zeros(n_items, dtype=bool)
    in_block[low:low + block] = True
    items: List[int] = []
    for _ in range(length):
        inside = rng.random() < intra_prob
        if not ((in_block if inside else ~in_block) & ~used).any():
            inside = not inside
        available = (in_block if inside else ~in_block) & ~used
        weights = available.astype(np.float64)
        if inside and items and in_block[items[-1]]:
            row = np.zeros(n_items)
            row[low:low + block] = transitions[cluster][items[-1] - low]
            row *= available
            if row.sum() > 0:
                weights = row
        choice = int(rng.choice(n_items, p=weights / weights.sum()))
        used[choice] = True
        items.append(choice)
    return items


def _draw_edges(labels: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> List[tuple]:
    members = [np.flatnonzero(labels == c) for c in range(cfg.n_clusters)]
    edges = set()
    for u, c in enumerate(labels):
        for _ in range(cfg.friends_per_user):
            intra = rng.random() < cfg.friend_intra_prob
            pool = members[c] if intra else np.flatnonzero(labels != c)
            pool = pool[pool != u]
            if len(pool) == 0:
                continue
            v = int(rng.choice(pool))
            edges.add((min(u, v), max(u, v)))
    return sorted(edges)


def generate(cfg: SynthConfig) -> SynthResult:
    """
    Deterministic per seed. Global structure (clusters, transitions, edges) comes
    from one generator; each user's sequence and attributes from its own.
    Records are k-core filtered before indexing; relations of dropped users go too.
    """
    block = _check_feasible(cfg)
    rng = np.random.default_rng(cfg.seed)
    labels = rng.integers(cfg.n_clusters, size=cfg.n_users)
    transitions = rng.dirichlet(np.full(block, cfg.transition_concentration), size=(cfg.n_clusters, block))

    records: List[RawRecord] = []
    segments = np.empty(cfg.n_users, dtype=np.int64)
    scores = np.empty(cfg.n_users, dtype=np.float64)
    low_len, high_len = cfg.seq_len_range
    spread = max(cfg.n_clusters - 1, 1)
    for u in range(cfg.n_users):
        c = int(labels[u])
        urng = user_rng(cfg.seed, u)
        length = int(urng.integers(low_len, high_len + 1))
        for t, item in enumerate(_draw_sequence(c, length, block, cfg.n_items, transitions, cfg.intra_cluster_item_prob, urng)):
            records.append(RawRecord(user_id=f"u{u}", item_id=f"i{item}", timestamp=BASE_TIMESTAMP + t))
        segments[u] = int(urng.integers(cfg.n_clusters)) if urng.random() < cfg.attribute_noise else c
        mean = 1.0 + 4.0 * c / spread if cfg.n_clusters > 1 else 3.0
        scores[u] = mean + urng.normal(0.0, cfg.attribute_noise * 4.0)

    if cfg.kcore > 1:
        records = kcore_filter(records, cfg.kcore)
    ds = build_dataset(records)
    user_index = ds.user_index()
    order = np.asarray([int(user_id[1:]) for user_id in ds.user_vocab], dtype=np.int64)
    raw_edges = _draw_edges(labels, cfg, rng)
    graph = SocialGraph(ds.num_users, [
        (user_index[f"u{a}"], user_index[f"u{b}"])
        for a, b in raw_edges
        if f"u{a}" in user_index and f"u{b}" in user_index
    ])

    schema = AttributeSchema(
        numeric_names=[SCORE],
        discrete_names=[SEGMENT],
        discrete_cardinalities=[max(cfg.n_clusters, 2)],
    )
    attributes = AttributeTable(scores[order], segments[order])

    item_cluster = np.full(ds.vocab_size, -1, dtype=np.int64)
    raw_items = np.full(ds.vocab_size, -1, dtype=np.int64)
    for raw_id, vocab_index in ds.item_index().items():
        raw_items[vocab_index] = int(raw_id[1:])
        item_cluster[vocab_index] = raw_items[vocab_index] // block
    transition = np.zeros((ds.vocab_size, ds.vocab_size))
    for c in range(cfg.n_clusters):
        members = np.flatnonzero(item_cluster == c)
        offsets = raw_items[members] - c * block
        transition[np.ix_(members, members)] = transitions[c][np.ix_(offsets, offsets)]

    logger.info(
        f"Synthetic data: {ds.num_users} users, {ds.num_items} items, {graph.num_edges} relations, "
        f"{ds.num_interactions} interactions in {cfg.n_clusters} clusters"
    )
    return SynthResult(
        records=records,
        dataset=ds,
        graph=graph,
        attributes=attributes,
        schema=schema,
        labels=labels[order],
        item_cluster=item_cluster,
        transition=transition,
    )


def intra_cluster_fraction(result: SynthResult) -> float:
    """Share of interactions whose item lies in the user's own cluster block."""
    hits = total = 0
    for u, seq in enumerate(result.dataset.sequences):
        clusters = result.item_cluster[np.asarray(seq)]
        hits += int(np.count_nonzero(clusters == result.labels[u]))
        total += len(seq)
    return hits / total


def cluster_oracle_scorer(result: SynthResult):
    """
    Scores a candidate 1 when it lies in the user's planted block, plus its planted
    transition probability from the last in-block item of the prefix.
    """
    def score(users: Sequence[int], prefixes: Sequence[Sequence[int]], candidates: np.ndarray) -> np.ndarray:
        rows = []
        for u, prefix, cands in zip(users, prefixes, candidates):
            cluster = result.labels[u]
            row = (result.item_cluster[cands] == cluster).astype(np.float64)
            anchor = next((i for i in reversed(prefix) if result.item_cluster[i] == cluster), None)
            if anchor is not None:
                row += result.transition[anchor, cands]
            rows.append(row)
        return np.stack(rows)
    return score
