from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from schemas.dataset import AttributeSchema, AttributeTable, InteractionDataset, LeaveOneOutSplit, RawRecord
from schemas.report import DatasetStatistics
from utils.errors import DataError
from utils.logger import logger
from utils.settings import NUM_SPECIAL_TOKENS


def user_rng(seed: int, user: int) -> np.random.Generator:
    """
    Generator for one user derived from the master seed, so per-user work
    gives the same draws whatever order or thread it runs in.
    """
    return np.random.default_rng([int(seed), int(user)])


def apply_cutoff(records: List[RawRecord], cutoff: int) -> List[RawRecord]:
    """Drops records dated before `cutoff` (epoch seconds)."""
    kept = [r for r in records if r.timestamp >= cutoff]
    logger.info(f"Cutoff {cutoff}: dropped {len(records) - len(kept)} of {len(records)} records")
    if not kept:
        raise DataError(f"No records left after cutoff {cutoff}")
    return kept


def kcore_filter(records: List[RawRecord], k: int) -> List[RawRecord]:
    """
    Iteratively removes users and items with fewer than k records until both
    constraints hold at once. Input order of the surviving records is kept.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    frame = pd.DataFrame({
        "user": [r.user_id for r in records],
        "item": [r.item_id for r in records],
    })
    passes = 0
    while True:
        passes += 1
        before = len(frame)
        item_counts = frame["item"].value_counts()
        frame = frame[frame["item"].isin(item_counts[item_counts >= k].index)]
        user_counts = frame["user"].value_counts()
        frame = frame[frame["user"].isin(user_counts[user_counts >= k].index)]
        if len(frame) == before:
            break

    if frame.empty:
        logger.error(f"k-core filter with k={k} removed every record")
        raise DataError(f"Dataset too sparse for {k}-core filtering: no records left")
    logger.info(f"k-core filter (k={k}): {len(records)} -> {len(frame)} records after {passes} passes")
    return [records[i] for i in frame.index]


def training_sequence(seq: Sequence[int]) -> List[int]:
    """Items usable for training: sequences long enough for leave-one-out lose their last two."""
    return list(seq[:-2]) if len(seq) >= 3 else list(seq)


def _training_popularity(sequences: List[List[int]], vocab_size: int) -> List[int]:
    counts = np.zeros(vocab_size, dtype=np.int64)
    for seq in sequences:
        np.add.at(counts, np.asarray(training_sequence(seq), dtype=np.int64), 1)
    return counts.tolist()


def build_dataset(records: List[RawRecord], cutoff: Optional[int] = None) -> InteractionDataset:
    """
    Groups records by user and sorts each group by timestamp (stable, so ties keep
    input order). Vocabularies follow first occurrence after the special indices.
    """
    if not records:
        raise DataError("Cannot build a dataset from zero records")
    if cutoff is not None:
        records = apply_cutoff(records, cutoff)

    user_vocab: Dict[str, int] = {}
    item_vocab: Dict[str, int] = {}
    grouped: List[List[Tuple[int, int]]] = []
    for r in records:
        if r.user_id not in user_vocab:
            user_vocab[r.user_id] = len(user_vocab)
            grouped.append([])
        if r.item_id not in item_vocab:
            item_vocab[r.item_id] = len(item_vocab) + NUM_SPECIAL_TOKENS
        grouped[user_vocab[r.user_id]].append((r.timestamp, item_vocab[r.item_id]))

    sequences = [[item for _, item in sorted(group, key=lambda pair: pair[0])] for group in grouped]
    vocab_size = len(item_vocab) + NUM_SPECIAL_TOKENS
    dataset = InteractionDataset(
        user_vocab=list(user_vocab),
        item_vocab=list(item_vocab),
        sequences=sequences,
        popularity=_training_popularity(sequences, vocab_size),
    )
    logger.info(f"Built dataset: {dataset.num_users} users, {dataset.num_items} items, {dataset.num_interactions} interactions")
    return dataset


def split_leave_one_out(ds: InteractionDataset) -> LeaveOneOutSplit:
    """
    Last item is the test target, the one before it the validation target.
    """
    users, prefixes, valid, test, excluded = [], [], [], [], []
    for u, seq in enumerate(ds.sequences):
        if len(seq) < 3:
            excluded.append(u)
            continue
        users.append(u)
        prefixes.append(list(seq[:-2]))
        valid.append(seq[-2])
        test.append(seq[-1])
    if excluded:
        logger.warning(f"{len(excluded)} users have fewer than 3 interactions and are excluded from evaluation")
    return LeaveOneOutSplit(users=users, prefixes=prefixes, valid=valid, test=test, excluded=excluded)


def sample_eval_negatives(
    target: int,
    popularity: Sequence[int],
    n: int,
    user_history: Iterable[int],
    rng: np.random.Generator,
) -> List[int]:
    """
    Draws n distinct items without replacement, proportionally to popularity,
    never the target and never an item from the user's history.
    """
    weights = np.asarray(popularity, dtype=np.float64).copy()
    weights[:NUM_SPECIAL_TOKENS] = 0.0
    weights[target] = 0.0
    history = np.fromiter(user_history, dtype=np.int64)
    if history.size:
        weights[history] = 0.0
    eligible = int(np.count_nonzero(weights))
    if eligible < n:
        raise DataError(f"Only {eligible} eligible negative items, {n} requested")
    picked = rng.choice(len(weights), size=n, replace=False, p=weights / weights.sum())
    return picked.tolist()


def split_users(ds: InteractionDataset, holdout_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """Partitions users into the pre-training portion and the held-out portion."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(ds.num_users)
    n_holdout = int(round(holdout_fraction * ds.num_users))
    holdout = sorted(order[:n_holdout].tolist())
    train = sorted(order[n_holdout:].tolist())
    return train, holdout


def align_attributes(raw: Dict[str, Dict[str, object]], schema: AttributeSchema, ds: InteractionDataset) -> AttributeTable:
    """
    Lays raw per-user attribute values out along the dataset's user vocabulary.
    Users without a value get the missing marker.
    """
    table = AttributeTable.empty(ds.num_users, schema)
    for u, user_id in enumerate(ds.user_vocab):
        values = raw.get(user_id)
        if not values:
            continue
        for j, name in enumerate(schema.numeric_names):
            if values.get(name) is not None:
                table.numeric[u, j] = float(values[name])
        for j, name in enumerate(schema.discrete_names):
            if values.get(name) is not None:
                table.discrete[u, j] = int(values[name])
    table.validate(schema)
    return table


def standardize(
    table: AttributeTable,
    schema: AttributeSchema,
    users: Optional[Sequence[int]] = None,
    constants: Optional[Dict[str, Tuple[float, float]]] = None,
) -> Tuple[AttributeTable, Dict[str, Tuple[float, float]]]:
    """
    z-scores numeric attributes. Constants are fitted on `users` (all users when None)
    unless given, and returned so they can be stored with a checkpoint.
    """
    rows = np.arange(table.num_users) if users is None else np.asarray(users, dtype=np.int64)
    if constants is None:
        constants = {}
        for j, name in enumerate(schema.numeric_names):
            column = table.numeric[rows, j]
            column = column[~np.isnan(column)]
            mean = float(column.mean()) if column.size else 0.0
            std = float(column.std()) if column.size else 1.0
            constants[name] = (mean, std if std > 0 else 1.0)
    numeric = table.numeric.copy()
    for j, name in enumerate(schema.numeric_names):
        mean, std = constants[name]
        numeric[:, j] = (numeric[:, j] - mean) / std
    return AttributeTable(numeric, table.discrete.copy()), constants


def numeric_ranges(table: AttributeTable) -> np.ndarray:
    """Observed max - min of every numeric attribute (0 when unobserved)."""
    ranges = np.zeros(table.numeric.shape[1])
    for j in range(table.numeric.shape[1]):
        column = table.numeric[:, j]
        column = column[~np.isnan(column)]
        if column.size:
            ranges[j] = float(column.max() - column.min())
    return ranges


def dataset_statistics(ds: InteractionDataset, num_edges: int) -> DatasetStatistics:
    return DatasetStatistics(
        users=ds.num_users,
        items=ds.num_items,
        rels=num_edges,
        interactions=ds.num_interactions,
        avg_sequence_length=round(ds.num_interactions / max(ds.num_users, 1), 2),
    )
