"""
Ranking metrics and the evaluation protocols: next-item recommendation over
sampled candidates, social relation detection and user profile prediction.
"""
import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from schemas.dataset import AttributeSchema, AttributeTable, InteractionDataset, LeaveOneOutSplit
from schemas.report import MetricsReport, ProfileReport, SrdReport
from services.objectives import (
    UPRecModel,
    make_finetune_batch,
    pad_tokens,
    profile_repr,
    srd_similarity,
    user_repr,
    wrap,
)
from services.social_graph import SocialGraph
from utils.errors import DataError
from utils.logger import logger
from utils.preprocessing import sample_eval_negatives, training_sequence, user_rng
from utils.settings import SHOW_PROGRESS

# (users, prefixes, candidates) -> scores, one row per user and one column per candidate
Scorer = Callable[[Sequence[int], Sequence[Sequence[int]], np.ndarray], np.ndarray]

EVAL_BATCH_SIZE = 256
LENGTH_GROUPS = (("small", 0, 8), ("medium", 8, 15), ("large", 15, None))


def rank_of_target(target_score: float, negative_scores: Sequence[float]) -> int:
    """1-based rank of the ground truth; a negative with an equal score ranks above it."""
    return 1 + int(np.count_nonzero(np.asarray(negative_scores) >= target_score))


@dataclass
class RankedTrial:
    """Scores of one ground truth (position 0) followed by its negatives."""
    scores: np.ndarray

    @property
    def rank(self) -> int:
        return rank_of_target(self.scores[0], self.scores[1:])


def rank_metrics(trials: Sequence[Union[RankedTrial, int]]) -> MetricsReport:
    """HR@{1,5,10}, NDCG@{5,10} and MRR over trials (or plain ranks)."""
    if len(trials) == 0:
        raise ValueError("Cannot compute ranking metrics over zero trials")
    ranks = np.asarray([t.rank if isinstance(t, RankedTrial) else int(t) for t in trials], dtype=np.float64)
    if np.any(ranks < 1):
        raise ValueError("Ranks are 1-based")

    def hr(k: int) -> float:
        return float(np.mean(ranks <= k))

    def ndcg(k: int) -> float:
        return float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)))

    return MetricsReport(
        hr_1=hr(1),
        hr_5=hr(5),
        hr_10=hr(10),
        ndcg_5=ndcg(5),
        ndcg_10=ndcg(10),
        mrr=float(np.mean(1.0 / ranks)),
        n_trials=len(ranks),
    )


class ModelScorer:
    """Scores candidates with the MASK-position logits of `prefix + [MASK]`."""

    def __init__(self, model: UPRecModel, max_len: int, batch_size: int = EVAL_BATCH_SIZE):
        self.model = model
        self.max_len = max_len
        self.batch_size = batch_size

    @torch.no_grad()
    def __call__(self, users, prefixes, candidates: np.ndarray) -> np.ndarray:
        self.model.eval()
        rows = []
        for start in range(0, len(prefixes), self.batch_size):
            batch = make_finetune_batch(prefixes[start:start + self.batch_size], None, self.max_len)
            hidden = self.model(batch.input_ids, batch.attention_mask)
            logits = self.model.item_logits(hidden[batch.masked_positions])
            index = torch.as_tensor(candidates[start:start + self.batch_size], dtype=torch.long)
            rows.append(torch.gather(logits, 1, index).double().numpy())
        return np.concatenate(rows)


def random_scorer(seed: int) -> Scorer:
    def score(users, prefixes, candidates):
        return np.stack([user_rng(seed + 1, u).random(candidates.shape[1]) for u in users])
    return score


def popularity_scorer(popularity: Sequence[int]) -> Scorer:
    counts = np.asarray(popularity, dtype=np.float64)

    def score(users, prefixes, candidates):
        return counts[candidates]
    return score


def _as_scorer(model_or_scorer, max_len: Optional[int]) -> Scorer:
    if isinstance(model_or_scorer, UPRecModel):
        return ModelScorer(model_or_scorer, max_len or model_or_scorer.cfg.max_len)
    if hasattr(model_or_scorer, "build_model"):
        checkpoint = model_or_scorer
        return ModelScorer(checkpoint.build_model(), checkpoint.encoder_config.max_len)
    return model_or_scorer


def seqrec_ranks(
    scorer,
    split: LeaveOneOutSplit,
    ds: InteractionDataset,
    target: Literal["test", "valid"] = "test",
    n_neg: int = 99,
    seed: int = 0,
    max_len: Optional[int] = None,
) -> Tuple[List[int], List[int]]:
    """
    Rank of each evaluated user's target among itself and n_neg popularity-sampled
    negatives. Returns (users, ranks) in split order.
    """
    scorer = _as_scorer(scorer, max_len)
    if not split.users:
        raise DataError("No user has enough interactions for leave-one-out evaluation")

    users, ranks = [], []
    positions = range(len(split.users))
    for start in tqdm(range(0, len(positions), EVAL_BATCH_SIZE), desc=f"eval {target}", disable=not SHOW_PROGRESS, leave=False):
        batch_users, prefixes, candidates = [], [], []
        for i in positions[start:start + EVAL_BATCH_SIZE]:
            u = split.users[i]
            goal = split.test[i] if target == "test" else split.valid[i]
            prefix = split.test_prefix(i) if target == "test" else split.prefixes[i]
            negatives = sample_eval_negatives(goal, ds.popularity, n_neg, ds.sequences[u], user_rng(seed, u))
            batch_users.append(u)
            prefixes.append(prefix)
            candidates.append([goal] + negatives)
        scores = np.asarray(scorer(batch_users, prefixes, np.asarray(candidates, dtype=np.int64)))
        for u, row in zip(batch_users, scores):
            users.append(u)
            ranks.append(rank_of_target(row[0], row[1:]))
    return users, ranks


def eval_seqrec(
    scorer,
    split: LeaveOneOutSplit,
    ds: InteractionDataset,
    target: Literal["test", "valid"] = "test",
    n_neg: int = 99,
    seed: int = 0,
    max_len: Optional[int] = None,
) -> MetricsReport:
    """
    Leave-one-out next-item evaluation. The test target is scored from the prefix
    that includes the valid item; the valid target from the training prefix.
    `scorer` may be a checkpoint, a model or any Scorer callable.
    """
    _, ranks = seqrec_ranks(scorer, split, ds, target, n_neg, seed, max_len)
    report = rank_metrics(ranks)
    logger.info(f"Seqrec ({target}, {report.n_trials} users): HR@10 {report.hr_10:.4f}, NDCG@10 {report.ndcg_10:.4f}, MRR {report.mrr:.4f}")
    return report


def length_group(length: int) -> str:
    for name, low, high in LENGTH_GROUPS:
        if length >= low and (high is None or length < high):
            return name
    raise ValueError(f"Invalid sequence length {length}")


def eval_seqrec_by_length(
    scorer,
    split: LeaveOneOutSplit,
    ds: InteractionDataset,
    target: Literal["test", "valid"] = "test",
    n_neg: int = 99,
    seed: int = 0,
    max_len: Optional[int] = None,
) -> Dict[str, MetricsReport]:
    """Metrics per sequence-length group (small < 8, medium 8-14, large >= 15) plus "all"."""
    users, ranks = seqrec_ranks(scorer, split, ds, target, n_neg, seed, max_len)
    grouped: Dict[str, List[int]] = {}
    for u, rank in zip(users, ranks):
        grouped.setdefault(length_group(len(ds.sequences[u])), []).append(rank)
    reports = {name: rank_metrics(grouped[name]) for name, _, _ in LENGTH_GROUPS if name in grouped}
    reports["all"] = rank_metrics(ranks)
    return reports


# (query, candidates) -> similarity of the query to each candidate
UserSimilarity = Callable[[int, np.ndarray], np.ndarray]


class ModelSimilarity:
    """Learned weighted-L2 similarity between max-pooled user representations."""

    def __init__(self, model: UPRecModel, sequences: Sequence[Sequence[int]], max_len: int, batch_size: int = EVAL_BATCH_SIZE):
        model.eval()
        reprs = []
        with torch.no_grad():
            for start in range(0, len(sequences), batch_size):
                input_ids, attention_mask = pad_tokens([wrap(s, max_len) for s in sequences[start:start + batch_size]])
                reprs.append(user_repr(model(input_ids, attention_mask), attention_mask))
            self.reprs = torch.cat(reprs)
        self.head = model.srd_head

    @torch.no_grad()
    def __call__(self, query: int, candidates: np.ndarray) -> np.ndarray:
        index = torch.as_tensor(candidates, dtype=torch.long)
        return srd_similarity(self.reprs[query][None, :], self.reprs[index], self.head).double().numpy()


def overlap_similarity(sequences: Sequence[Sequence[int]]) -> UserSimilarity:
    """Number of distinct items two users share."""
    item_sets = [set(s) for s in sequences]

    def score(query, candidates):
        return np.asarray([len(item_sets[query] & item_sets[c]) for c in candidates], dtype=np.float64)
    return score


def sim_baseline(query_seq: Sequence[int], candidate_seqs: Sequence[Sequence[int]]) -> int:
    """Candidate sharing the most distinct items with the query; the lowest index wins ties."""
    if len(candidate_seqs) == 0:
        raise ValueError("sim_baseline needs at least one candidate")
    query = set(query_seq)
    overlaps = [len(query & set(c)) for c in candidate_seqs]
    return int(np.argmax(overlaps))


def sample_user_negatives(
    query: int,
    positive: int,
    num_users: int,
    full_graph: SocialGraph,
    n: int,
    rng: np.random.Generator,
    weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """n distinct users that are neither the query, the positive nor a friend of the query."""
    eligible = np.ones(num_users, dtype=bool)
    eligible[[query, positive]] = False
    friends = list(full_graph.neighbors(query))
    if friends:
        eligible[friends] = False
    pool = np.flatnonzero(eligible)
    if len(pool) < n:
        raise DataError(f"Only {len(pool)} eligible negative users for query {query}, {n} requested")
    p = None
    if weights is not None:
        p = weights[pool] / weights[pool].sum()
    return rng.choice(pool, size=n, replace=False, p=p)


def _srd_trials(eval_edges: Sequence[Tuple[int, int]]) -> List[Tuple[int, int]]:
    # every held-out edge is evaluated in both directions
    return [pair for u, v in eval_edges for pair in ((u, v), (v, u))]


def eval_srd(
    similarity,
    eval_edges: Sequence[Tuple[int, int]],
    ds: InteractionDataset,
    full_graph: SocialGraph,
    pretrain_graph: Optional[SocialGraph] = None,
    n_neg: int = 99,
    seed: int = 0,
    sampling: Literal["uniform", "activity"] = "uniform",
) -> SrdReport:
    """
    For each held-out relation, the query must rank its friend strictly above
    n_neg sampled non-friends; ties count as misses. Queries without any
    pre-training relation are also scored separately.
    `similarity` may be a checkpoint, a model or a UserSimilarity callable.
    """
    sequences = [training_sequence(s) for s in ds.sequences]
    if isinstance(similarity, UPRecModel):
        similarity = ModelSimilarity(similarity, sequences, similarity.cfg.max_len)
    elif hasattr(similarity, "build_model"):
        similarity = ModelSimilarity(similarity.build_model(), sequences, similarity.encoder_config.max_len)
    trials = _srd_trials(eval_edges)
    if not trials:
        raise DataError("No held-out relations to evaluate")
    weights = np.asarray([len(s) for s in ds.sequences], dtype=np.float64) if sampling == "activity" else None

    correct, unseen_correct, unseen = 0, 0, 0
    for query, positive in tqdm(trials, desc="eval srd", disable=not SHOW_PROGRESS, leave=False):
        rng = np.random.default_rng([seed, query, positive])
        negatives = sample_user_negatives(query, positive, ds.num_users, full_graph, n_neg, rng, weights)
        scores = similarity(query, np.concatenate([[positive], negatives]))
        hit = bool(scores[0] > scores[1:].max())
        correct += hit
        if pretrain_graph is not None and pretrain_graph.degree(query) == 0:
            unseen += 1
            unseen_correct += hit

    report = SrdReport(
        accuracy=correct / len(trials),
        n_trials=len(trials),
        accuracy_unseen=unseen_correct / unseen if unseen else None,
        n_unseen=unseen,
    )
    logger.info(f"SRD accuracy {report.accuracy:.4f} over {report.n_trials} trials ({unseen} with unseen queries)")
    return report


def eval_sim_baseline(
    eval_edges: Sequence[Tuple[int, int]],
    ds: InteractionDataset,
    full_graph: SocialGraph,
    n_neg: int = 99,
    seed: int = 0,
    sampling: Literal["uniform", "activity"] = "uniform",
) -> SrdReport:
    """
    Item-overlap heuristic under the same candidate sets as eval_srd. Candidates
    are ordered negatives first, so the tie rule never favours the friend.
    """
    sequences = [training_sequence(s) for s in ds.sequences]
    trials = _srd_trials(eval_edges)
    if not trials:
        raise DataError("No held-out relations to evaluate")
    weights = np.asarray([len(s) for s in ds.sequences], dtype=np.float64) if sampling == "activity" else None
    correct = 0
    for query, positive in trials:
        rng = np.random.default_rng([seed, query, positive])
        negatives = sample_user_negatives(query, positive, ds.num_users, full_graph, n_neg, rng, weights)
        candidates = [sequences[c] for c in negatives] + [sequences[positive]]
        correct += sim_baseline(sequences[query], candidates) == len(candidates) - 1
    report = SrdReport(accuracy=correct / len(trials), n_trials=len(trials))
    logger.info(f"Sim baseline accuracy {report.accuracy:.4f} over {report.n_trials} trials")
    return report


def eval_profile(
    checkpoint,
    ds: InteractionDataset,
    attributes: AttributeTable,
    schema: AttributeSchema,
    task: str,
    users: Sequence[int],
) -> ProfileReport:
    """
    Accuracy of the predicted class for discrete tasks; MSE in standardized units
    (and de-standardized) for numeric ones. Users missing the attribute are skipped.
    """
    kind = schema.kind_of(task)
    model = checkpoint.build_model()
    head = checkpoint.build_profile_head()
    model.eval()
    head.eval()
    sequences = [training_sequence(s) for s in ds.sequences]
    max_len = checkpoint.encoder_config.max_len

    if kind == "discrete":
        truth = attributes.discrete[:, schema.discrete_names.index(task)]
        users = [u for u in users if truth[u] >= 0]
    else:
        truth = attributes.numeric[:, schema.numeric_names.index(task)]
        users = [u for u in users if not math.isnan(truth[u])]
    if not users:
        raise DataError(f"No evaluation user has a value for '{task}'")

    outputs = []
    with torch.no_grad():
        for start in range(0, len(users), EVAL_BATCH_SIZE):
            batch = users[start:start + EVAL_BATCH_SIZE]
            input_ids, attention_mask = pad_tokens([wrap(sequences[u], max_len) for u in batch])
            outputs.append(head(profile_repr(model(input_ids, attention_mask))))
    predictions = torch.cat(outputs).double().numpy()
    values = truth[users]

    if kind == "discrete":
        counts = Counter(values.tolist())
        report = ProfileReport(
            task=task,
            kind=kind,
            n_users=len(users),
            accuracy=float(np.mean(predictions.argmax(axis=-1) == values)),
            majority_baseline=counts.most_common(1)[0][1] / len(users),
        )
        logger.info(f"Profile '{task}': accuracy {report.accuracy:.4f} (majority {report.majority_baseline:.4f})")
    else:
        mean, std = checkpoint.standardization[task]
        z = (values - mean) / std
        mse = float(np.mean((predictions - z) ** 2))
        report = ProfileReport(
            task=task,
            kind=kind,
            n_users=len(users),
            mse=mse,
            mse_raw=mse * std ** 2,
            variance_baseline=float(np.var(z)),
        )
        logger.info(f"Profile '{task}': MSE {report.mse:.4f} (variance baseline {report.variance_baseline:.4f})")
    return report
