"""
Pre-training heads and losses (mask item prediction, user attribute prediction,
social relation detection), the joint objective, and the fine-tuning inputs.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from schemas.config import EncoderConfig
from schemas.dataset import AttributeSchema, AttributeTable
from services.encoder import SequenceEncoder, init_weights
from services.social_graph import SocialGraph
from utils.logger import logger
from utils.settings import CLS, MASK, NUM_SPECIAL_TOKENS, PAD, SEP


@dataclass
class MaskedBatch:
    """
    Wrapped, right-padded token sequences with [MASK] substitutions.
    `labels` holds the original item at masked positions and PAD elsewhere.
    """
    input_ids: torch.Tensor
    attention_mask: torch.Tensor
    masked_positions: torch.Tensor
    labels: torch.Tensor

    @property
    def size(self) -> int:
        return self.input_ids.size(0)


@dataclass
class SrdBatch:
    """
    B (query, friend) pairs. negative_mask[j, i] is True when the friend of pair i
    may serve as a negative for query j; the diagonal is the positive and never True.
    """
    queries: torch.Tensor
    candidates: torch.Tensor
    negative_mask: torch.Tensor

    @property
    def size(self) -> int:
        return self.queries.size(0)


def wrap(items: Sequence[int], max_len: int) -> List[int]:
    """[CLS] + most recent (max_len - 2) items + [SEP]."""
    budget = max_len - 2
    items = list(items)[-budget:] if budget > 0 else []
    return [CLS] + items + [SEP]


def pad_tokens(sequences: Sequence[Sequence[int]]) -> Tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in sequences)
    input_ids = torch.full((len(sequences), width), PAD, dtype=torch.long)
    for row, tokens in enumerate(sequences):
        input_ids[row, :len(tokens)] = torch.as_tensor(tokens, dtype=torch.long)
    return input_ids, input_ids != PAD


def make_masked_batch(
    sequences: Sequence[Sequence[int]],
    p: float,
    rng: np.random.Generator,
    max_len: int,
) -> MaskedBatch:
    """
    Masks each item independently with probability p (at least one per sequence),
    then wraps with CLS/SEP. Long sequences keep their most recent items.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"Mask proportion must lie in (0, 1), got {p}")
    tokens, masked, labels = [], [], []
    for seq in sequences:
        if len(seq) == 0:
            raise ValueError("Cannot mask an empty sequence")
        items = np.asarray(list(seq)[-(max_len - 2):], dtype=np.int64)
        chosen = rng.random(len(items)) < p
        if not chosen.any():
            chosen[rng.integers(len(items))] = True
        inputs = np.where(chosen, MASK, items)
        tokens.append([CLS] + inputs.tolist() + [SEP])
        masked.append(chosen)
        labels.append(np.where(chosen, items, PAD))

    input_ids, attention_mask = pad_tokens(tokens)
    masked_positions = torch.zeros_like(input_ids, dtype=torch.bool)
    label_ids = torch.full_like(input_ids, PAD)
    for row, (chosen, label) in enumerate(zip(masked, labels)):
        masked_positions[row, 1:1 + len(chosen)] = torch.from_numpy(chosen)
        label_ids[row, 1:1 + len(label)] = torch.from_numpy(label)
    return MaskedBatch(input_ids, attention_mask, masked_positions, label_ids)


def make_finetune_batch(
    prefixes: Sequence[Sequence[int]],
    targets: Optional[Sequence[int]],
    max_len: int,
) -> MaskedBatch:
    """
    prefix + [MASK], wrapped with CLS/SEP; the MASK position is the only masked one.
    Prefixes longer than max_len - 3 keep their most recent items; at max_len 3 no item fits.
    """
    budget = max_len - 3
    tokens = []
    for prefix in prefixes:
        if len(prefix) == 0:
            raise ValueError("Fine-tuning needs a nonempty prefix")
        kept = list(prefix)[-budget:] if budget > 0 else []
        tokens.append([CLS] + kept + [MASK, SEP])
    input_ids, attention_mask = pad_tokens(tokens)
    masked_positions = input_ids == MASK
    labels = torch.full_like(input_ids, PAD)
    if targets is not None:
        labels[masked_positions] = torch.as_tensor(list(targets), dtype=torch.long)
    return MaskedBatch(input_ids, attention_mask, masked_positions, labels)


class MipHead(nn.Module):
    """
    Item scores over the whole vocabulary. Tied to the item embedding matrix by
    default (a free bias is always learned); special tokens always score -inf.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        self.projection = None if cfg.tie_output else nn.Linear(cfg.hidden_dim, cfg.vocab_size, bias=False)
        special = torch.zeros(cfg.vocab_size, dtype=torch.bool)
        special[:NUM_SPECIAL_TOKENS] = True
        self.register_buffer("special", special, persistent=False)

    def forward(self, h: torch.Tensor, item_weight: torch.Tensor) -> torch.Tensor:
        weight = item_weight if self.projection is None else self.projection.weight
        logits = h @ weight.T + self.bias
        return logits.masked_fill(self.special, float("-inf"))


def mip_loss(
    hidden: torch.Tensor,
    batch: MaskedBatch,
    head: MipHead,
    item_weight: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean negative log-likelihood of the true item over every masked position."""
    positions = batch.masked_positions
    if not bool(positions.any()):
        raise ValueError("Batch has no masked positions")
    logits = head(hidden[positions], item_weight)
    return F.cross_entropy(logits, batch.labels[positions]), logits


def user_repr(hidden: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
    """Coordinate-wise max over non-PAD positions (CLS and SEP included)."""
    return hidden.masked_fill(~attention_mask.unsqueeze(-1), float("-inf")).amax(dim=-2)


def profile_repr(hidden: torch.Tensor) -> torch.Tensor:
    """Hidden vector of the CLS position."""
    return hidden[..., 0, :]


def huber(a_pred, a_true) -> torch.Tensor:
    """0.5 x^2 below unit error, |x| - 0.5 beyond."""
    a_pred = torch.as_tensor(a_pred, dtype=torch.float64) if not torch.is_tensor(a_pred) else a_pred
    a_true = torch.as_tensor(a_true, dtype=a_pred.dtype) if not torch.is_tensor(a_true) else a_true
    return F.huber_loss(a_pred, a_true, reduction="none", delta=1.0)


class UapHead(nn.Module):
    """One linear regressor per numeric attribute, one classifier per discrete attribute."""

    def __init__(self, hidden_dim: int, schema: AttributeSchema):
        super().__init__()
        self.numeric = nn.ModuleList([nn.Linear(hidden_dim, 1) for _ in schema.numeric_names])
        self.discrete = nn.ModuleList([nn.Linear(hidden_dim, c) for c in schema.discrete_cardinalities])
        self.apply(init_weights)

    def forward(self, reprs: torch.Tensor) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
        return [head(reprs).squeeze(-1) for head in self.numeric], [head(reprs) for head in self.discrete]


def uap_loss(
    user_reprs: torch.Tensor,
    attributes: AttributeTable,
    schema: AttributeSchema,
    heads: UapHead,
) -> torch.Tensor:
    """
    Sum over attributes of the mean Huber loss (numeric) or mean cross-entropy
    (discrete); users missing an attribute are left out of that attribute's mean.
    """
    attributes.validate(schema)
    if attributes.num_users != user_reprs.size(0):
        raise ValueError(f"{user_reprs.size(0)} representations for {attributes.num_users} attribute rows")
    if len(heads.numeric) != len(schema.numeric_names) or len(heads.discrete) != len(schema.discrete_names):
        raise ValueError("UAP heads do not match the attribute schema")

    numeric_preds, discrete_logits = heads(user_reprs)
    total = user_reprs.new_zeros(())
    for j, pred in enumerate(numeric_preds):
        values = torch.as_tensor(attributes.numeric[:, j], dtype=pred.dtype, device=pred.device)
        present = ~torch.isnan(values)
        if bool(present.any()):
            total = total + huber(pred[present], values[present]).mean()
    for j, logits in enumerate(discrete_logits):
        labels = torch.as_tensor(attributes.discrete[:, j], dtype=torch.long, device=logits.device)
        present = labels >= 0
        if bool(present.any()):
            total = total + F.cross_entropy(logits[present], labels[present])
    return total


class SrdHead(nn.Module):
    """Weighted squared-L2 similarity parameters w_s (d) and b_s (scalar)."""

    def __init__(self, hidden_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.full((hidden_dim,), 1.0 / hidden_dim))
        self.bias = nn.Parameter(torch.zeros(()))


def srd_similarity(u_q: torch.Tensor, u_c: torch.Tensor, head: SrdHead) -> torch.Tensor:
    """-(w_s . (u_q - u_c)^2 + b_s), broadcasting over leading dimensions."""
    return -(((u_q - u_c) ** 2) @ head.weight + head.bias)


def profile_similar(
    attributes: AttributeTable,
    ranges: np.ndarray,
    queries: np.ndarray,
    candidates: np.ndarray,
    threshold: float,
) -> np.ndarray:
    """
    (len(queries), len(candidates)) booleans: every discrete attribute equal and
    every numeric attribute within `threshold` of its observed range. Any missing
    value makes a pair dissimilar; an empty schema makes every pair dissimilar.
    """
    n_num, n_disc = attributes.numeric.shape[1], attributes.discrete.shape[1]
    similar = np.ones((len(queries), len(candidates)), dtype=bool)
    if n_num + n_disc == 0:
        return ~similar
    if n_num:
        q, c = attributes.numeric[queries], attributes.numeric[candidates]
        diff = np.abs(q[:, None, :] - c[None, :, :])
        with np.errstate(invalid="ignore"):
            close = diff <= threshold * ranges
        similar &= np.all(close & ~np.isnan(diff), axis=-1)
    if n_disc:
        q, c = attributes.discrete[queries], attributes.discrete[candidates]
        equal = (q[:, None, :] == c[None, :, :]) & (q[:, None, :] >= 0)
        similar &= np.all(equal, axis=-1)
    return similar


def make_srd_batch(
    pairs: Sequence[Tuple[int, int]],
    graph: SocialGraph,
    attributes: Optional[AttributeTable] = None,
    ranges: Optional[np.ndarray] = None,
    threshold: float = 0.05,
) -> SrdBatch:
    """
    In-batch negatives: the friends of the other pairs, minus candidates within
    two hops of the query or with a similar profile.
    """
    queries = np.asarray([q for q, _ in pairs], dtype=np.int64)
    candidates = np.asarray([c for _, c in pairs], dtype=np.int64)
    allowed = np.ones((len(pairs), len(pairs)), dtype=bool)
    np.fill_diagonal(allowed, False)
    for j, q in enumerate(queries):
        near = graph.two_hop_neighbors(int(q))
        near.add(int(q))
        allowed[j] &= ~np.isin(candidates, list(near))
    if attributes is not None and ranges is not None:
        allowed &= ~profile_similar(attributes, ranges, queries, candidates, threshold)
    return SrdBatch(
        torch.from_numpy(queries),
        torch.from_numpy(candidates),
        torch.from_numpy(allowed),
    )


def srd_loss(
    batch: SrdBatch,
    query_reprs: torch.Tensor,
    cand_reprs: torch.Tensor,
    head: SrdHead,
) -> Tuple[torch.Tensor, int]:
    """
    Cross-entropy of each query's friend against its unmasked in-batch negatives.
    Queries with no negative left are skipped; returns the loss and the skip count.
    """
    size = batch.size
    if size < 2:
        raise ValueError(f"Relation detection needs at least 2 pairs per batch, got {size}")
    sims = srd_similarity(query_reprs[:, None, :], cand_reprs[None, :, :], head)
    eye = torch.eye(size, dtype=torch.bool, device=sims.device)
    negatives = batch.negative_mask.to(sims.device) & ~eye
    logits = sims.masked_fill(~(negatives | eye), float("-inf"))
    usable = negatives.any(dim=1)
    skipped = int((~usable).sum())
    if skipped == size:
        raise ValueError("Every query in the batch has all of its negatives masked")
    if skipped:
        logger.debug(f"SRD batch: skipped {skipped} of {size} queries with no usable negatives")
    targets = torch.arange(size, device=sims.device)
    return F.cross_entropy(logits[usable], targets[usable]), skipped


def joint_loss(
    l_mip: Optional[torch.Tensor],
    l_uap: Optional[torch.Tensor],
    l_srd: Optional[torch.Tensor],
    lambda1: float,
    lambda2: float,
    lambda3: float,
) -> torch.Tensor:
    """
    lambda1 L_MIP + lambda2 L_UAP + lambda3 L_SRD. Terms with a zero weight are
    left out entirely, so their losses may be None and contribute no gradient.
    """
    total = None
    for name, loss, weight in (("mip", l_mip, lambda1), ("uap", l_uap, lambda2), ("srd", l_srd, lambda3)):
        if weight < 0:
            raise ValueError(f"Loss weight for {name} must be >= 0, got {weight}")
        if weight == 0:
            continue
        if loss is None:
            raise ValueError(f"Loss weight for {name} is {weight} but no {name} loss was given")
        total = weight * loss if total is None else total + weight * loss
    if total is None:
        raise ValueError("All loss weights are zero")
    return total


class ProfileHead(nn.Module):
    """Fine-tuning head on the CLS vector: one output for numeric tasks, one per class otherwise."""

    def __init__(self, hidden_dim: int, outputs: int):
        super().__init__()
        self.linear = nn.Linear(hidden_dim, outputs)
        self.apply(init_weights)

    def forward(self, reprs: torch.Tensor) -> torch.Tensor:
        out = self.linear(reprs)
        return out.squeeze(-1) if out.size(-1) == 1 else out


class UPRecModel(nn.Module):
    """Encoder plus the three pre-training heads."""

    def __init__(self, cfg: EncoderConfig, schema: AttributeSchema):
        super().__init__()
        self.cfg = cfg
        self.schema = schema
        self.encoder = SequenceEncoder(cfg)
        self.mip_head = MipHead(cfg)
        self.uap_head = UapHead(cfg.hidden_dim, schema)
        self.srd_head = SrdHead(cfg.hidden_dim)

    def item_logits(self, h: torch.Tensor) -> torch.Tensor:
        return self.mip_head(h, self.encoder.item_embeddings.weight)

    def forward(self, input_ids: torch.Tensor, attention_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.encoder(input_ids, attention_mask)
