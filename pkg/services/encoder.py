"""
Bidirectional transformer sequence encoder: item + position embeddings
followed by post-norm self-attention / feed-forward layers.
"""
import math
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from schemas.config import EncoderConfig
from utils.settings import PAD

INIT_STD = 0.02


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    key_mask: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    softmax(Q K^T / sqrt(d_k)) V with invalid keys set to -inf before the softmax.

    q: (..., Tq, d_k), k: (..., Tk, d_k), v: (..., Tk, d_v)
    key_mask: (..., Tk) with True on valid keys, broadcastable over the leading dims.
    Returns the attended values and the attention weights.
    """
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.size(-1))
    if key_mask is not None:
        if not bool(key_mask.any(dim=-1).all()):
            raise ValueError("Every key is masked for at least one query")
        logits = logits.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


class MultiHeadSelfAttention(nn.Module):
    """
    Heads attend over disjoint d/h sub-spaces; their outputs are concatenated
    and projected by W^O.
    """

    def __init__(self, hidden_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_dim // num_heads
        self.w_q = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.w_k = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.w_v = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.w_o = nn.Linear(hidden_dim, hidden_dim, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        # (B, T, d) -> (B, h, T, d/h)
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, h: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        q, k, v = self._split(self.w_q(h)), self._split(self.w_k(h)), self._split(self.w_v(h))
        key_mask = None if mask is None else mask[:, None, :]
        heads, _ = scaled_dot_attention(q, k, v, key_mask)
        b, _, t, _ = heads.shape
        return self.w_o(heads.transpose(1, 2).reshape(b, t, -1))


class PositionwiseFeedForward(nn.Module):
    """GELU(h W1 + b1) W2 + b2, the same parameters at every position."""

    def __init__(self, hidden_dim: int, approximate: str = "none"):
        super().__init__()
        self.w_1 = nn.Linear(hidden_dim, 4 * hidden_dim)
        self.w_2 = nn.Linear(4 * hidden_dim, hidden_dim)
        self.approximate = approximate

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.w_2(F.gelu(self.w_1(h), approximate=self.approximate))


class TransformerLayer(nn.Module):
    """Each sublayer: dropout, residual add, then layer normalization."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attention = MultiHeadSelfAttention(cfg.hidden_dim, cfg.num_heads)
        self.feed_forward = PositionwiseFeedForward(cfg.hidden_dim, cfg.gelu_approximate)
        self.norm1 = nn.LayerNorm(cfg.hidden_dim)
        self.norm2 = nn.LayerNorm(cfg.hidden_dim)
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.norm1(h + self.dropout(self.attention(h, mask)))
        return self.norm2(h + self.dropout(self.feed_forward(h)))


class SequenceEncoder(nn.Module):
    """
    Maps wrapped token sequences ([CLS] items [SEP], right-padded with PAD)
    to final-layer hidden states. Position 0 is the CLS position.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.item_embeddings = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.position_embeddings = nn.Embedding(cfg.max_len, cfg.hidden_dim)
        self.embedding_dropout = nn.Dropout(cfg.dropout_rate if cfg.embedding_dropout else 0.0)
        self.layers = nn.ModuleList([TransformerLayer(cfg) for _ in range(cfg.num_layers)])
        self.apply(init_weights)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        """h_i^0 = v_{token_i} + p_i, then embedding dropout (a no-op in eval mode)."""
        if tokens.size(-1) > self.cfg.max_len:
            raise ValueError(f"Sequence of {tokens.size(-1)} tokens exceeds max_len {self.cfg.max_len}; truncate first")
        if tokens.numel() and int(tokens.max()) >= self.cfg.vocab_size:
            raise ValueError(f"Token index {int(tokens.max())} is outside the vocabulary of {self.cfg.vocab_size}")
        positions = torch.arange(tokens.size(-1), device=tokens.device)
        return self.embedding_dropout(self.item_embeddings(tokens) + self.position_embeddings(positions))

    def forward(self, tokens: torch.Tensor, attention_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
            attention_mask = None if attention_mask is None else attention_mask.unsqueeze(0)
        if attention_mask is None:
            attention_mask = tokens != PAD
        h = self.embed(tokens)
        for layer in self.layers:
            h = layer(h, attention_mask)
        return h.squeeze(0) if squeeze else h

    def encode(
        self,
        tokens: torch.Tensor,
        train_mode: bool = False,
        seed: Optional[int] = None,
        attention_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """
        Runs the full stack. With a seed, dropout draws come from a forked RNG
        so repeated calls are bit-identical and the global RNG is untouched.
        """
        self.train(train_mode)
        if seed is None:
            return self(tokens, attention_mask)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return self(tokens, attention_mask)


def init_weights(module: nn.Module) -> None:
    """Truncated normal (std 0.02) weights, zero biases, unit layer-norm gain."""
    if isinstance(module, (nn.Linear, nn.Embedding)):
        nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
