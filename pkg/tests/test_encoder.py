import math

import pytest
import torch

from schemas.config import EncoderConfig
from services.encoder import (
    MultiHeadSelfAttention,
    PositionwiseFeedForward,
    SequenceEncoder,
    TransformerLayer,
    scaled_dot_attention,
)
from utils.settings import CLS, PAD, SEP


class TestAttention:
    def test_uniform_keys_average_values(self):
        q = torch.zeros(1, 2, 4)
        k = torch.randn(1, 3, 4)
        v = torch.arange(12, dtype=torch.float32).view(1, 3, 4)
        out, weights = scaled_dot_attention(q, k, v)
        torch.testing.assert_close(weights, torch.full((1, 2, 3), 1 / 3))
        torch.testing.assert_close(out[0, 0], v[0].mean(dim=0))

    def test_masked_keys_get_zero_weight(self):
        q, k, v = torch.randn(1, 3, 4), torch.randn(1, 3, 4), torch.randn(1, 3, 4)
        mask = torch.tensor([[True, True, False]])
        _, weights = scaled_dot_attention(q, k, v, mask)
        assert torch.all(weights[..., 2] == 0)
        torch.testing.assert_close(weights.sum(-1), torch.ones(1, 3))

    def test_scaling_by_sqrt_dk(self):
        q = torch.tensor([[[1.0, 1.0, 1.0, 1.0]]])
        k = torch.tensor([[[1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0]]])
        v = torch.eye(2).view(1, 2, 2)
        _, weights = scaled_dot_attention(q, k, v)
        # logits are 4 / sqrt(4) = 2 and 0
        expected = math.exp(2) / (math.exp(2) + 1)
        assert weights[0, 0, 0].item() == pytest.approx(expected, rel=1e-6)

    def test_all_keys_masked(self):
        q = torch.randn(1, 2, 4)
        with pytest.raises(ValueError):
            scaled_dot_attention(q, q, q, torch.zeros(1, 2, dtype=torch.bool))


class TestSequenceEncoder:
    def test_output_shape(self, tiny_encoder_config):
        encoder = SequenceEncoder(tiny_encoder_config)
        tokens = torch.tensor([[CLS, 4, 5, SEP, PAD], [CLS, 6, 7, 8, SEP]])
        assert encoder.encode(tokens).shape == (2, 5, 8)

    def test_single_sequence(self, tiny_encoder_config):
        encoder = SequenceEncoder(tiny_encoder_config)
        assert encoder.encode(torch.tensor([CLS, 4, SEP])).shape == (3, 8)

    def test_padding_does_not_change_valid_positions(self, tiny_encoder_config):
        encoder = SequenceEncoder(tiny_encoder_config)
        short = torch.tensor([[CLS, 4, 5, SEP]])
        padded = torch.tensor([[CLS, 4, 5, SEP, PAD, PAD]])
        torch.testing.assert_close(encoder.encode(short)[0], encoder.encode(padded)[0, :4])

    def test_bidirectional(self, tiny_encoder_config):
        encoder = SequenceEncoder(tiny_encoder_config)
        a = encoder.encode(torch.tensor([[CLS, 4, 5, SEP]]))
        b = encoder.encode(torch.tensor([[CLS, 4, 6, SEP]]))
        # position 1 sees the later item
        assert not torch.allclose(a[0, 1], b[0, 1])

    def test_eval_mode_is_deterministic(self, tiny_encoder_config):
        encoder = SequenceEncoder(tiny_encoder_config)
        tokens = torch.tensor([[CLS, 4, 5, SEP]])
        torch.testing.assert_close(encoder.encode(tokens), encoder.encode(tokens))

    def test_seeded_dropout_is_reproducible(self, tiny_encoder_config):
        encoder = SequenceEncoder(tiny_encoder_config)
        tokens = torch.tensor([[CLS, 4, 5, SEP]])
        a = encoder.encode(tokens, train_mode=True, seed=11)
        b = encoder.encode(tokens, train_mode=True, seed=11)
        c = encoder.encode(tokens, train_mode=True, seed=12)
        torch.testing.assert_close(a, b)
        assert not torch.allclose(a, c)

    def test_too_long(self, tiny_encoder_config):
        encoder = SequenceEncoder(tiny_encoder_config)
        with pytest.raises(ValueError, match="max_len"):
            encoder.encode(torch.full((1, 11), 4))

    def test_token_outside_vocabulary(self, tiny_encoder_config):
        encoder = SequenceEncoder(tiny_encoder_config)
        with pytest.raises(ValueError, match="vocabulary"):
            encoder.encode(torch.tensor([[CLS, 14, SEP]]))

    def test_zero_layers_is_embedding_sum(self):
        cfg = EncoderConfig(num_layers=0, num_heads=1, hidden_dim=4, max_len=5, vocab_size=6)
        encoder = SequenceEncoder(cfg)
        tokens = torch.tensor([[CLS, 4, SEP]])
        expected = encoder.item_embeddings(tokens) + encoder.position_embeddings(torch.arange(3))
        torch.testing.assert_close(encoder.encode(tokens), expected)

    def test_initialization_is_truncated(self, tiny_encoder_config):
        encoder = SequenceEncoder(tiny_encoder_config)
        assert encoder.item_embeddings.weight.abs().max() <= 0.04
        layer = encoder.layers[0]
        assert torch.all(layer.feed_forward.w_1.bias == 0)
        assert torch.all(layer.norm1.weight == 1)

class TestMultiHead:
    def test_matches_per_head_attention(self):
        torch.manual_seed(0)
        attention = MultiHeadSelfAttention(4, 2).double()
        h = torch.randn(2, 3, 4, dtype=torch.float64)
        mask = torch.tensor([[True, True, False], [True, True, True]])
        q, k, v = attention.w_q(h), attention.w_k(h), attention.w_v(h)
        heads = []
        for i in range(2):
            cols = slice(2 * i, 2 * i + 2)
            out, _ = scaled_dot_attention(q[..., cols], k[..., cols], v[..., cols], mask)
            heads.append(out)
        expected = torch.cat(heads, dim=-1) @ attention.w_o.weight.T
        torch.testing.assert_close(attention(h, mask), expected)

    def test_swapping_heads_changes_nothing(self):
        torch.manual_seed(1)
        attention = MultiHeadSelfAttention(4, 2).double()
        swapped = MultiHeadSelfAttention(4, 2).double()
        perm = torch.tensor([2, 3, 0, 1])
        with torch.no_grad():
            for name in ("w_q", "w_k", "w_v"):
                getattr(swapped, name).weight.copy_(getattr(attention, name).weight[perm])
            swapped.w_o.weight.copy_(attention.w_o.weight[:, perm])
        h = torch.randn(1, 5, 4, dtype=torch.float64)
        torch.testing.assert_close(swapped(h), attention(h))


class TestFeedForward:
    def test_zero_weights_give_output_bias(self):
        ffn = PositionwiseFeedForward(3)
        with torch.no_grad():
            ffn.w_1.weight.zero_()
            ffn.w_2.weight.zero_()
            ffn.w_2.bias.copy_(torch.tensor([0.1, -0.2, 0.3]))
        out = ffn(torch.randn(2, 4, 3))
        torch.testing.assert_close(out, torch.tensor([0.1, -0.2, 0.3]).expand(2, 4, 3))

    def test_exact_gelu_by_hand(self):
        ffn = PositionwiseFeedForward(1)
        with torch.no_grad():
            ffn.w_1.weight.copy_(torch.tensor([[1.0], [0.0], [0.0], [0.0]]))
            ffn.w_1.bias.zero_()
            ffn.w_2.weight.copy_(torch.tensor([[2.0, 0.0, 0.0, 0.0]]))
            ffn.w_2.bias.fill_(0.5)
        # GELU(1) = Phi(1)
        out = ffn(torch.tensor([[1.0]]))
        assert out.item() == pytest.approx(2 * 0.841344746 + 0.5, abs=1e-6)


def test_layer_output_is_normalized(tiny_encoder_config):
    torch.manual_seed(2)
    layer = TransformerLayer(tiny_encoder_config).eval()
    h = torch.randn(2, 5, tiny_encoder_config.hidden_dim)
    out = layer(h, torch.ones(2, 5, dtype=torch.bool))
    torch.testing.assert_close(out.mean(dim=-1), torch.zeros(2, 5), atol=1e-5, rtol=0)
    torch.testing.assert_close(out.var(dim=-1, unbiased=False), torch.ones(2, 5), atol=1e-4, rtol=0)



def test_heads_must_divide_hidden_dim():
    with pytest.raises(ValueError):
        EncoderConfig(hidden_dim=10, num_heads=3)
