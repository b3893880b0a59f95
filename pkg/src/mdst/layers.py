"""Transformer building blocks: multi-head attention, encoder and decoder
layers. Written out in full (rather than wrapping a framework stack) so
attention maps and masking behavior stay inspectable by the test suite.

Shape conventions: activations are (batch, length, d_model); padding masks are
boolean (batch, length) with True marking real tokens.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

NEG_INF = float("-inf")


def masked_attention_logits(logits: torch.Tensor,
                            key_mask: torch.Tensor | None = None,
                            causal: bool = False) -> torch.Tensor:
    """Apply padding and/or causal masking with -inf before the softmax."""
    if key_mask is not None:
        # key_mask: (B, Lk) -> broadcast over heads and query positions
        expand = key_mask[:, None, None, :] if logits.dim() == 4 else key_mask[:, None, :]
        logits = logits.masked_fill(~expand, NEG_INF)
    if causal:
        lq, lk = logits.shape[-2], logits.shape[-1]
        future = torch.triu(torch.ones(lq, lk, dtype=torch.bool,
                                       device=logits.device), diagonal=1)
        logits = logits.masked_fill(future, NEG_INF)
    return logits


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with learned projections."""

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        assert d_model % n_heads == 0
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                key_mask: torch.Tensor | None = None, causal: bool = False,
                need_weights: bool = False):
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        logits = masked_attention_logits(logits, key_mask, causal)
        attn = F.softmax(logits, dim=-1)
        attn = self.dropout(attn)
        out = attn @ v
        b, _, lq, _ = out.shape
        out = out.transpose(1, 2).reshape(b, lq, self.d_model)
        out = self.out_proj(out)
        if need_weights:
            return out, attn
        return out


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Post-norm encoder layer: self-attention then position-wise FFN."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, dropout: float,
                 eps: float = 1e-5):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ffn = FeedForward(d_model, ffn_dim, dropout)
        self.norm1 = nn.LayerNorm(d_model, eps=eps)
        self.norm2 = nn.LayerNorm(d_model, eps=eps)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask=None, need_weights: bool = False):
        if need_weights:
            h, attn = self.self_attn(x, x, x, key_mask=mask, need_weights=True)
        else:
            h, attn = self.self_attn(x, x, x, key_mask=mask), None
        x = self.norm1(x + self.dropout(h))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return (x, attn) if need_weights else x


class DecoderLayer(nn.Module):
    """Post-norm decoder layer: causal self-attention, cross-attention over
    the memory sequence, then FFN."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, dropout: float,
                 eps: float = 1e-5):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ffn = FeedForward(d_model, ffn_dim, dropout)
        self.norm1 = nn.LayerNorm(d_model, eps=eps)
        self.norm2 = nn.LayerNorm(d_model, eps=eps)
        self.norm3 = nn.LayerNorm(d_model, eps=eps)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, memory, memory_mask=None):
        h = self.self_attn(x, x, x, causal=True)
        x = self.norm1(x + self.dropout(h))
        h = self.cross_attn(x, memory, memory, key_mask=memory_mask)
        x = self.norm2(x + self.dropout(h))
        x = self.norm3(x + self.dropout(self.ffn(x)))
        return x


class PositionalEmbedding(nn.Module):
    """Learned positional embeddings up to a fixed maximum length."""

    def __init__(self, max_len: int, d_model: int):
        super().__init__()
        self.emb = nn.Embedding(max_len, d_model)
        self.max_len = max_len

    def forward(self, length: int, device=None) -> torch.Tensor:
        if length > self.max_len:
            raise ValueError(f"sequence of length {length} exceeds positional "
                             f"table of {self.max_len}")
        positions = torch.arange(length, device=device or self.emb.weight.device)
        return self.emb(positions)
