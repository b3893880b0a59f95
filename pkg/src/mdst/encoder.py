"""Question/caption encoder: tokenization into framed id sequences and a
standard Transformer encoder producing contextual token representations."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import CorpusFormatError
from .layers import EncoderLayer, PositionalEmbedding
from .vocab import BOS, EOS, PAD, UNK, Vocabulary, tokenize_text

logger = logging.getLogger(__name__)


@dataclass
class TokenSequence:
    """BOS/EOS-framed token ids with a padding mask."""

    ids: list[int]
    mask: list[bool] = field(default_factory=list)
    text: str = ""

    def __post_init__(self):
        if not self.mask:
            self.mask = [True] * len(self.ids)
        if len(self.mask) != len(self.ids):
            raise CorpusFormatError("token mask length differs from id length")

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: Vocabulary, max_len: int | None = None) -> TokenSequence:
    """Lowercase, punctuation-split, BOS/EOS-framed, OOV mapped to UNK.

    Empty text yields a single-UNK sequence (with a warning) rather than an
    error, so degenerate captions still flow through the pipeline.
    """
    tokens = tokenize_text(text)
    if not tokens:
        logger.warning("tokenizing empty text %r; emitting single UNK", text)
        ids = [BOS, UNK, EOS]
    else:
        if max_len is not None and len(tokens) > max_len - 2:
            tokens = tokens[: max_len - 2]
        ids = [BOS, *vocab.encode(tokens), EOS]
    return TokenSequence(ids=ids, text=text)


def detokenize_ids(ids: list[int], vocab: Vocabulary) -> str:
    content = [vocab.id_to_token[i] for i in ids if i not in (PAD, BOS, EOS)]
    return " ".join(content)


def pad_batch(sequences: list[TokenSequence], device=None,
              pad_to: int | None = None):
    """Stack sequences into (ids, mask) tensors, padding on the right."""
    length = max(len(s) for s in sequences)
    if pad_to is not None:
        length = max(length, pad_to)
    ids = torch.full((len(sequences), length), PAD, dtype=torch.long, device=device)
    mask = torch.zeros((len(sequences), length), dtype=torch.bool, device=device)
    for i, seq in enumerate(sequences):
        ids[i, : len(seq)] = torch.tensor(seq.ids, dtype=torch.long, device=device)
        mask[i, : len(seq)] = torch.tensor(seq.mask, dtype=torch.bool, device=device)
    return ids, mask


class TextEncoder(nn.Module):
    """Standard Transformer encoder over embedded tokens.

    The word embedding table is owned here and shared with the decoder and the
    candidate encoder. Padding positions are excluded from attention by -inf
    masking, so representations at real positions are independent of how far
    a sequence was padded.
    """

    def __init__(self, vocab_size: int, d_model: int, n_heads: int,
                 n_layers: int, ffn_dim: int, dropout: float, max_len: int,
                 eps: float = 1e-5):
        super().__init__()
        self.d_model = d_model
        self.embedding = nn.Embedding(vocab_size, d_model, padding_idx=PAD)
        self.positional = PositionalEmbedding(max_len, d_model)
        self.layers = nn.ModuleList([
            EncoderLayer(d_model, n_heads, ffn_dim, dropout, eps)
            for _ in range(n_layers)
        ])
        self.dropout = nn.Dropout(dropout)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.embedding(ids) * math.sqrt(self.d_model)
        return x + self.positional(ids.shape[-1], device=ids.device)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None,
                need_weights: bool = False):
        if int(ids.max()) >= self.embedding.num_embeddings:
            raise CorpusFormatError(
                f"token id {int(ids.max())} outside vocabulary of "
                f"{self.embedding.num_embeddings}")
        x = self.dropout(self.embed(ids))
        attns = []
        for layer in self.layers:
            if need_weights:
                x, attn = layer(x, mask, need_weights=True)
                attns.append(attn)
            else:
                x = layer(x, mask)
        return (x, attns) if need_weights else x
