"""The full model: text encoder, state construction, grounding, decoding,
state update, and the ablation baseline that replaces grounding/tracking with
plain attention over image features and raw history embeddings.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .ader import AnswerDecoder, CandidateEncoder
from .config import ModelConfig
from .encoder import TextEncoder, pad_batch, tokenize
from .layers import MultiHeadAttention
from .pds import PDS
from .qgds import QGDS, _mask_rows
from .state import ObjectProjector


class AderHeads(nn.Module):
    """Generative decoder and discriminative candidate encoder."""

    def __init__(self, embedding: nn.Embedding, cfg: ModelConfig):
        super().__init__()
        self.decoder = AnswerDecoder(embedding, cfg.d_model, cfg.n_heads,
                                     cfg.n_layers, cfg.ffn_dim, cfg.dropout,
                                     cfg.max_answer_len, cfg.layer_norm_eps)
        self.candidates = CandidateEncoder(embedding, cfg.d_model, cfg.n_heads,
                                           cfg.n_layers, cfg.ffn_dim, cfg.dropout,
                                           cfg.max_len, cfg.layer_norm_eps)


class BaselineFusion(nn.Module):
    """Ablation forward path: the question directly attends to image features
    and to raw history token embeddings (both attentions in parallel), and the
    three parts are summed. No dialogue state is read or written."""

    def __init__(self, d_model: int, n_heads: int, dropout: float,
                 eps: float = 1e-5):
        super().__init__()
        self.image_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.history_attn = MultiHeadAttention(d_model, n_heads, dropout)

    def forward(self, q: torch.Tensor, O: torch.Tensor,
                history: torch.Tensor | None,
                history_mask: torch.Tensor | None,
                q_mask: torch.Tensor | None = None) -> torch.Tensor:
        image_ctx = self.image_attn(q, O, O)
        fused = q + _mask_rows(image_ctx, q_mask)
        if history is not None:
            hist_ctx = self.history_attn(q, history, history, key_mask=history_mask)
            fused = fused + _mask_rows(hist_ctx, q_mask)
        return fused


class MDSTModel(nn.Module):
    """Composition root. Submodule names fix the hierarchical checkpoint keys
    (state_core/..., text_encoder/..., qgds/..., ader/..., pds/...)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.vocab_size < 5:
            raise ValueError("vocab_size must be set before building the model")
        self.config = config
        self.text_encoder = TextEncoder(
            config.vocab_size, config.d_model, config.n_heads, config.n_layers,
            config.ffn_dim, config.dropout, config.max_len, config.layer_norm_eps)
        self.state_core = ObjectProjector(config.d_raw, config.d_model,
                                          config.layer_norm_eps,
                                          config.use_pseudo_objects)
        self.qgds = QGDS(config.d_model, config.n_rows, config.dropout,
                         config.layer_norm_eps, config.use_switching)
        self.ader = AderHeads(self.text_encoder.embedding, config)
        self.pds = PDS(config.d_model, config.dropout, config.layer_norm_eps)
        self.history_baseline = BaselineFusion(config.d_model, config.n_heads,
                                               config.dropout, config.layer_norm_eps)

    # -- convenience wrappers used by the training/evaluation loops --------

    def encode_texts(self, texts: list[str], vocab, device=None):
        seqs = [tokenize(t, vocab, self.config.max_len) for t in texts]
        ids, mask = pad_batch(seqs, device=device)
        return self.text_encoder(ids, mask), mask

    def vision_rows(self, raw: torch.Tensor) -> torch.Tensor:
        """Project a (batch, N, d_raw) feature tensor to (batch, n_rows, d)."""
        return self.state_core.project_rows(raw)

    def zero_language_states(self, O: torch.Tensor) -> torch.Tensor:
        return torch.zeros_like(O)
