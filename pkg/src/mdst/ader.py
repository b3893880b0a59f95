"""Answer decoding and candidate ranking.

The generative head is a Transformer decoder that cross-attends to the fused
question representation and decodes greedily until EOS. The discriminative
head encodes each of the 100 candidate answers with a separate Transformer
encoder (word embeddings shared with the rest of the model), pools both sides
to vectors, and scores candidates by dot product; ties in the ranking break by
candidate index, ascending.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError
from .layers import DecoderLayer, EncoderLayer, PositionalEmbedding
from .vocab import BOS, EOS, PAD

N_CANDIDATES = 100


@dataclass
class DecodedAnswer:
    """Greedy decode output: content token ids, their contextual reps, and
    the log-probability of each generated step (EOS step included)."""

    ids: list[int]
    reps: torch.Tensor
    step_logprobs: list[float] = field(default_factory=list)
    truncated: bool = False

    def __post_init__(self):
        if self.reps.shape[0] != len(self.ids):
            raise ContractError("answer reps row count differs from token count")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class CandidateScores:
    scores: torch.Tensor        # (100,)
    gt_rank: int                # 1-based rank of the ground-truth candidate


def pool_tokens(reps: torch.Tensor, mask: torch.Tensor | None,
                mode: str = "mean") -> torch.Tensor:
    """Collapse (..., l, d) token reps to (..., d) vectors."""
    if mode == "first":
        return reps[..., 0, :]
    if mask is None:
        return reps.mean(dim=-2)
    weights = mask.unsqueeze(-1).to(reps.dtype)
    return (reps * weights).sum(dim=-2) / weights.sum(dim=-2).clamp(min=1.0)


def rank_of_candidate(scores: torch.Tensor, gt_index: int) -> int:
    """1-based descending rank with index-ascending tie breaking."""
    gt_score = scores[gt_index]
    higher = int((scores > gt_score).sum())
    tied_before = int((scores[:gt_index] == gt_score).sum())
    return 1 + higher + tied_before


class AnswerDecoder(nn.Module):
    """Transformer decoder over the fused question representation."""

    def __init__(self, embedding: nn.Embedding, d_model: int, n_heads: int,
                 n_layers: int, ffn_dim: int, dropout: float, max_len: int,
                 eps: float = 1e-5):
        super().__init__()
        self.d_model = d_model
        self.embedding = embedding  # shared table
        self.positional = PositionalEmbedding(max_len + 2, d_model)
        self.layers = nn.ModuleList([
            DecoderLayer(d_model, n_heads, ffn_dim, dropout, eps)
            for _ in range(n_layers)
        ])
        self.head = nn.Linear(d_model, embedding.num_embeddings)
        self.dropout = nn.Dropout(dropout)

    def hidden_states(self, ids: torch.Tensor, memory: torch.Tensor,
                      memory_mask: torch.Tensor | None) -> torch.Tensor:
        x = self.embedding(ids) * math.sqrt(self.d_model)
        x = self.dropout(x + self.positional(ids.shape[-1], device=ids.device))
        for layer in self.layers:
            x = layer(x, memory, memory_mask)
        return x

    def teacher_forward(self, memory: torch.Tensor,
                        memory_mask: torch.Tensor | None,
                        gold_ids: torch.Tensor, gold_mask: torch.Tensor) -> dict:
        """Teacher-forced pass over gold answers framed [BOS, w1..wk, EOS].

        Returns per-dialog NLL sums and token counts, per-step gold
        log-probabilities, and the contextual reps of the answer content
        tokens (the representation consumed by the state update).
        """
        inputs, targets = gold_ids[:, :-1], gold_ids[:, 1:]
        target_mask = gold_mask[:, 1:]
        hidden = self.hidden_states(inputs, memory, memory_mask)
        logits = self.head(hidden)
        logprobs = F.log_softmax(logits, dim=-1)
        step_logprobs = logprobs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        step_logprobs = step_logprobs * target_mask.to(step_logprobs.dtype)
        nll_sum = -step_logprobs.sum(dim=-1)
        n_tokens = target_mask.sum(dim=-1)
        content_mask = (gold_mask[:, :-1] & (inputs != BOS) & (inputs != EOS)
                        & (inputs != PAD))
        return {
            "nll_sum": nll_sum,
            "n_tokens": n_tokens,
            "step_logprobs": step_logprobs,
            "target_mask": target_mask,
            "answer_reps": hidden,
            "answer_mask": content_mask,
            "logits": logits,
        }

    def answer_nll(self, memory, memory_mask, gold_ids, gold_mask):
        """Summed negative log-likelihood over gold positions, plus the
        mean-per-token variant for reporting."""
        out = self.teacher_forward(memory, memory_mask, gold_ids, gold_mask)
        mean = out["nll_sum"] / out["n_tokens"].clamp(min=1).to(out["nll_sum"].dtype)
        return out["nll_sum"], mean

    @torch.no_grad()
    def greedy_decode(self, memory: torch.Tensor,
                      memory_mask: torch.Tensor | None,
                      max_len: int) -> list[DecodedAnswer]:
        """Greedy argmax decoding until EOS or max_len content tokens."""
        batch = memory.shape[0]
        device = memory.device
        ids = torch.full((batch, 1), BOS, dtype=torch.long, device=device)
        finished = torch.zeros(batch, dtype=torch.bool, device=device)
        logprob_steps: list[list[float]] = [[] for _ in range(batch)]
        for _ in range(max_len + 1):  # +1 budget for the EOS step
            hidden = self.hidden_states(ids, memory, memory_mask)
            logprobs = F.log_softmax(self.head(hidden[:, -1]), dim=-1)
            next_ids = logprobs.argmax(dim=-1)
            next_ids = torch.where(finished, torch.full_like(next_ids, PAD), next_ids)
            for b in range(batch):
                if not finished[b]:
                    logprob_steps[b].append(float(logprobs[b, next_ids[b]]))
            ids = torch.cat([ids, next_ids.unsqueeze(-1)], dim=-1)
            finished = finished | (next_ids == EOS)
            if bool(finished.all()):
                break
            if ids.shape[1] - 1 >= max_len + 1:
                break
        hidden = self.hidden_states(ids, memory, memory_mask)
        answers = []
        for b in range(batch):
            row = ids[b, 1:].tolist()
            content = []
            truncated = True
            for tok in row:
                if tok == EOS:
                    truncated = False
                    break
                if tok == PAD:
                    break
                content.append(tok)
            if truncated:
                content = content[:max_len]
            reps = hidden[b, 1 : 1 + len(content)]
            answers.append(DecodedAnswer(ids=content, reps=reps,
                                         step_logprobs=logprob_steps[b],
                                         truncated=truncated))
        return answers


class CandidateEncoder(nn.Module):
    """Separate Transformer encoder for candidate answers (shared word
    embeddings, its own layers)."""

    def __init__(self, embedding: nn.Embedding, d_model: int, n_heads: int,
                 n_layers: int, ffn_dim: int, dropout: float, max_len: int,
                 eps: float = 1e-5):
        super().__init__()
        self.d_model = d_model
        self.embedding = embedding
        self.positional = PositionalEmbedding(max_len + 2, d_model)
        self.layers = nn.ModuleList([
            EncoderLayer(d_model, n_heads, ffn_dim, dropout, eps)
            for _ in range(n_layers)
        ])
        self.dropout = nn.Dropout(dropout)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None):
        x = self.embedding(ids) * math.sqrt(self.d_model)
        x = self.dropout(x + self.positional(ids.shape[-1], device=ids.device))
        for layer in self.layers:
            x = layer(x, mask)
        return x

    def encode_pooled(self, ids: torch.Tensor, mask: torch.Tensor,
                      pooling: str = "mean") -> torch.Tensor:
        return pool_tokens(self(ids, mask), mask, pooling)


def score_candidates(fused: torch.Tensor, fused_mask: torch.Tensor | None,
                     candidate_ids: torch.Tensor, candidate_mask: torch.Tensor,
                     candidate_encoder: CandidateEncoder, gt_index: int,
                     pooling: str = "mean") -> CandidateScores:
    """Dot-product scores of the pooled fused question against 100 pooled
    candidate encodings."""
    if candidate_ids.shape[0] != N_CANDIDATES:
        raise ContractError(
            f"expected {N_CANDIDATES} candidates, got {candidate_ids.shape[0]}")
    question_vec = pool_tokens(fused, fused_mask, pooling)
    candidate_vecs = candidate_encoder.encode_pooled(candidate_ids,
                                                     candidate_mask, pooling)
    scores = candidate_vecs @ question_vec
    return CandidateScores(scores=scores,
                           gt_rank=rank_of_candidate(scores, gt_index))
