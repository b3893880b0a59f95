"""Question grounding on the dialogue state.

Grounding produces, for the current question:
  * a word-entity alignment distribution over language-state rows,
  * a word-object alignment distribution over vision-state rows,
  * a switching probability, a scalar gate estimating how relevant the
    question is to the dialog history (larger means less relevant), and
  * question-guided textual and visual contexts obtained as weighted sums of
    the states under the two distributions, cross-mixed through the gate;
    the mixing is what exploits the one-to-one object-entity row alignment.

The final question representation is the sum of the question with both
contexts. Question padding positions receive zero context rows and are
excluded from the switching-gate mean.

All operations accept either single instances (length x d) or batches
(batch x length x d); distributions are softmaxes over the state-row axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .state import MlpBlock


@dataclass
class GroundedQuestion:
    """Question representations enriched with state-derived contexts."""

    q: torch.Tensor                 # (l, d) question token reps
    pi_l: torch.Tensor              # (l, n_rows) word-entity alignment
    pi_v: torch.Tensor              # (l, n_rows) word-object alignment
    phi: torch.Tensor | None        # scalar switching probability
    dq_l: torch.Tensor              # (l, d) question-guided textual context
    dq_v: torch.Tensor              # (l, d) question-guided visual context
    fused: torch.Tensor             # q + dq_l + dq_v
    mask: torch.Tensor | None = None


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 2:
        return x.unsqueeze(0), True
    return x, False


def _mask_rows(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Zero the rows of padding positions; mask is (..., l) with True = real."""
    if mask is None:
        return x
    return x * mask.unsqueeze(-1).to(x.dtype)


class QGDS(nn.Module):
    """Alignment distributions, switching gate, and context extraction."""

    def __init__(self, d_model: int, n_rows: int, dropout: float = 0.1,
                 eps: float = 1e-5, use_switching: bool = True):
        super().__init__()
        self.d_model = d_model
        self.n_rows = n_rows
        self.use_switching = use_switching
        self.entity_query = MlpBlock(d_model, d_model, dropout, eps)
        self.entity_key = MlpBlock(d_model, d_model, dropout, eps)
        self.object_query = MlpBlock(d_model, d_model, dropout, eps)
        self.object_key = MlpBlock(d_model, d_model, dropout, eps)
        self.switch_query = MlpBlock(d_model, d_model, dropout, eps)
        self.switch_key = MlpBlock(d_model, d_model, dropout, eps)
        bound = 1.0 / math.sqrt(n_rows)
        self.switch_weight = nn.Parameter(
            torch.empty(n_rows).uniform_(-bound, bound))

    def _alignment(self, query_mlp: MlpBlock, key_mlp: MlpBlock,
                   q: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
        logits = query_mlp(q) @ key_mlp(states).transpose(-1, -2)
        return torch.softmax(logits / math.sqrt(self.d_model), dim=-1)

    def word_entity_alignment(self, q: torch.Tensor, S: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (l, n_rows) distribution of question words over
        language-state rows."""
        return self._alignment(self.entity_query, self.entity_key, q, S)

    def word_object_alignment(self, q: torch.Tensor, O: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (l, n_rows) distribution of question words over
        vision-state rows."""
        return self._alignment(self.object_query, self.object_key, q, O)

    def switching_probability(self, q: torch.Tensor, S: torch.Tensor,
                              mask: torch.Tensor | None = None) -> torch.Tensor:
        """sigmoid(<mean over real words of the word-entity logits, w> / sqrt(n_rows))."""
        qb, squeeze = _as_batched(q)
        Sb, _ = _as_batched(S)
        logits = self.switch_query(qb) @ self.switch_key(Sb).transpose(-1, -2)
        if mask is not None:
            maskb = mask.unsqueeze(0) if mask.dim() == 1 else mask
            weights = maskb.unsqueeze(-1).to(logits.dtype)
            mean = (logits * weights).sum(dim=-2) / weights.sum(dim=-2)
        else:
            mean = logits.mean(dim=-2)
        phi = torch.sigmoid(mean @ self.switch_weight / math.sqrt(self.n_rows))
        return phi.squeeze(0) if squeeze else phi

    def ground(self, q: torch.Tensor, S: torch.Tensor, O: torch.Tensor,
               mask: torch.Tensor | None = None) -> GroundedQuestion:
        """Ground the question in the dialogue state <O, S>."""
        qb, squeeze = _as_batched(q)
        Sb, _ = _as_batched(S)
        Ob, _ = _as_batched(O)
        maskb = None
        if mask is not None:
            maskb = mask.unsqueeze(0) if mask.dim() == 1 else mask

        pi_l = self.word_entity_alignment(qb, Sb)
        pi_v = self.word_object_alignment(qb, Ob)
        if self.use_switching:
            phi = self.switching_probability(qb, Sb, maskb)  # (B,)
            gate = phi[:, None, None]
            mix_l = pi_l + gate * pi_v
            mix_v = pi_v + (1.0 - gate) * pi_l
        else:
            phi = None
            mix_l, mix_v = pi_l, pi_v
        dq_l = _mask_rows(mix_l @ Sb, maskb)
        dq_v = _mask_rows(mix_v @ Ob, maskb)
        fused = qb + dq_l + dq_v

        if squeeze:
            return GroundedQuestion(
                q=q, pi_l=pi_l.squeeze(0), pi_v=pi_v.squeeze(0),
                phi=None if phi is None else phi.squeeze(0),
                dq_l=dq_l.squeeze(0), dq_v=dq_v.squeeze(0),
                fused=fused.squeeze(0), mask=mask)
        return GroundedQuestion(q=q, pi_l=pi_l, pi_v=pi_v, phi=phi,
                                dq_l=dq_l, dq_v=dq_v, fused=fused, mask=mask)
