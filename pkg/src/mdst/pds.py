"""Postdiction on the dialogue state: fold the finished round's QA pair back
into the language states.

Two distributions drive the update. The word-word alignment fuses the answer
into the question (h = q + alpha a). The assignment distribution beta then
decides how the fused information spreads over state rows, and the language
states receive the purely additive write S <- S + beta^T h. Assignment keys
combine the language states with their aligned vision rows (S + O): the
object anchor is what routes information about an object to that object's
entity row, which the language-side content alone cannot do from a zero
initialization.

The caption bootstraps the state: at round zero there is no answer, so the
caption representation itself plays the role of h and the same update
machinery moves the state from round 0 to round 1.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ContractError
from .layers import NEG_INF
from .qgds import QGDS, _as_batched, _mask_rows
from .state import DialogueState, MlpBlock

logger = logging.getLogger(__name__)


@dataclass
class QaFusion:
    alpha: torch.Tensor     # (l, answer_len) word-word alignment
    h: torch.Tensor         # (l, d) fused QA representation


@dataclass
class StateUpdate:
    """One additive write: the assignment distribution and the states after
    it. Unpacks as (beta, S_next)."""

    beta: torch.Tensor      # (l, n_rows) assignment distribution
    S_next: torch.Tensor    # (n_rows, d)

    def __iter__(self):
        return iter((self.beta, self.S_next))


class PDS(nn.Module):
    def __init__(self, d_model: int, dropout: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.d_model = d_model
        self.qa_query = MlpBlock(d_model, d_model, dropout, eps)
        self.answer_key = MlpBlock(d_model, d_model, dropout, eps)
        self.write_query = MlpBlock(d_model, d_model, dropout, eps)
        self.state_key = MlpBlock(d_model, d_model, dropout, eps)

    def fuse_qa_pair(self, q: torch.Tensor, dq_l: torch.Tensor,
                     a: torch.Tensor, a_mask: torch.Tensor | None = None,
                     q_mask: torch.Tensor | None = None) -> QaFusion:
        """alpha = softmax over answer words of MLP(q+dq_l) MLP(a)^T / sqrt(d);
        h = q + alpha a. Batches where the answer has no real tokens fall back
        to h = q (zero alpha rows)."""
        qb, squeeze = _as_batched(q)
        dq_lb, _ = _as_batched(dq_l)
        ab, _ = _as_batched(a)
        if ab.shape[-2] < 1:
            raise ContractError("QA fusion needs at least one answer position")
        logits = self.qa_query(qb + dq_lb) @ self.answer_key(ab).transpose(-1, -2)
        logits = logits / math.sqrt(self.d_model)
        if a_mask is not None:
            a_maskb = a_mask.unsqueeze(0) if a_mask.dim() == 1 else a_mask
            logits = logits.masked_fill(~a_maskb.unsqueeze(-2), NEG_INF)
            valid = a_maskb.any(dim=-1)[:, None, None]
            alpha = torch.softmax(logits, dim=-1)
            alpha = torch.where(valid, alpha, torch.zeros_like(alpha))
        else:
            alpha = torch.softmax(logits, dim=-1)
        h = qb + alpha @ ab
        if q_mask is not None:
            q_maskb = q_mask.unsqueeze(0) if q_mask.dim() == 1 else q_mask
            h = _mask_rows(h, q_maskb)
        if squeeze:
            return QaFusion(alpha=alpha.squeeze(0), h=h.squeeze(0))
        return QaFusion(alpha=alpha, h=h)

    def assignment(self, h: torch.Tensor, dq_l: torch.Tensor,
                   S: torch.Tensor, O: torch.Tensor,
                   q_mask: torch.Tensor | None = None) -> torch.Tensor:
        """beta = softmax over state rows of MLP(h+dq_l) MLP(S+O)^T / sqrt(d);
        padding question rows are zeroed so they write nothing."""
        logits = self.write_query(h + dq_l) @ self.state_key(S + O).transpose(-1, -2)
        beta = torch.softmax(logits / math.sqrt(self.d_model), dim=-1)
        return _mask_rows(beta, q_mask)

    def update_language_states(self, h: torch.Tensor, dq_l: torch.Tensor,
                               S: torch.Tensor, O: torch.Tensor,
                               q_mask: torch.Tensor | None = None) -> StateUpdate:
        """Additive write S_next = S + beta^T h."""
        beta = self.assignment(h, dq_l, S, O, q_mask)
        S_next = S + beta.transpose(-1, -2) @ h
        return StateUpdate(beta=beta, S_next=S_next)


def update_dialogue_state(pds: PDS, state: DialogueState, h: torch.Tensor,
                          dq_l: torch.Tensor,
                          q_mask: torch.Tensor | None = None) -> tuple[torch.Tensor, DialogueState]:
    """Apply the PDS write to a DialogueState wrapper, advancing its round
    counter and leaving the vision states untouched."""
    update = pds.update_language_states(h, dq_l, state.S, state.O, q_mask)
    logger.debug("round %d -> %d: |S| = %.4f", state.t, state.t + 1,
                 float(update.S_next.norm()))
    return update.beta, state.advanced(update.S_next)


def bootstrap_with_caption(qgds: QGDS, pds: PDS, state: DialogueState,
                           caption: torch.Tensor,
                           mask: torch.Tensor | None = None):
    """Round-zero update: ground the caption (dq_l is exactly zero since S is
    zero), treat the caption representation as h, and write it into the
    language states. Returns (beta, state at round 1)."""
    if state.t != 0:
        raise ContractError(f"caption bootstrap requires round 0, got t={state.t}")
    grounded = qgds.ground(caption, state.S, state.O, mask)
    h = caption if mask is None else _mask_rows(caption, mask)
    return update_dialogue_state(pds, state, h, grounded.dq_l, mask)
