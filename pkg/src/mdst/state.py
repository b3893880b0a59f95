"""Dialogue state: frozen vision states, additively updated language states,
and the shared non-linear transformation block.

The state is a 2-tuple <O, S> with one-to-one row correspondence. O holds the
projected object features plus the NULL row (all zeros, absorbs
image-irrelevant questions) and the ALL row (mean of the real object rows,
absorbs whole-image questions). O never changes during a dialog; S starts at
zero and only ever receives additive writes.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, NumericError


class MlpBlock(nn.Module):
    """LayerNorm(Dropout(GELU(W x))), the transformation used throughout the
    grounding and update equations. Each call site owns its own instance; no
    weights are shared between uses."""

    def __init__(self, in_dim: int, out_dim: int, dropout: float = 0.1,
                 eps: float = 1e-5):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        # Zero bias at init so the block maps zero inputs to exactly zero
        # (the LayerNorm affine starts as the identity); zero language states
        # then produce uniform alignments and a neutral switching gate.
        nn.init.zeros_(self.linear.bias)
        self.dropout = nn.Dropout(dropout)
        self.norm = nn.LayerNorm(out_dim, eps=eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.dropout(F.gelu(self.linear(x))))


@dataclass
class VisionStates:
    """Projected object rows plus pseudo-objects; immutable once built."""

    O: torch.Tensor                # (n_rows, d) or (batch, n_rows, d)
    null_index: int | None = None
    all_index: int | None = None

    @property
    def n_rows(self) -> int:
        return self.O.shape[-2]

    @property
    def d(self) -> int:
        return self.O.shape[-1]

    def digest(self) -> str:
        """Byte-level digest, used to verify immutability across rounds."""
        arr = self.O.detach().cpu().to(torch.float32).numpy()
        return hashlib.sha256(arr.tobytes()).hexdigest()


@dataclass
class LanguageStates:
    S: torch.Tensor                # same shape as the paired VisionStates
    t: int = 0


@dataclass
class DialogueState:
    vision: VisionStates
    language: LanguageStates

    @property
    def O(self) -> torch.Tensor:
        return self.vision.O

    @property
    def S(self) -> torch.Tensor:
        return self.language.S

    @property
    def t(self) -> int:
        return self.language.t

    def advanced(self, S_next: torch.Tensor) -> "DialogueState":
        """Next-round state: same vision states (aliased), updated language
        states, round counter incremented."""
        if S_next.shape != self.language.S.shape:
            raise ContractError("language state shape changed during update")
        return DialogueState(vision=self.vision,
                             language=LanguageStates(S=S_next, t=self.t + 1))


class ObjectProjector(nn.Module):
    """Projects raw region descriptors into d-dimensional vision states and
    appends the NULL/ALL pseudo-object rows."""

    def __init__(self, d_raw: int, d_model: int, eps: float = 1e-5,
                 use_pseudo_objects: bool = True):
        super().__init__()
        self.linear = nn.Linear(d_raw, d_model)
        self.norm = nn.LayerNorm(d_model, eps=eps)
        self.use_pseudo_objects = use_pseudo_objects

    def project_rows(self, raw: torch.Tensor) -> torch.Tensor:
        """LayerNorm(ReLU(W x + b)) applied row-wise, plus pseudo rows."""
        if raw.shape[-2] < 1:
            raise ContractError("need at least one object row")
        projected = self.norm(F.relu(self.linear(raw)))
        if not torch.isfinite(projected).all():
            raise NumericError("object projection produced non-finite values")
        if not self.use_pseudo_objects:
            return projected
        null_row = torch.zeros_like(projected[..., :1, :])
        all_row = projected.mean(dim=-2, keepdim=True)
        return torch.cat([projected, null_row, all_row], dim=-2)

    def forward(self, raw: torch.Tensor) -> VisionStates:
        n = raw.shape[-2]
        O = self.project_rows(raw)
        if self.use_pseudo_objects:
            return VisionStates(O=O, null_index=n, all_index=n + 1)
        return VisionStates(O=O)


def project_objects(raw: torch.Tensor, projector: ObjectProjector) -> VisionStates:
    return projector(raw)


def init_dialogue_state(vision: VisionStates) -> DialogueState:
    """Round-zero state: language states are all zeros, counter at 0. The
    vision states are aliased, never copied per round."""
    S = torch.zeros_like(vision.O)
    return DialogueState(vision=vision, language=LanguageStates(S=S, t=0))
