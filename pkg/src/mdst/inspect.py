"""State attribution inspection: where each round's information lands.

Runs a single dialog with teacher-forced gold answers and records the
assignment distribution of every state write (caption bootstrap included).
The argmax of an assignment row names the entity row that absorbed that
word's information, which is the write-path view of the dialog.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import DialogRecord
from .encoder import pad_batch, tokenize
from .errors import ContractError
from .model import MDSTModel
from .vocab import Vocabulary


@dataclass
class RoundAttribution:
    stage: int                  # 0 = caption bootstrap, then 1-based rounds
    text: str
    tokens: list[str]
    beta: np.ndarray            # (len(tokens), n_rows)


def row_labels(model: MDSTModel, world=None) -> list[str]:
    """Human-readable state-row names; object categories when a synthetic
    world is available."""
    n_real = model.config.n_objects
    if world is not None:
        labels = [obj.category for obj in world.objects]
        labels += [f"obj{i}" for i in range(len(labels), n_real)]
    else:
        labels = [f"obj{i}" for i in range(n_real)]
    if model.config.use_pseudo_objects:
        labels += ["NULL", "ALL"]
    return labels


def collect_attributions(model: MDSTModel, vocab: Vocabulary,
                         record: DialogRecord, feature_matrix: np.ndarray,
                         max_rounds: int | None = None,
                         device: str = "cpu") -> list[RoundAttribution]:
    if not model.config.use_qgds_pds:
        raise ContractError("state inspection requires the tracking path "
                            "(use_qgds_pds=True)")
    model.eval()

    def encode(text: str):
        seq = tokenize(text, vocab, model.config.max_len)
        ids, mask = pad_batch([seq], device=device)
        reps = model.text_encoder(ids, mask)
        return seq, reps, mask

    out: list[RoundAttribution] = []
    with torch.no_grad():
        raw = torch.from_numpy(feature_matrix).to(device, torch.float32)
        O = model.vision_rows(raw.unsqueeze(0))
        S = model.zero_language_states(O)

        cap_seq, cap_reps, cap_mask = encode(record.caption)
        grounded = model.qgds.ground(cap_reps, S, O, cap_mask)
        beta, S = model.pds.update_language_states(cap_reps, grounded.dq_l,
                                                   S, O, cap_mask)
        out.append(RoundAttribution(stage=0, text=record.caption,
                                    tokens=vocab.decode(cap_seq.ids),
                                    beta=beta[0].cpu().numpy()))

        rounds = record.rounds if max_rounds is None else record.rounds[:max_rounds]
        for t, rnd in enumerate(rounds, start=1):
            if rnd.answer is None:
                break
            q_seq, q_reps, q_mask = encode(rnd.question)
            grounded = model.qgds.ground(q_reps, S, O, q_mask)
            a_seq = tokenize(rnd.answer, vocab, model.config.max_answer_len + 2)
            a_ids, a_mask_t = pad_batch([a_seq], device=device)
            dec = model.ader.decoder.teacher_forward(grounded.fused, q_mask,
                                                     a_ids, a_mask_t)
            fusion = model.pds.fuse_qa_pair(q_reps, grounded.dq_l,
                                            dec["answer_reps"],
                                            dec["answer_mask"], q_mask)
            beta, S = model.pds.update_language_states(fusion.h, grounded.dq_l,
                                                       S, O, q_mask)
            out.append(RoundAttribution(stage=t, text=rnd.question,
                                        tokens=vocab.decode(q_seq.ids),
                                        beta=beta[0].cpu().numpy()))
    return out


def attribution_rows(attributions: list[RoundAttribution],
                     labels: list[str], topk: int = 3) -> list[list]:
    """Flatten attributions into TSV rows: stage, token, then the top-k
    (row label, probability) pairs of the write distribution."""
    rows = []
    for att in attributions:
        for token, dist in zip(att.tokens, att.beta):
            order = np.argsort(dist)[::-1][:topk]
            cells = [att.stage, token]
            for idx in order:
                cells += [labels[int(idx)], round(float(dist[int(idx)]), 4)]
            rows.append(cells)
    return rows
