"""Dialog generation: greedy decoding round by round, feeding each generated
answer back into the dialogue state (or the baseline's raw history)."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import DialogCorpus, FeatureStore
from .encoder import detokenize_ids, pad_batch
from .errors import ContractError
from .model import MDSTModel
from .training import Collator, DialogContext, bucket_records
from .vocab import Vocabulary

logger = logging.getLogger(__name__)


@dataclass
class StateDumper:
    """Writes per-round language-state matrices as raw float32 binaries with a
    JSON index; one entry per (dialog, stage), stage 0 being the caption
    bootstrap."""

    root: Path
    index: list[dict] = field(default_factory=list)

    def dump(self, image_id, stage: int, S: torch.Tensor) -> None:
        arr = S.detach().cpu().to(torch.float32).numpy()
        fname = f"state_{image_id}_{stage:03d}.bin"
        arr.astype("<f4").tofile(self.root / fname)
        self.index.append({"image_id": image_id, "stage": stage,
                           "file": fname, "shape": list(arr.shape)})

    def close(self) -> None:
        (self.root / "index.json").write_text(json.dumps(self.index, indent=1))


def generate_dialogues(model: MDSTModel, vocab: Vocabulary,
                       corpus: DialogCorpus, features: FeatureStore,
                       rounds: int, out_path: str | Path | None = None,
                       state_dump_dir: str | Path | None = None,
                       batch_size: int = 32, device: str = "cpu") -> list[dict]:
    """Answer the first ``rounds`` questions of every dialog with greedy
    decoding. Returns (and optionally writes as JSON lines) one row per round:
    {image_id, round, question, answer, gt_answer, truncated}."""
    if rounds < 1:
        raise ContractError("rounds must be >= 1")
    model.eval()
    collator = Collator(vocab, model.config, features, device)
    dumper = None
    if state_dump_dir is not None:
        if not model.config.use_qgds_pds:
            raise ContractError("state dumps require the tracking path "
                                "(use_qgds_pds=True)")
        root = Path(state_dump_dir)
        root.mkdir(parents=True, exist_ok=True)
        dumper = StateDumper(root=root)

    rows: list[dict] = []
    plan = bucket_records(corpus.records, batch_size,
                          key=lambda r: min(rounds, len(r.rounds)))
    with torch.no_grad():
        for n_rounds, records in plan:
            batch = collator.dialog_batch(records, n_rounds)
            cap_reps, cap_mask, q_reps_all, q_masks = batch.encode_all(
                model.text_encoder)
            ctx = DialogContext(model, batch, cap_reps=cap_reps,
                                cap_mask=cap_mask)
            if dumper is not None:
                for b, image_id in enumerate(batch.image_ids):
                    dumper.dump(image_id, 0, ctx.S[b])
            for t, rb in enumerate(batch.rounds):
                q_reps, q_mask = q_reps_all[t], q_masks[t]
                fused, grounded = ctx.fuse_question(q_reps, q_mask)
                answers = model.ader.decoder.greedy_decode(
                    fused, q_mask, model.config.max_answer_len)
                texts = [detokenize_ids(a.ids, vocab) for a in answers]
                for b, image_id in enumerate(batch.image_ids):
                    rows.append({
                        "image_id": image_id,
                        "round": t + 1,
                        "question": rb.questions[b],
                        "answer": texts[b],
                        "gt_answer": rb.answers[b] or "",
                        "truncated": answers[b].truncated,
                    })
                if model.config.use_qgds_pds:
                    a_reps, a_mask = _pad_answer_reps(answers, fused)
                    ctx.absorb_round(q_reps, q_mask, grounded, a_reps, a_mask)
                else:
                    qa_seqs = [collator.seq(f"{rb.questions[b]} {texts[b]}",
                                            model.config.max_len)
                               for b in range(len(records))]
                    qa_ids, qa_mask = pad_batch(qa_seqs, device=device)
                    qa_reps = model.text_encoder(qa_ids, qa_mask)
                    ctx.absorb_round(q_reps, q_mask, None, None, None,
                                     qa_reps, qa_mask)
                if dumper is not None:
                    for b, image_id in enumerate(batch.image_ids):
                        dumper.dump(image_id, t + 1, ctx.S[b])
    if dumper is not None:
        dumper.close()
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        logger.info("wrote %d generated rounds to %s", len(rows), out_path)
    return rows


def _pad_answer_reps(answers, fused: torch.Tensor):
    """Stack per-dialog content-token reps into a padded (B, L, d) tensor with
    mask; empty answers yield all-masked rows (the QA fusion then reduces to
    h = q)."""
    batch = len(answers)
    d = fused.shape[-1]
    max_len = max(1, max(len(a) for a in answers))
    reps = fused.new_zeros((batch, max_len, d))
    mask = torch.zeros((batch, max_len), dtype=torch.bool, device=fused.device)
    for b, ans in enumerate(answers):
        if len(ans):
            reps[b, : len(ans)] = ans.reps
            mask[b, : len(ans)] = True
    return reps, mask


def load_generated(path: str | Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
