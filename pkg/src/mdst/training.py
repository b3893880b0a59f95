"""Training loop and ranking evaluation.

Training teacher-forces each dialog: per round the question is encoded,
grounded in the current dialogue state (or fused through the baseline
attentions when grounding is ablated), scored by the enabled heads, and the
gold answer is written back into the state before the next round. Gradients
flow through the whole dialog unless truncation is requested. The optimizer
is Adamax with a piecewise-linear schedule: zero to the peak rate over the
warmup fraction of steps, then linearly down to the final rate.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .ader import rank_of_candidate
from .checkpoint import save_checkpoint
from .config import ModelConfig, TrainConfig, config_to_dict
from .data import DialogCorpus, DialogRecord, FeatureStore
from .encoder import TokenSequence, pad_batch, tokenize
from .errors import ContractError, TrainingDiverged
from .metrics import MetricsReport, aggregate_report, compute_ndcg
from .model import MDSTModel
from .qgds import _mask_rows
from .vocab import Vocabulary, build_vocabulary

logger = logging.getLogger(__name__)


def lr_at(step: int, total_steps: int, peak: float, warmup_fraction: float,
          final: float) -> float:
    """Piecewise-linear schedule over steps 0..total_steps-1: 0 -> peak over
    the warmup fraction, then peak -> final. Continuous with exactly one
    breakpoint."""
    if total_steps <= 1:
        return peak
    progress = step / (total_steps - 1)
    if warmup_fraction > 0 and progress <= warmup_fraction:
        return peak * progress / warmup_fraction
    return peak + (final - peak) * (progress - warmup_fraction) / (1.0 - warmup_fraction)


# ---------------------------------------------------------------------------
# Collation
# ---------------------------------------------------------------------------

@dataclass
class RoundBatch:
    questions: list[str]
    answers: list[str | None]
    q_ids: torch.Tensor
    q_mask: torch.Tensor
    gold_ids: torch.Tensor | None
    gold_mask: torch.Tensor | None
    qa_ids: torch.Tensor | None
    qa_mask: torch.Tensor | None
    cand_ids: torch.Tensor | None = None
    cand_mask: torch.Tensor | None = None
    gt_index: list[int | None] = field(default_factory=list)
    relevance: list[list[float] | None] = field(default_factory=list)
    has_candidates: bool = False


@dataclass
class DialogBatch:
    image_ids: list
    records: list[DialogRecord]
    features: torch.Tensor          # (B, N, d_raw)
    caption_ids: torch.Tensor
    caption_mask: torch.Tensor
    rounds: list[RoundBatch]

    def encode_all(self, text_encoder):
        """One encoder pass over the caption and every round's question
        (their representations are state-independent); returns
        (caption reps, per-round question reps). Padding is unified across
        rounds, which masked attention makes observationally equivalent."""
        batch = self.caption_ids.shape[0]
        groups = [(self.caption_ids, self.caption_mask)]
        groups += [(rb.q_ids, rb.q_mask) for rb in self.rounds]
        length = max(ids.shape[1] for ids, _ in groups)
        from .vocab import PAD
        ids = torch.full((len(groups) * batch, length), PAD,
                         dtype=torch.long, device=self.caption_ids.device)
        mask = torch.zeros((len(groups) * batch, length), dtype=torch.bool,
                           device=self.caption_ids.device)
        for g, (gids, gmask) in enumerate(groups):
            ids[g * batch : (g + 1) * batch, : gids.shape[1]] = gids
            mask[g * batch : (g + 1) * batch, : gmask.shape[1]] = gmask
        reps = text_encoder(ids, mask)
        cap_reps = reps[:batch]
        q_reps = [reps[(t + 1) * batch : (t + 2) * batch]
                  for t in range(len(self.rounds))]
        q_masks = [mask[(t + 1) * batch : (t + 2) * batch]
                   for t in range(len(self.rounds))]
        return cap_reps, mask[:batch], q_reps, q_masks


class Collator:
    """Tokenizes and batches dialog records; caches token sequences and
    feature matrices."""

    def __init__(self, vocab: Vocabulary, model_cfg: ModelConfig,
                 features: FeatureStore, device: str = "cpu"):
        self.vocab = vocab
        self.cfg = model_cfg
        self.features = features
        self.device = device
        self._seq_cache: dict[tuple[str, int], TokenSequence] = {}
        self._feat_cache: dict = {}

    def seq(self, text: str, max_len: int) -> TokenSequence:
        key = (text, max_len)
        if key not in self._seq_cache:
            self._seq_cache[key] = tokenize(text, self.vocab, max_len)
        return self._seq_cache[key]

    def feature_matrix(self, image_id) -> np.ndarray:
        if image_id not in self._feat_cache:
            self._feat_cache[image_id] = self.features.load(image_id)
        return self._feat_cache[image_id]

    def _pad(self, seqs: list[TokenSequence]):
        return pad_batch(seqs, device=self.device)

    def dialog_batch(self, records: list[DialogRecord], n_rounds: int,
                     with_candidates: bool = False) -> DialogBatch:
        feats = np.stack([self.feature_matrix(r.image_id) for r in records])
        features = torch.from_numpy(feats).to(self.device, dtype=torch.float32)
        cap_ids, cap_mask = self._pad(
            [self.seq(r.caption, self.cfg.max_len) for r in records])
        rounds = []
        for t in range(n_rounds):
            turns = [r.rounds[t] for r in records]
            q_ids, q_mask = self._pad(
                [self.seq(turn.question, self.cfg.max_len) for turn in turns])
            gold_ids = gold_mask = None
            if all(turn.answer is not None for turn in turns):
                gold_ids, gold_mask = self._pad(
                    [self.seq(turn.answer, self.cfg.max_answer_len + 2)
                     for turn in turns])
            qa_ids = qa_mask = None
            if gold_ids is not None:
                qa_ids, qa_mask = self._pad(
                    [self.seq(f"{turn.question} {turn.answer}", self.cfg.max_len)
                     for turn in turns])
            rb = RoundBatch(
                questions=[turn.question for turn in turns],
                answers=[turn.answer for turn in turns],
                q_ids=q_ids, q_mask=q_mask,
                gold_ids=gold_ids, gold_mask=gold_mask,
                qa_ids=qa_ids, qa_mask=qa_mask,
                gt_index=[turn.gt_index for turn in turns],
                relevance=[turn.relevance for turn in turns],
            )
            if with_candidates and all(turn.candidates is not None for turn in turns):
                flat = [self.seq(c, self.cfg.max_len)
                        for turn in turns for c in turn.candidates]
                ids, mask = self._pad(flat)
                n_cand = len(turns[0].candidates)
                rb.cand_ids = ids.view(len(records), n_cand, -1)
                rb.cand_mask = mask.view(len(records), n_cand, -1)
                rb.has_candidates = True
            rounds.append(rb)
        return DialogBatch(image_ids=[r.image_id for r in records],
                           records=records, features=features,
                           caption_ids=cap_ids, caption_mask=cap_mask,
                           rounds=rounds)


def bucket_records(records: list[DialogRecord], batch_size: int,
                   rng: np.random.Generator | None = None,
                   key=lambda r: r.n_answerable):
    """Group records by round count and chunk into batches; optionally
    shuffles records within buckets and the batch order."""
    buckets: dict[int, list[DialogRecord]] = {}
    for rec in records:
        k = key(rec)
        if k > 0:
            buckets.setdefault(k, []).append(rec)
    batches: list[tuple[int, list[DialogRecord]]] = []
    for k in sorted(buckets):
        items = buckets[k]
        if rng is not None:
            items = [items[i] for i in rng.permutation(len(items))]
        for i in range(0, len(items), batch_size):
            batches.append((k, items[i : i + batch_size]))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


# ---------------------------------------------------------------------------
# Shared forward machinery
# ---------------------------------------------------------------------------

class DialogContext:
    """Per-batch dialog trajectory; hides the full-model vs baseline split.

    The full model carries the aligned state <O, S>; the baseline carries the
    growing list of raw history token embeddings instead.
    """

    def __init__(self, model: MDSTModel, batch: DialogBatch,
                 truncate_state_grad: bool = False,
                 cap_reps: torch.Tensor | None = None,
                 cap_mask: torch.Tensor | None = None):
        self.model = model
        self.truncate = truncate_state_grad
        self.O = model.vision_rows(batch.features)
        self.S = model.zero_language_states(self.O)
        self.history: list[torch.Tensor] = []
        self.history_masks: list[torch.Tensor] = []
        self.t = 0
        if cap_reps is None:
            cap_mask = batch.caption_mask
            cap_reps = model.text_encoder(batch.caption_ids, cap_mask)
        if model.config.use_qgds_pds:
            grounded = model.qgds.ground(cap_reps, self.S, self.O, cap_mask)
            h = _mask_rows(cap_reps, cap_mask)
            _, self.S = model.pds.update_language_states(
                h, grounded.dq_l, self.S, self.O, cap_mask)
            self.t = 1
        else:
            self.history.append(cap_reps)
            self.history_masks.append(cap_mask)

    def fuse_question(self, q_reps: torch.Tensor, q_mask: torch.Tensor):
        """Returns (fused, grounded or None)."""
        if self.model.config.use_qgds_pds:
            grounded = self.model.qgds.ground(q_reps, self.S, self.O, q_mask)
            return grounded.fused, grounded
        history = torch.cat(self.history, dim=1) if self.history else None
        history_mask = (torch.cat(self.history_masks, dim=1)
                        if self.history_masks else None)
        fused = self.model.history_baseline(q_reps, self.O, history,
                                            history_mask, q_mask)
        return fused, None

    def absorb_round(self, q_reps, q_mask, grounded, answer_reps, answer_mask,
                     qa_reps=None, qa_mask=None):
        """Write the finished round back: PDS update for the full model,
        history append for the baseline."""
        if self.model.config.use_qgds_pds:
            if self.truncate:
                self.S = self.S.detach()
            fusion = self.model.pds.fuse_qa_pair(q_reps, grounded.dq_l,
                                                 answer_reps, answer_mask, q_mask)
            _, self.S = self.model.pds.update_language_states(
                fusion.h, grounded.dq_l, self.S, self.O, q_mask)
        else:
            if qa_reps is not None:
                if self.truncate:
                    qa_reps = qa_reps.detach()
                self.history.append(qa_reps)
                self.history_masks.append(qa_mask)
        self.t += 1


def _candidate_scores(model: MDSTModel, fused, q_mask, cand_ids, cand_mask,
                      chunk: int = 512) -> torch.Tensor:
    """(B, n_cand) dot-product scores; candidate encoding is chunked to bound
    peak memory."""
    b, n_cand, length = cand_ids.shape
    flat_ids = cand_ids.reshape(b * n_cand, length)
    flat_mask = cand_mask.reshape(b * n_cand, length)
    vecs = []
    for i in range(0, flat_ids.shape[0], chunk):
        vecs.append(model.ader.candidates.encode_pooled(
            flat_ids[i : i + chunk], flat_mask[i : i + chunk],
            model.config.pooling))
    cand_vecs = torch.cat(vecs, dim=0).view(b, n_cand, -1)
    from .ader import pool_tokens
    q_vec = pool_tokens(fused, q_mask, model.config.pooling)
    return torch.bmm(cand_vecs, q_vec.unsqueeze(-1)).squeeze(-1)


def dialog_batch_loss(model: MDSTModel, batch: DialogBatch, cfg: TrainConfig):
    """Summed round losses for one batch of dialogs (teacher-forced)."""
    cap_reps, cap_mask, q_reps_all, q_masks = batch.encode_all(model.text_encoder)
    ctx = DialogContext(model, batch, cfg.truncate_state_grad,
                        cap_reps=cap_reps, cap_mask=cap_mask)
    total = None
    for t, rb in enumerate(batch.rounds):
        if rb.gold_ids is None:
            break
        q_reps, q_mask = q_reps_all[t], q_masks[t]
        fused, grounded = ctx.fuse_question(q_reps, q_mask)
        out = model.ader.decoder.teacher_forward(fused, q_mask,
                                                 rb.gold_ids, rb.gold_mask)
        round_loss = 0.0
        if cfg.generative:
            round_loss = round_loss + out["nll_sum"].mean()
        if cfg.discriminative and rb.has_candidates:
            scores = _candidate_scores(model, fused, q_mask,
                                       rb.cand_ids, rb.cand_mask)
            targets = torch.tensor(rb.gt_index, device=scores.device)
            round_loss = round_loss + F.cross_entropy(scores, targets)
        total = round_loss if total is None else total + round_loss
        qa_reps = qa_mask = None
        if not model.config.use_qgds_pds:
            qa_reps = model.text_encoder(rb.qa_ids, rb.qa_mask)
            qa_mask = rb.qa_mask
        ctx.absorb_round(q_reps, q_mask, grounded,
                         out["answer_reps"], out["answer_mask"],
                         qa_reps, qa_mask)
    if total is None:
        raise ContractError("batch contains no answerable rounds")
    return total


@dataclass
class TrainResult:
    model: MDSTModel
    vocab: Vocabulary
    config: TrainConfig
    log_rows: list[dict]
    epoch_losses: list[float]
    checkpoint_paths: list[Path]
    final_path: Path | None


def resolve_model_config(cfg: TrainConfig, corpus: DialogCorpus,
                         features: FeatureStore, vocab: Vocabulary) -> ModelConfig:
    """Fill data-dependent fields (vocab size, feature width, object count)
    from the corpus and feature store."""
    first = corpus.records[0]
    mat = features.load(first.image_id)
    return replace(cfg.model, vocab_size=len(vocab),
                   d_raw=int(mat.shape[1]), n_objects=int(mat.shape[0]))


def train(cfg: TrainConfig, corpus: DialogCorpus, features: FeatureStore,
          out_dir: str | Path | None = None, device: str = "cpu",
          save_every_epoch: bool = True) -> TrainResult:
    """Run the full training recipe; returns the trained model and the
    step-level log. Raises TrainingDiverged (after writing a diagnostic dump
    when out_dir is set) if the loss becomes non-finite."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    vocab = corpus.vocab or build_vocabulary(corpus, min_freq=1)
    model_cfg = resolve_model_config(cfg, corpus, features, vocab)
    model = MDSTModel(model_cfg).to(device)
    model.train()
    collator = Collator(vocab, model_cfg, features, device)
    optimizer = torch.optim.Adamax(model.parameters(), lr=cfg.peak_lr)

    plan = bucket_records(corpus.records, cfg.batch_size)
    steps_per_epoch = len(plan)
    total_steps = cfg.epochs * steps_per_epoch
    if total_steps == 0:
        raise ContractError("empty training plan: corpus has no answerable dialogs")

    out_path = Path(out_dir) if out_dir is not None else None
    log_rows: list[dict] = []
    epoch_losses: list[float] = []
    ckpt_paths: list[Path] = []
    step = 0
    for epoch in range(cfg.epochs):
        batches = bucket_records(corpus.records, cfg.batch_size, rng=rng)
        running = []
        for n_rounds, records in batches:
            batch = collator.dialog_batch(records, n_rounds,
                                          with_candidates=cfg.discriminative)
            lr = lr_at(step, total_steps, cfg.peak_lr, cfg.warmup_fraction,
                       cfg.final_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            loss = dialog_batch_loss(model, batch, cfg)
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                if out_path is not None:
                    out_path.mkdir(parents=True, exist_ok=True)
                    dump = {"step": step, "epoch": epoch, "lr": lr,
                            "loss": loss_val,
                            "recent": log_rows[-20:]}
                    (out_path / "divergence.json").write_text(json.dumps(dump, indent=2))
                raise TrainingDiverged(f"non-finite loss at step {step}")
            loss.backward()
            optimizer.step()
            log_rows.append({"step": step, "epoch": epoch,
                             "loss": loss_val, "lr": lr})
            running.append(loss_val)
            if cfg.log_every and step % cfg.log_every == 0:
                logger.info("epoch %d step %d loss %.4f lr %.2e",
                            epoch, step, loss_val, lr)
            step += 1
        epoch_loss = float(np.mean(running))
        epoch_losses.append(epoch_loss)
        logger.info("epoch %d done: mean loss %.4f", epoch, epoch_loss)
        if out_path is not None and save_every_epoch:
            snapshot = {"epoch": epoch, "train_loss": epoch_loss,
                        "seed": cfg.seed}
            ckpt_paths.append(save_checkpoint(
                out_path / f"ckpt_epoch_{epoch:03d}.npz", model, vocab,
                extra=snapshot))

    final_path = None
    if out_path is not None:
        final_path = save_checkpoint(
            out_path / "ckpt_final.npz", model, vocab,
            extra={"epochs": cfg.epochs,
                   "train_loss": epoch_losses[-1] if epoch_losses else None,
                   "train_config": config_to_dict(cfg)})
    model.eval()
    return TrainResult(model=model, vocab=vocab, config=cfg, log_rows=log_rows,
                       epoch_losses=epoch_losses, checkpoint_paths=ckpt_paths,
                       final_path=final_path)


# ---------------------------------------------------------------------------
# Ranking evaluation
# ---------------------------------------------------------------------------

def evaluate_ranking(model: MDSTModel, vocab: Vocabulary, corpus: DialogCorpus,
                     features: FeatureStore, device: str = "cpu",
                     batch_size: int = 32) -> MetricsReport:
    """Score the 100-candidate lists round by round with gold-history state
    updates, then aggregate MRR / R@k / Mean / NDCG. Records lacking candidate
    lists are skipped and counted."""
    model.eval()
    collator = Collator(vocab, model.config, features, device)
    with_cand = [r for r in corpus.records
                 if any(rnd.candidates is not None for rnd in r.rounds)]
    n_skipped = len(corpus.records) - len(with_cand)
    if not with_cand:
        raise ContractError("no records with candidate lists; nothing to rank")
    entries: list[dict] = []
    with torch.no_grad():
        for n_rounds, records in bucket_records(with_cand, batch_size):
            batch = collator.dialog_batch(records, n_rounds, with_candidates=True)
            cap_reps, cap_mask, q_reps_all, q_masks = batch.encode_all(
                model.text_encoder)
            ctx = DialogContext(model, batch, cap_reps=cap_reps,
                                cap_mask=cap_mask)
            for t, rb in enumerate(batch.rounds):
                q_reps, q_mask = q_reps_all[t], q_masks[t]
                fused, grounded = ctx.fuse_question(q_reps, q_mask)
                if rb.has_candidates:
                    scores = _candidate_scores(model, fused, q_mask,
                                               rb.cand_ids, rb.cand_mask)
                    for b, image_id in enumerate(batch.image_ids):
                        if rb.gt_index[b] is None:
                            continue
                        rank = rank_of_candidate(scores[b], rb.gt_index[b])
                        entry = {"image_id": image_id, "round": t + 1,
                                 "rank": rank}
                        rel = rb.relevance[b]
                        if rel is not None and any(v > 0 for v in rel):
                            order = torch.argsort(scores[b], descending=True,
                                                  stable=True).tolist()
                            entry["ndcg"] = compute_ndcg(order, rel)
                        entries.append(entry)
                if rb.gold_ids is None:
                    break
                out = model.ader.decoder.teacher_forward(fused, q_mask,
                                                         rb.gold_ids, rb.gold_mask)
                qa_reps = qa_text_mask = None
                if not model.config.use_qgds_pds:
                    qa_reps = model.text_encoder(rb.qa_ids, rb.qa_mask)
                    qa_text_mask = rb.qa_mask
                ctx.absorb_round(q_reps, q_mask, grounded,
                                 out["answer_reps"], out["answer_mask"],
                                 qa_reps, qa_text_mask)
    return aggregate_report(entries, n_skipped=n_skipped)
