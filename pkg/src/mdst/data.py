"""Corpus and region-feature loading.

Two external formats are consumed here:

* VisDial v1.0 JSON: top-level ``data`` holding ``dialogs`` plus shared
  ``questions``/``answers`` string pools that rounds index into. Candidate
  lists, when a split provides them, have exactly 100 entries with a valid
  ground-truth index.
* Feature store: a directory of per-image binary matrices (row-major 32-bit
  little-endian floats) plus a ``manifest.json`` mapping
  ``image_id -> {file, n_objects, dim}``. Chosen over one monolithic file so
  stores load partially.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorpusFormatError, FeatureStoreError

logger = logging.getLogger(__name__)

N_CANDIDATES = 100


@dataclass
class DialogRound:
    question: str
    answer: str | None = None
    candidates: list[str] | None = None
    gt_index: int | None = None
    relevance: list[float] | None = None


@dataclass
class DialogRecord:
    image_id: int | str
    caption: str
    rounds: list[DialogRound]
    # VisDial test dialogs lack answers for later rounds; this counts the
    # rounds that carry one instead of padding fakes.
    n_answerable: int = 0

    def __post_init__(self):
        if not self.caption:
            raise CorpusFormatError(f"dialog {self.image_id}: empty caption")
        if not self.rounds:
            raise CorpusFormatError(f"dialog {self.image_id}: no rounds")
        self.n_answerable = sum(1 for r in self.rounds if r.answer is not None)


@dataclass
class DialogCorpus:
    split: str
    records: list[DialogRecord] = field(default_factory=list)
    vocab: object | None = None

    def __len__(self) -> int:
        return len(self.records)


def _validate_round(image_id, round_idx, rnd: DialogRound) -> None:
    if not rnd.question:
        raise CorpusFormatError(f"dialog {image_id} round {round_idx}: empty question")
    if rnd.answer is not None and not rnd.answer:
        raise CorpusFormatError(f"dialog {image_id} round {round_idx}: empty answer")
    if rnd.candidates is not None:
        if len(rnd.candidates) != N_CANDIDATES:
            raise CorpusFormatError(
                f"dialog {image_id} round {round_idx}: candidate list has "
                f"{len(rnd.candidates)} entries, expected {N_CANDIDATES}"
            )
        if rnd.gt_index is None or not 0 <= rnd.gt_index < N_CANDIDATES:
            raise CorpusFormatError(
                f"dialog {image_id} round {round_idx}: ground-truth index "
                f"{rnd.gt_index} outside [0,{N_CANDIDATES})"
            )
        if rnd.relevance is not None and len(rnd.relevance) != N_CANDIDATES:
            raise CorpusFormatError(
                f"dialog {image_id} round {round_idx}: relevance list has "
                f"{len(rnd.relevance)} entries, expected {N_CANDIDATES}"
            )


def _pool_lookup(pool: list[str], index, what: str, image_id, round_idx) -> str:
    if not isinstance(index, int) or not 0 <= index < len(pool):
        raise CorpusFormatError(
            f"dialog {image_id} round {round_idx}: {what} index {index!r} "
            f"out of range for pool of {len(pool)}"
        )
    return pool[index]


def load_visdial(path: str | Path, split: str) -> DialogCorpus:
    """Load a VisDial v1.0 JSON file, de-indexing rounds into strings."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise CorpusFormatError(f"cannot read corpus file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path} is not valid JSON: {exc}") from exc

    try:
        data = raw["data"]
        dialogs = data["dialogs"]
        questions = data["questions"]
        answers = data["answers"]
    except (KeyError, TypeError) as exc:
        raise CorpusFormatError(
            f"{path}: missing VisDial v1.0 structure (data/dialogs/questions/answers)"
        ) from exc

    records = []
    for dlg in dialogs:
        image_id = dlg.get("image_id")
        rounds = []
        for i, turn in enumerate(dlg.get("dialog", [])):
            question = _pool_lookup(questions, turn["question"], "question", image_id, i)
            answer = None
            if "answer" in turn and turn["answer"] is not None:
                answer = _pool_lookup(answers, turn["answer"], "answer", image_id, i)
            candidates = None
            gt_index = None
            if turn.get("answer_options") is not None:
                candidates = [
                    _pool_lookup(answers, opt, "candidate", image_id, i)
                    for opt in turn["answer_options"]
                ]
                gt_index = turn.get("gt_index")
            rnd = DialogRound(question=question, answer=answer,
                              candidates=candidates, gt_index=gt_index)
            _validate_round(image_id, i, rnd)
            rounds.append(rnd)
        records.append(DialogRecord(image_id=image_id,
                                    caption=dlg.get("caption", ""),
                                    rounds=rounds))
    logger.info("loaded %d dialogs from %s (%s split)", len(records), path, split)
    return DialogCorpus(split=split, records=records)


def attach_dense_relevance(corpus: DialogCorpus, path: str | Path) -> int:
    """Attach dense relevance annotations (VisDial dense-annotation format:
    a list of {image_id, round_id, gt_relevance}). Returns rounds annotated."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusFormatError(f"cannot read dense annotations {path}: {exc}") from exc
    by_image = {rec.image_id: rec for rec in corpus.records}
    attached = 0
    for entry in entries:
        rec = by_image.get(entry.get("image_id"))
        if rec is None:
            continue
        round_idx = entry.get("round_id", 1) - 1  # round_id is 1-based
        if not 0 <= round_idx < len(rec.rounds):
            raise CorpusFormatError(
                f"dense annotation for image {entry.get('image_id')}: "
                f"round_id {entry.get('round_id')} out of range"
            )
        relevance = entry.get("gt_relevance")
        rec.rounds[round_idx].relevance = [float(x) for x in relevance]
        _validate_round(rec.image_id, round_idx, rec.rounds[round_idx])
        attached += 1
    return attached


class FeatureStore:
    """Directory-backed store of per-image region feature matrices."""

    MANIFEST = "manifest.json"

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / self.MANIFEST
        if not manifest_path.exists():
            raise FeatureStoreError(f"feature store manifest not found: {manifest_path}")
        try:
            self.manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise FeatureStoreError(f"{manifest_path} is not valid JSON: {exc}") from exc

    def __contains__(self, image_id) -> bool:
        return str(image_id) in self.manifest

    def image_ids(self) -> list[str]:
        return list(self.manifest)

    def load(self, image_id) -> np.ndarray:
        """Return the N x D_raw float32 matrix for one image."""
        entry = self.manifest.get(str(image_id))
        if entry is None:
            raise FeatureStoreError(f"image id {image_id!r} not in feature store")
        n, dim = int(entry["n_objects"]), int(entry["dim"])
        if n < 1:
            raise FeatureStoreError(f"image {image_id}: n_objects must be >= 1, got {n}")
        path = self.root / entry["file"]
        try:
            flat = np.fromfile(path, dtype="<f4")
        except OSError as exc:
            raise FeatureStoreError(f"cannot read feature file {path}: {exc}") from exc
        if flat.size != n * dim:
            raise FeatureStoreError(
                f"image {image_id}: feature file holds {flat.size} floats, "
                f"expected {n}x{dim}"
            )
        mat = flat.reshape(n, dim)
        if not np.isfinite(mat).all():
            raise FeatureStoreError(f"image {image_id}: non-finite feature values")
        return mat


def write_feature_store(root: str | Path, features: dict) -> FeatureStore:
    """Write ``{image_id: matrix}`` as a feature store directory."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for image_id, mat in features.items():
        mat = np.asarray(mat, dtype=np.float32)
        if mat.ndim != 2:
            raise FeatureStoreError(f"image {image_id}: expected a 2-d matrix")
        fname = f"{image_id}.bin"
        mat.astype("<f4").tofile(root / fname)
        manifest[str(image_id)] = {
            "file": fname, "n_objects": int(mat.shape[0]), "dim": int(mat.shape[1]),
        }
    (root / FeatureStore.MANIFEST).write_text(json.dumps(manifest, indent=2))
    return FeatureStore(root)


def load_region_features(path: str | Path, image_id) -> np.ndarray:
    """One-shot lookup: open the store at ``path`` and load one image."""
    return FeatureStore(path).load(image_id)
