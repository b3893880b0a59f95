"""Answer-quality judging: joint answer accuracy and average answer length.

Synthetic data is judged automatically against the world oracle with
normalized string matching (lowercase, punctuation stripped, digits
canonicalized to number words). Real data is never auto-judged; verdicts come
from a human-judgment CSV import instead.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError
from .synth import NUMBER_WORDS, SyntheticWorld
from .vocab import tokenize_text

_DIGIT_WORDS = {str(i): w for i, w in enumerate(NUMBER_WORDS)}


def normalize_answer(text: str) -> str:
    """Canonical comparison form: lowercase content tokens with digits mapped
    to number words; punctuation-only tokens are dropped."""
    tokens = []
    for tok in tokenize_text(text):
        if not any(ch.isalnum() for ch in tok):
            continue
        tokens.append(_DIGIT_WORDS.get(tok, tok))
    return " ".join(tokens)


def content_length(text: str) -> int:
    """Number of content tokens (punctuation-only tokens excluded)."""
    return sum(1 for tok in tokenize_text(text)
               if any(ch.isalnum() for ch in tok))


@dataclass
class JudgedRound:
    question: str
    generated: str
    gold: str
    verdict: bool


@dataclass
class JudgedDialog:
    image_id: int | str
    rounds: list[JudgedRound] = field(default_factory=list)
    provenance: str = "oracle"   # "oracle" or "human-import"


def judge_with_oracle(generated: list[dict],
                      worlds: dict) -> list[JudgedDialog]:
    """Judge generated dialog rows ({image_id, round, question, answer,
    gt_answer}) against the synthetic worlds' oracle."""
    by_image: dict = {}
    for row in sorted(generated, key=lambda r: (str(r["image_id"]), r["round"])):
        by_image.setdefault(row["image_id"], []).append(row)
    judged = []
    for image_id, rows in by_image.items():
        world: SyntheticWorld | None = worlds.get(image_id)
        if world is None:
            raise ContractError(f"no synthetic world for image {image_id!r}")
        history: list[str] = []
        dialog = JudgedDialog(image_id=image_id, provenance="oracle")
        for row in rows:
            expected = world.answer(row["question"], history)
            verdict = normalize_answer(row["answer"]) == normalize_answer(expected)
            dialog.rounds.append(JudgedRound(question=row["question"],
                                             generated=row["answer"],
                                             gold=expected, verdict=verdict))
            history.append(row["question"])
        judged.append(dialog)
    return judged


def judge_with_human_csv(generated: list[dict], csv_path: str | Path) -> list[JudgedDialog]:
    """Join generated rows with an imported human-verdict CSV
    (columns: image_id, round, verdict in {1,0})."""
    verdicts: dict = {}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (str(row["image_id"]), int(row["round"]))
            verdicts[key] = row["verdict"].strip() == "1"
    by_image: dict = {}
    for row in sorted(generated, key=lambda r: (str(r["image_id"]), r["round"])):
        by_image.setdefault(row["image_id"], []).append(row)
    judged = []
    for image_id, rows in by_image.items():
        dialog = JudgedDialog(image_id=image_id, provenance="human-import")
        for row in rows:
            key = (str(image_id), int(row["round"]))
            if key not in verdicts:
                raise ContractError(
                    f"missing human verdict for image {image_id} round {row['round']}")
            dialog.rounds.append(JudgedRound(question=row["question"],
                                             generated=row["answer"],
                                             gold=row.get("gt_answer", ""),
                                             verdict=verdicts[key]))
        judged.append(dialog)
    return judged


def compute_jacc_avglen(judged: list[JudgedDialog]) -> tuple[float, float]:
    """JACC = 100 * correct / total generated QA pairs; AvgLen = mean content
    token count of the generated answers."""
    total = sum(len(d.rounds) for d in judged)
    if total == 0:
        raise ContractError("no judged rounds")
    for dialog in judged:
        for rnd in dialog.rounds:
            if rnd.verdict is None:
                raise ContractError(
                    f"round without verdict in dialog {dialog.image_id}")
    correct = sum(rnd.verdict for d in judged for rnd in d.rounds)
    lengths = [content_length(rnd.generated) for d in judged for rnd in d.rounds]
    jacc = 100.0 * correct / total
    avg_len = sum(lengths) / len(lengths)
    return jacc, avg_len


def per_round_breakdown(judged: list[JudgedDialog]) -> list[dict]:
    """Accuracy per round index, for the judge report."""
    buckets: dict[int, list[bool]] = {}
    for dialog in judged:
        for i, rnd in enumerate(dialog.rounds):
            buckets.setdefault(i + 1, []).append(rnd.verdict)
    return [{"round": r, "n": len(v), "accuracy": sum(v) / len(v)}
            for r, v in sorted(buckets.items())]
