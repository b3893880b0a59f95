"""Vocabulary and tokenization.

Tokenization scheme (declared, since no canonical one exists for this task):
lowercase the text, then split into runs of word characters (letters, digits,
apostrophes) and single punctuation marks. Sequences are framed with BOS/EOS
and out-of-vocabulary tokens map to UNK.

Reserved ids:
    PAD = 0   padding for fixed-length batches
    BOS = 1   beginning of sequence
    EOS = 2   end of sequence
    UNK = 3   unknown / rare token
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from pathlib import Path

from .errors import CorpusFormatError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>"]

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\w\s]")


def tokenize_text(text: str) -> list[str]:
    """Lowercase and split into word/punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


class Vocabulary:
    """Bijective token<->id map over non-reserved entries."""

    def __init__(self, tokens: list[str] | None = None):
        self.id_to_token: list[str] = list(RESERVED)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens or []:
            self.add(tok)

    def add(self, token: str) -> int:
        if token in self.token_to_id:
            return self.token_to_id[token]
        idx = len(self.id_to_token)
        self.id_to_token.append(token)
        self.token_to_id[token] = idx
        return idx

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.encode_token(t) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    @property
    def content_tokens(self) -> list[str]:
        return self.id_to_token[len(RESERVED):]

    def to_json(self) -> dict:
        return {"tokens": self.content_tokens}

    @classmethod
    def from_json(cls, data: dict) -> "Vocabulary":
        return cls(tokens=data["tokens"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CorpusFormatError(f"cannot read vocabulary from {path}: {exc}") from exc
        return cls.from_json(data)


def build_vocabulary(corpus, min_freq: int = 1) -> Vocabulary:
    """Assign ids to every token with frequency >= min_freq in the corpus.

    Counts run over captions, questions, and answers of every record. Tokens
    below the threshold fall back to UNK at encode time.
    """
    if not corpus.records:
        raise CorpusFormatError("cannot build a vocabulary from an empty corpus")
    counts: Counter = Counter()
    for record in corpus.records:
        counts.update(tokenize_text(record.caption))
        for rnd in record.rounds:
            counts.update(tokenize_text(rnd.question))
            if rnd.answer is not None:
                counts.update(tokenize_text(rnd.answer))
            for cand in rnd.candidates or []:
                counts.update(tokenize_text(cand))
    vocab = Vocabulary()
    for token, freq in sorted(counts.items()):
        if freq >= min_freq:
            vocab.add(token)
    logger.info("vocabulary built: %d tokens (min_freq=%d)", len(vocab), min_freq)
    return vocab
