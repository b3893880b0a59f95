"""Unified checkpoint format.

One ``.npz`` file holds every parameter as a 32-bit float array under its
hierarchical ``/``-separated key, plus a ``__header__`` entry: the UTF-8 bytes
of a JSON object with the embedding width ``d``, object count ``N``, format
``version``, the full model config, and the vocabulary. Checkpoints are
self-contained: loading rebuilds the model and vocabulary without external
files.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .config import CHECKPOINT_VERSION, ModelConfig
from .errors import CorpusFormatError
from .model import MDSTModel
from .vocab import Vocabulary

HEADER_KEY = "__header__"


def save_checkpoint(path: str | Path, model: MDSTModel, vocab: Vocabulary,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    cfg = model.config
    header = {
        "version": CHECKPOINT_VERSION,
        "d": cfg.d_model,
        "N": cfg.n_objects,
        "d_raw": cfg.d_raw,
        "model": asdict(cfg),
        "vocab": vocab.to_json(),
        "extra": extra or {},
    }
    arrays = {
        name.replace(".", "/"): tensor.detach().cpu().to(torch.float32).numpy()
        for name, tensor in model.state_dict().items()
    }
    arrays[HEADER_KEY] = np.frombuffer(json.dumps(header).encode("utf-8"),
                                       dtype=np.uint8)
    if path.suffix != ".npz":
        path = path.parent / (path.name + ".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)
    return path


def read_header(path: str | Path) -> dict:
    with np.load(Path(path)) as data:
        if HEADER_KEY not in data.files:
            raise CorpusFormatError(f"{path} is not a model checkpoint (no header)")
        return json.loads(bytes(data[HEADER_KEY].tobytes()).decode("utf-8"))


def load_checkpoint(path: str | Path):
    """Rebuild (model, vocab, header) from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise CorpusFormatError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        header = read_header(path)
        config = ModelConfig(**header["model"])
        vocab = Vocabulary.from_json(header["vocab"])
        model = MDSTModel(config)
        state = {
            key.replace("/", "."): torch.from_numpy(np.array(data[key]))
            for key in data.files if key != HEADER_KEY
        }
    model.load_state_dict(state)
    model.eval()
    return model, vocab, header
