import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from mdst.config import ModelConfig, SynthConfig
from mdst.data import write_feature_store
from mdst.model import MDSTModel
from mdst.synth import corpus_to_visdial_json, dense_annotations_json, generate_corpus, save_worlds
from mdst.vocab import Vocabulary

import json


def tiny_model(vocab_size=24, d_model=8, n_heads=2, n_layers=1, ffn_dim=16,
               d_raw=6, n_objects=3, dropout=0.0, double=True, seed=0,
               **kwargs) -> MDSTModel:
    torch.manual_seed(seed)
    cfg = ModelConfig(d_model=d_model, n_heads=n_heads, n_layers=n_layers,
                      ffn_dim=ffn_dim, vocab_size=vocab_size, d_raw=d_raw,
                      n_objects=n_objects, dropout=dropout, **kwargs)
    model = MDSTModel(cfg)
    model.eval()
    return model.double() if double else model


def small_vocab(extra=()) -> Vocabulary:
    words = ["is", "there", "a", "dog", "cat", "ball", "what", "color", "it",
             "?", "yes", "no", "red", "blue", "the", "sunny", *extra]
    return Vocabulary(tokens=words)


@pytest.fixture(scope="session")
def synth_data_dir(tmp_path_factory) -> Path:
    """A small synthetic data root in the CLI layout."""
    root = tmp_path_factory.mktemp("synthdata")
    cfg = SynthConfig(n_dialogs=20, n_rounds=4, seed=11)
    for split, (n, seed) in {"train": (20, 11), "val": (8, 12)}.items():
        corpus, feats, worlds = generate_corpus(cfg, split=split, n_dialogs=n,
                                                seed=seed)
        (root / f"{split}.json").write_text(json.dumps(corpus_to_visdial_json(corpus)))
        write_feature_store(root / f"features_{split}", feats)
        save_worlds(worlds, corpus.records, root / f"worlds_{split}.json")
        (root / f"dense_{split}.json").write_text(
            json.dumps(dense_annotations_json(corpus)))
    return root


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
