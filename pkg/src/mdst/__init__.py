"""Multi-round dialogue state tracking for visual dialog.

Library surface: data loading and synthetic worlds (`data`, `synth`), the
model stack (`state`, `encoder`, `qgds`, `ader`, `pds`, `model`), training and
evaluation (`training`, `generation`, `metrics`, `judge`), and the `mdst` CLI.
"""

__version__ = "0.1.0"

from .config import ModelConfig, SynthConfig, TrainConfig, paper_model_config
from .data import DialogCorpus, DialogRecord, DialogRound, FeatureStore, load_visdial
from .errors import MdstError
from .model import MDSTModel
from .vocab import Vocabulary, build_vocabulary

__all__ = [
    "ModelConfig", "SynthConfig", "TrainConfig", "paper_model_config",
    "DialogCorpus", "DialogRecord", "DialogRound", "FeatureStore",
    "load_visdial", "MdstError", "MDSTModel", "Vocabulary",
    "build_vocabulary", "__version__",
]
