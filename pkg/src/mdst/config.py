"""Model, training, and synthetic-world configuration.

Config precedence for the CLI is defaults < config file < flags; the resolved
snapshot is persisted in the run manifest of every artifact directory.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

CHECKPOINT_VERSION = 1

DEFAULT_CATEGORIES = ["ball", "dog", "cat", "car", "tree", "bird", "bike",
                      "lamp", "cup", "hat", "fork", "sock", "boat", "drum"]
DEFAULT_COLORS = ["red", "blue", "green", "yellow", "black", "white",
                  "purple", "orange", "pink"]
DEFAULT_SIZES = ["small", "medium", "large", "tiny"]
DEFAULT_POSITIONS = ["left", "right", "top", "bottom", "center"]
DEFAULT_NAMES = ["max", "rex", "sam", "leo", "ann", "ben", "kim", "joe",
                 "amy", "tom", "ivy", "dan"]


@dataclass
class ModelConfig:
    """Architecture hyperparameters and ablation switches.

    The desk defaults (2 layers, 4 heads, d=64) are sized for CPU runs; the
    full-scale configuration from the original experiments is available via
    :func:`paper_model_config`.
    """

    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 256
    dropout: float = 0.1
    max_len: int = 40
    max_answer_len: int = 20
    vocab_size: int = 0          # filled in once the vocabulary is built
    d_raw: int = 2048            # raw region feature width
    n_objects: int = 36          # N real objects per image
    layer_norm_eps: float = 1e-5
    pooling: str = "mean"        # "mean" or "first", for the discriminative dot product
    use_qgds_pds: bool = True
    use_switching: bool = True
    use_pseudo_objects: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")
        if self.pooling not in ("mean", "first"):
            raise ConfigError(f"pooling must be 'mean' or 'first', got {self.pooling!r}")

    @property
    def n_rows(self) -> int:
        """Number of state rows: N plus the NULL/ALL pseudo-objects when enabled."""
        return self.n_objects + 2 if self.use_pseudo_objects else self.n_objects


def paper_model_config(**overrides) -> ModelConfig:
    """Full-scale configuration: 12 layers, 12 heads, 768-wide hidden states."""
    base = dict(d_model=768, n_heads=12, n_layers=12, ffn_dim=3072,
                d_raw=2048, n_objects=36)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class TrainConfig:
    """Optimization schedule and head selection.

    Defaults mirror the published recipe: Adamax, peak learning rate 1e-3
    decaying linearly to 5e-5 after a warmup covering 20% of the optimizer
    steps, 20 epochs at batch size 32.
    """

    epochs: int = 20
    batch_size: int = 32
    peak_lr: float = 1e-3
    final_lr: float = 5e-5
    warmup_fraction: float = 0.2
    seed: int = 0
    generative: bool = True
    discriminative: bool = False
    truncate_state_grad: bool = False
    log_every: int = 50
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(
                f"warmup_fraction must be in [0,1), got {self.warmup_fraction}"
            )
        if self.final_lr > self.peak_lr:
            raise ConfigError(
                f"final_lr={self.final_lr} must not exceed peak_lr={self.peak_lr}"
            )
        if not (self.generative or self.discriminative):
            raise ConfigError("at least one of generative/discriminative must be enabled")


@dataclass
class SynthConfig:
    """Synthetic grounded-dialog world generation parameters."""

    n_objects: int = 3
    n_rounds: int = 5
    n_dialogs: int = 100
    categories: list[str] = field(default_factory=lambda: list(DEFAULT_CATEGORIES))
    colors: list[str] = field(default_factory=lambda: list(DEFAULT_COLORS))
    sizes: list[str] = field(default_factory=lambda: list(DEFAULT_SIZES))
    positions: list[str] = field(default_factory=lambda: list(DEFAULT_POSITIONS))
    names: list[str] = field(default_factory=lambda: list(DEFAULT_NAMES))
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_objects < 1 or self.n_rounds < 1:
            raise ConfigError("synthetic config requires >= 1 object and >= 1 round")
        if len(self.categories) < self.n_objects:
            raise ConfigError(
                f"category pool ({len(self.categories)}) smaller than requested "
                f"distinct objects ({self.n_objects})"
            )
        if len(self.colors) < self.n_objects:
            raise ConfigError(
                f"color pool ({len(self.colors)}) smaller than requested "
                f"distinct objects ({self.n_objects})"
            )

    @property
    def d_raw(self) -> int:
        """Raw feature width: one-hot blocks for each attribute pool."""
        return (len(self.categories) + len(self.colors)
                + len(self.sizes) + len(self.positions))


_LIST_KEYS = {"categories", "colors", "sizes", "positions", "names"}
_SYNTH_KEY_ALIASES = {"objects": "n_objects", "rounds": "n_rounds", "dialogs": "n_dialogs"}


def load_synth_config(path: str | Path, **overrides) -> SynthConfig:
    """Parse the key-value synthetic config file.

    Format: one ``key = value`` pair per line, ``#`` comments, pools given as
    comma-separated token lists. Recognized keys: objects, rounds, dialogs,
    categories, colors, sizes, positions, noise_sigma, seed.
    """
    values: dict = {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"synthetic config file not found: {path}")
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = _SYNTH_KEY_ALIASES.get(key, key)
        if key in _LIST_KEYS:
            values[key] = [tok.strip() for tok in raw.split(",") if tok.strip()]
        elif key in ("noise_sigma",):
            values[key] = float(raw)
        elif key in ("n_objects", "n_rounds", "n_dialogs", "seed"):
            values[key] = int(raw)
        else:
            raise ConfigError(f"{path}:{lineno}: unknown synthetic config key {key!r}")
    values.update(overrides)
    return SynthConfig(**values)


def _dataclass_from_dict(cls, data: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def train_config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    model = data.pop("model", {})
    cfg = _dataclass_from_dict(TrainConfig, data)
    if isinstance(model, dict):
        cfg.model = _dataclass_from_dict(ModelConfig, model)
    return cfg


def load_train_config(path: str | Path) -> TrainConfig:
    """Load a JSON training config; missing keys fall back to defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"train config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"train config {path} is not valid JSON: {exc}") from exc
    return train_config_from_dict(data)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
