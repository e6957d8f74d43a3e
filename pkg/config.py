"""
config.py

Run configuration: flat `key = value` files with `#` comments.

Files are parsed with python-dotenv, every key maps to one field of one of the
section dataclasses below, and the assembled RunConfig writes itself back out
in the same format. The shipped default.cfg reproduces the published training
hyperparameters.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union, get_type_hints

import numpy as np
from dotenv import dotenv_values

from errors import ConfigError, StorageError
from losses import LossConfig
from optimizer import CLIP_MODES

logger = logging.getLogger(__name__)

REQUIRED_KEYS = (
    "batch_size",
    "trajectory_length",
    "velocity_range",
    "n_units",
    "mlp_layers",
    "sigma_x",
    "sigma_g",
    "lambda_sep",
    "lambda_inv",
    "lambda_cap",
    "learning_rate",
    "clip_value",
    "weight_decay",
    "accumulate_batches",
    "max_steps",
)

PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class ModelConfig:
    n_units: int = 128
    hidden_units: int = 256
    mlp_layers: int = 3
    train_g0: bool = False

    def __post_init__(self):
        if self.n_units < 1 or self.hidden_units < 1 or self.mlp_layers < 1:
            raise ValueError("n_units, hidden_units and mlp_layers must be positive")


@dataclass(frozen=True)
class DataConfig:
    """Training batches: B permutations of one T-step velocity sequence."""

    batch_size: int = 130
    trajectory_length: int = 60
    velocity_range: float = 0.15
    permutations: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.trajectory_length < 1:
            raise ValueError("batch_size and trajectory_length must be positive")
        if self.velocity_range <= 0:
            raise ValueError("velocity_range must be positive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-5
    clip_value: float = 0.1
    clip_mode: str = "value"
    weight_decay: float = 0.0
    accumulate_batches: int = 2
    max_steps: int = 2_000_000
    scheduler_factor: float = 0.5
    scheduler_patience: int = 1000
    scheduler_threshold: float = 1e-4
    min_lr: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 10_000
    log_every: int = 100
    precision: str = "float64"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_value <= 0:
            raise ValueError("clip_value must be positive")
        if self.clip_mode not in CLIP_MODES:
            raise ValueError(f"clip_mode must be one of {CLIP_MODES}")
        if self.accumulate_batches < 1:
            raise ValueError("accumulate_batches must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be positive")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass(frozen=True)
class EvalConfig:
    """
    Evaluation walks and ratemaps.

    eval_bin_size and eval_steps apply to a 2 m arena and scale with arena
    side (bins) and area (steps).
    """

    eval_arenas: Tuple[float, ...] = (2.0, 3.0, 4.0)
    eval_bin_size: float = 0.02
    eval_steps: int = 400_000
    eval_smoothness: float = 0.8
    eval_speed: float = 0.03
    min_occupancy: int = 10

    def __post_init__(self):
        if not self.eval_arenas or any(a <= 0 for a in self.eval_arenas):
            raise ValueError("eval_arenas must be a non-empty list of positive sides")
        if self.eval_bin_size <= 0 or self.eval_steps < 1:
            raise ValueError("eval_bin_size and eval_steps must be positive")
        if not 0 <= self.eval_smoothness < 1:
            raise ValueError("eval_smoothness must be in [0, 1)")


SECTIONS = (
    ("model", ModelConfig),
    ("data", DataConfig),
    ("loss", LossConfig),
    ("train", TrainConfig),
    ("eval", EvalConfig),
)


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; each field of each section is one config key."""

    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: str = "none"

    @staticmethod
    def key_index() -> Dict[str, Tuple[str, type]]:
        """Map every config key to (section name, field type)."""
        index: Dict[str, Tuple[str, type]] = {"ablation": ("", str)}
        for section, cls in SECTIONS:
            hints = get_type_hints(cls)
            for f in dataclasses.fields(cls):
                index[f.name] = (section, hints[f.name])
        return index

    @classmethod
    def from_mapping(cls, values: Dict[str, Optional[str]], require: bool = True) -> "RunConfig":
        """
        Build a config from raw string values.

        Args:
            values: Key to raw text value
            require: Whether the published hyperparameter keys must all be present

        Raises:
            ConfigError: naming the first unknown, missing or unparsable key
        """
        index = cls.key_index()
        for key in values:
            if key not in index:
                raise ConfigError(f"unknown config key: {key}")
        if require:
            for key in REQUIRED_KEYS:
                if key not in values:
                    raise ConfigError(f"missing config key: {key}")

        parsed: Dict[str, Dict[str, object]] = {name: {} for name, _ in SECTIONS}
        ablation = "none"
        for key, raw in values.items():
            section, kind = index[key]
            value = _parse_value(key, raw, kind)
            if section:
                parsed[section][key] = value
            else:
                ablation = value

        sections = {}
        for name, section_cls in SECTIONS:
            try:
                sections[name] = section_cls(**parsed[name])
            except ValueError as e:
                raise ConfigError(f"invalid {name} config: {e}") from e
        return cls(ablation=ablation, **sections)

    @classmethod
    def from_file(cls, path: Union[str, Path], require: bool = True) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = dotenv_values(path, interpolate=False)
        logger.debug("Loaded %d config keys from %s", len(values), path)
        return cls.from_mapping(dict(values), require=require)

    def with_overrides(self, **overrides) -> "RunConfig":
        """Return a copy with individual keys replaced (typed values)."""
        index = self.key_index()
        updates: Dict[str, Dict[str, object]] = {}
        top = {}
        for key, value in overrides.items():
            if key not in index:
                raise ConfigError(f"unknown config key: {key}")
            section, _ = index[key]
            if section:
                updates.setdefault(section, {})[key] = value
            else:
                top[key] = value
        try:
            sections = {name: replace(getattr(self, name), **vals) for name, vals in updates.items()}
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return replace(self, **sections, **top)

    def to_dict(self) -> Dict[str, object]:
        out: Dict[str, object] = {}
        for name, _ in SECTIONS:
            out.update(dataclasses.asdict(getattr(self, name)))
        out["ablation"] = self.ablation
        return out

    def to_text(self) -> str:
        """Flat `key = value` text that parses back to an equal config."""
        lines = ["# gridssl run configuration", f"ablation = {self.ablation}"]
        for name, _ in SECTIONS:
            lines.append("")
            lines.append(f"# {name}")
            for key, value in dataclasses.asdict(getattr(self, name)).items():
                lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.write_text(self.to_text(), encoding="utf-8")
        except OSError as e:
            raise StorageError(f"cannot write config {path}: {e}") from e
        return path


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(text)


def _parse_value(key: str, raw: Optional[str], kind) -> object:
    if raw is None or raw.strip() == "":
        raise ConfigError(f"config key {key} has no value")
    text = raw.strip()
    try:
        if kind is bool:
            return _parse_bool(text)
        if kind is int:
            as_float = float(text)
            if not as_float.is_integer():
                raise ValueError(text)
            return int(as_float)
        if kind is float:
            # "None" is how the published table writes a disabled weight decay
            return 0.0 if text.lower() == "none" else float(text)
        if kind is str:
            return text
        return tuple(float(part) for part in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse value {raw!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ABLATIONS: Dict[str, str] = {
    "no-capacity": "capacity loss removed (lambda_cap = 0)",
    "sigma-g-low": "neural length scale halved",
    "sigma-g-high": "neural length scale doubled",
    "no-separation": "separation loss removed (lambda_sep = 0)",
    "no-invariance": "invariance loss removed (lambda_inv = 0)",
    "no-permutation": "independent velocity sequences instead of permutations",
    "no-sigma-g": "separation kernel without sigma_g scaling (sigma_g = 1)",
    "no-coniso": "conformal isometry loss removed (lambda_coniso = 0)",
}


def apply_ablation(config: RunConfig, name: str) -> RunConfig:
    """Return `config` with one named ablation applied and recorded."""
    loss = config.loss
    if name == "no-capacity":
        changes = {"lambda_cap": 0.0}
    elif name == "sigma-g-low":
        changes = {"sigma_g": loss.sigma_g * 0.5}
    elif name == "sigma-g-high":
        changes = {"sigma_g": loss.sigma_g * 2.0}
    elif name == "no-separation":
        changes = {"lambda_sep": 0.0}
    elif name == "no-invariance":
        changes = {"lambda_inv": 0.0}
    elif name == "no-permutation":
        changes = {"permutations": False}
    elif name == "no-sigma-g":
        changes = {"sigma_g": 1.0}
    elif name == "no-coniso":
        changes = {"lambda_coniso": 0.0}
    else:
        raise ConfigError(f"unknown ablation: {name} (known: {', '.join(ABLATIONS)})")
    return config.with_overrides(ablation=name, **changes)


def parse_ablation_list(text: Optional[str]) -> List[str]:
    """Comma-separated ablation names; None selects all of them."""
    if text is None:
        return list(ABLATIONS)
    names = [part.strip() for part in text.split(",") if part.strip()]
    if not names:
        raise ConfigError("empty ablation list")
    for name in names:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation: {name} (known: {', '.join(ABLATIONS)})")
    return names


def worker_cap() -> int:
    """Upper bound on worker processes, from GRIDSSL_THREADS (default: CPU count)."""
    raw = os.getenv("GRIDSSL_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"GRIDSSL_THREADS must be an integer, got {raw!r}") from None
