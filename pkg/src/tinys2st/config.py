"""Experiment configuration: validation, TOML loading, config hashing.

The TOML schema is flat; every key is optional and overridable on the
command line:

    recipe = "multitask"        # scratch | encoder_pretrain_speech |
                                # encoder_pretrain_speech_text |
                                # decoder_pretrain | multitask | augment
    variant = "text_to_phoneme" # decoder_pretrain only, required there
    tau = 5.0                   # multitask / augment only, required there
    preset = "base"             # base | large
    seed = 0                    # model init, batch order, augmentation
    world_seed = 0              # corpus identity; rarely changed
    pretrain_steps = 1000
    finetune_steps = 1000
    batch_size = 8
    peak_lr = 3e-3
    warmup = 100
    freeze_lower_encoder = false
    out_dir = "runs/experiment"

Validation happens at construction, before any compute. The config hash
covers every field that changes the experiment's math (everything except
`out_dir`), so a resumed run can detect a checkpoint written under a
different configuration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

RECIPES = (
    "scratch",
    "encoder_pretrain_speech",
    "encoder_pretrain_speech_text",
    "decoder_pretrain",
    "multitask",
    "augment",
)
MT_VARIANTS = ("text_to_text", "text_to_phoneme", "phoneme_to_phoneme")
PRESET_NAMES = ("base", "large")

# Recipes whose pipeline starts with a pretraining stage, and what that
# stage trains. multitask and augment build on the speech+text encoder.
PRETRAIN_KIND = {
    "encoder_pretrain_speech": "w2v",
    "encoder_pretrain_speech_text": "mslam",
    "decoder_pretrain": "mt",
    "multitask": "mslam",
    "augment": "mslam",
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the CLI maps this to exit code 1."""


@dataclass(frozen=True)
class ExperimentConfig:
    recipe: str = "scratch"
    preset: str = "base"
    variant: Optional[str] = None
    tau: Optional[float] = None
    seed: int = 0
    world_seed: int = 0
    pretrain_steps: int = 1000
    finetune_steps: int = 1000
    batch_size: int = 8
    peak_lr: float = 3e-3
    warmup: int = 100
    freeze_lower_encoder: bool = False
    out_dir: str = "runs/experiment"

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ConfigError(f"unknown recipe {self.recipe!r}; "
                              f"choose from {', '.join(RECIPES)}")
        if self.preset not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {self.preset!r}; "
                              f"choose from {', '.join(PRESET_NAMES)}")
        if self.recipe == "decoder_pretrain":
            if self.variant is None:
                raise ConfigError("decoder_pretrain needs a variant "
                                  f"({', '.join(MT_VARIANTS)})")
            if self.variant not in MT_VARIANTS:
                raise ConfigError(f"unknown MT variant {self.variant!r}")
        elif self.variant is not None:
            raise ConfigError(f"variant only applies to decoder_pretrain, "
                              f"not {self.recipe}")
        if self.recipe in ("multitask", "augment"):
            if self.tau is None:
                raise ConfigError(f"{self.recipe} needs a sampling "
                                  "temperature tau >= 1")
            if self.tau < 1.0:
                raise ConfigError(f"tau must be >= 1, got {self.tau}")
        elif self.tau is not None:
            raise ConfigError(f"tau only applies to multitask/augment, "
                              f"not {self.recipe}")
        if self.pretrain_steps < 1 or self.finetune_steps < 1:
            raise ConfigError("step budgets must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.warmup < 1:
            raise ConfigError("warmup must be >= 1")

    @property
    def pretrain_kind(self) -> Optional[str]:
        return PRETRAIN_KIND.get(self.recipe)

    @property
    def dec_dropout(self) -> float:
        """Decoder dropout: 0.3 when fine-tuning on the S2ST corpus alone,
        0.1 when extra data (MT task or synthetic mixture) is in play."""
        return 0.1 if self.recipe in ("multitask", "augment") else 0.3

    @property
    def enc_dropout(self) -> float:
        return 0.1

    def config_hash(self) -> str:
        ident = asdict(self)
        del ident["out_dir"]
        blob = json.dumps(ident, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_INT_FIELDS = ("seed", "world_seed", "pretrain_steps", "finetune_steps",
               "batch_size", "warmup")
_FLOAT_FIELDS = ("tau", "peak_lr")


def _coerce(key: str, value):
    if key in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if key in _FLOAT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if key == "freeze_lower_encoder":
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean, got {value!r}")
        return value
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def load_config(toml_path: Optional[str] = None, overrides: Optional[dict] = None
                ) -> ExperimentConfig:
    """Merge defaults, an optional TOML file, and explicit overrides."""
    merged = {}
    if toml_path is not None:
        try:
            with open(toml_path, "rb") as f:
                raw = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {toml_path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"malformed TOML in {toml_path}: {e}") from None
        for key, value in raw.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r} in {toml_path}")
            merged[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = _coerce(key, value)
    return ExperimentConfig(**merged)
