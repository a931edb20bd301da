"""
Run configuration.

A flat mapping of training, model and ablation keys. Files are read with
yaml.safe_load, so YAML and UTF-8 JSON configs load the same way. Unknown
keys are rejected; missing keys take the defaults below.
"""

import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

import yaml

from src.errors import ConfigurationError
from src.model.interaction import ATTENTION_MODES
from src.model.objective import LossWeights
from src.model.reconstruction import MASK_STRATEGIES
from src.model.segmenter import ModelConfig, TrainOptions

logger = logging.getLogger(__name__)

SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class RunConfig:
    # optimisation
    learning_rate: float = 3e-4
    schedule: str = "cosine"
    batch_size: int = 16
    epochs: int = 30
    master_seed: int = 0

    # objective
    alpha_v: float = 0.5
    alpha_t: float = 0.3
    tau: float = 0.07
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.2
    lambda4: float = 5.0
    recon_layers: int = 3
    condition_grad: bool = True

    # ablation toggles
    use_ccl_condition: bool = True
    use_cvr: bool = True
    use_clr: bool = True
    use_cvr_condition: bool = True
    use_clr_condition: bool = True
    mask_strategy: str = "weighted"
    attention: str = "cross"

    # model shape
    image_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64)
    width: int = 64
    text_layers: int = 2
    text_heads: int = 4
    max_tokens: int = 8
    ffn_mult: int = 2

    # data plumbing
    eval_batch_size: int = 32
    prefetch: int = 2
    augment: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    def validate(self) -> None:
        positive = ("learning_rate", "batch_size", "epochs", "tau", "recon_layers", "image_size",
                    "width", "text_heads", "max_tokens", "ffn_mult", "eval_batch_size")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.text_layers < 0 or self.prefetch < 0:
            raise ConfigurationError("text_layers and prefetch must be >= 0")
        for name in ("alpha_v", "alpha_t"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ConfigurationError(f"mask_strategy must be one of {MASK_STRATEGIES}, got {self.mask_strategy!r}")
        if self.attention not in ATTENTION_MODES:
            raise ConfigurationError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ConfigurationError(f"channels must be positive, got {self.channels}")
        if self.image_size % (2 ** len(self.channels)):
            raise ConfigurationError(
                f"image_size {self.image_size} must be divisible by 2^{len(self.channels)}"
            )
        if self.width % self.text_heads:
            raise ConfigurationError(f"width {self.width} not divisible by text_heads {self.text_heads}")
        self.loss_weights()  # range checks on λ

    # ------------------------------------------------------------------
    # Views
    # ------------------------------------------------------------------

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            image_size=self.image_size,
            channels=self.channels,
            width=self.width,
            text_layers=self.text_layers,
            text_heads=self.text_heads,
            max_tokens=self.max_tokens,
            ffn_mult=self.ffn_mult,
            recon_layers=self.recon_layers,
            attention=self.attention,
        )

    def train_options(self) -> TrainOptions:
        return TrainOptions(
            weights=self.loss_weights(),
            alpha_v=self.alpha_v,
            alpha_t=self.alpha_t,
            tau=self.tau,
            use_ccl_condition=self.use_ccl_condition,
            use_cvr=self.use_cvr,
            use_clr=self.use_clr,
            use_cvr_condition=self.use_cvr_condition,
            use_clr_condition=self.use_clr_condition,
            mask_strategy=self.mask_strategy,
            condition_grad=self.condition_grad,
        )

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["channels"] = list(self.channels)
        return data

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        _check_keys(overrides)
        return replace(self, **{name: _coerce(name, value) for name, value in overrides.items()})


def config_keys() -> tuple[str, ...]:
    return tuple(f.name for f in fields(RunConfig))


def _check_keys(data: dict) -> None:
    unknown = sorted(set(data) - set(config_keys()))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")


def _coerce(name: str, value: Any) -> Any:
    """Cast to the default's type; YAML reads "3e-4" as a string."""
    default = RunConfig.__dataclass_fields__[name].default
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError("expected true or false")
            return value
        if isinstance(default, (int, float, str)):
            return type(default)(value)
        return tuple(int(v) for v in value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"config key {name}: cannot use {value!r} ({e})") from None


def config_from_dict(data: dict[str, Any] | None) -> RunConfig:
    data = dict(data or {})
    _check_keys(data)
    return RunConfig(**{name: _coerce(name, value) for name, value in data.items()})


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping of config keys")
    config = config_from_dict(data)
    logger.info("Loaded config %s", path)
    return config


def save_config(config: RunConfig, path: Path | str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)
