import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Mapping, Optional, Tuple

from evaluation import SsimConfig
from fingerprint_data import DEFAULT_FRACTIONS, DEFAULT_RECIPE, GenConfig, format_recipe, parse_recipe
from network import ModelSpec
from trainer import ConfigError, TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """Every tunable knob in one flat namespace.

    ``seed``, ``size`` and ``dropout_rate`` are shared: the generator and the
    trainer read the same seed and image size, the model and the trainer the
    same dropout rate.
    """

    # data
    count: int = 100
    size: Tuple[int, int] = (64, 64)
    seed: int = 0
    ridge_frequency: float = 0.1
    orientation_smoothness: float = 8.0
    recipe: str = format_recipe(DEFAULT_RECIPE)
    fractions: Tuple[float, ...] = DEFAULT_FRACTIONS
    # model
    base_channels: int = 32
    channel_cap: int = 256
    encoder_blocks: int = 4
    decoder_blocks: int = 3
    dilations: Tuple[int, ...] = (1, 2, 5)
    dropout_rate: float = 0.3
    # training
    initial_lr: float = 1e-3
    lr_halve_every: int = 3
    batch_size: int = 8
    early_stop_patience: int = 5
    max_epochs: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_monitor: str = "val"
    augment: bool = True
    # metrics
    ssim_scales: int = 5
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    dynamic_range: float = 1.0


def parse_size(text: str) -> Tuple[int, int]:
    h, sep, w = text.strip().lower().partition("x")
    if not sep:
        raise ValueError(f"expected HxW, got {text!r}")
    return int(h), int(w)


def format_size(size: Tuple[int, int]) -> str:
    return f"{size[0]}x{size[1]}"


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


_PARSERS = {
    "size": parse_size,
    "dilations": lambda text: tuple(int(v) for v in text.split(",")),
    "fractions": lambda text: tuple(float(v) for v in text.split(",")),
    "recipe": lambda text: format_recipe(parse_recipe(text)),
    "augment": _parse_bool,
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, text: str) -> Any:
    if key in _PARSERS:
        return _PARSERS[key](text)
    kind = _FIELD_TYPES[key]
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text.strip()


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """``key = value`` lines with ``#`` comments; unknown keys are errors."""
    values: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw.strip()!r}")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{number}: unknown key {key!r}")
        try:
            values[key] = _convert(key, value.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}:{number}: bad value for {key}: {exc}") from exc
    return values


def load_run_config(path: Optional[str] = None) -> RunConfig:
    if not path:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig(**parse_config_text(text, path))


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Replace fields whose override is not None (command-line flags left unset stay None)."""
    unknown = set(overrides) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return replace(cfg, **{key: value for key, value in overrides.items() if value is not None})


def to_model_spec(cfg: RunConfig) -> ModelSpec:
    spec = ModelSpec(cfg.base_channels, cfg.channel_cap, cfg.encoder_blocks, cfg.decoder_blocks,
                     tuple(cfg.dilations), cfg.dropout_rate)
    try:
        return spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def to_train_config(cfg: RunConfig) -> TrainConfig:
    train_cfg = TrainConfig(
        initial_lr=cfg.initial_lr,
        lr_halve_every=cfg.lr_halve_every,
        batch_size=cfg.batch_size,
        dropout_rate=cfg.dropout_rate,
        early_stop_patience=cfg.early_stop_patience,
        max_epochs=cfg.max_epochs,
        adam_beta1=cfg.adam_beta1,
        adam_beta2=cfg.adam_beta2,
        adam_eps=cfg.adam_eps,
        seed=cfg.seed,
        image_size=tuple(cfg.size),
        early_stop_monitor=cfg.early_stop_monitor,
        augment=cfg.augment,
    )
    return train_cfg.validate()


def to_gen_config(cfg: RunConfig) -> GenConfig:
    try:
        return GenConfig(cfg.count, tuple(cfg.size), cfg.seed, cfg.ridge_frequency, cfg.orientation_smoothness,
                         parse_recipe(cfg.recipe)).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def to_ssim_config(cfg: RunConfig) -> SsimConfig:
    try:
        return SsimConfig(scales=cfg.ssim_scales, window_size=cfg.ssim_window, sigma=cfg.ssim_sigma,
                          dynamic_range=cfg.dynamic_range).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def log_effective(cfg: RunConfig) -> None:
    for key, value in asdict(cfg).items():
        if key == "size":
            value = format_size(value)
        logger.info(f"config {key} = {value}")


__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_size",
    "parse_config_text",
    "load_run_config",
    "apply_overrides",
    "to_model_spec",
    "to_train_config",
    "to_gen_config",
    "to_ssim_config",
    "log_effective",
]
