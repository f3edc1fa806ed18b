"""Model and training configuration.

Configs are plain dataclasses that round-trip through YAML files. Presets
mirror the per-dataset hyperparameter rows used for the benchmarks.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for inconsistent or unknown configuration values."""


@dataclass
class ModelConfig:
    num_tokens: int = 64
    downscale_factor: int = 0
    num_heads: int = 8
    codebook_size: int = 512
    quant_dim: int = 64
    unet_blocks: int = 2
    unet_channels: int = 256
    reset_window: int = 100
    ordering_enabled: bool = False
    input_channels: int = 1
    image_size: tuple[int, int] = (32, 32)
    # "qgvae" or "grid" (vanilla VQ-VAE baseline on a spatial token grid)
    bottleneck: str = "qgvae"
    # consecutive frequencies sharing one codebook; 1 = one codebook per token
    codebook_share: int = 1
    value_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.value_range = tuple(float(v) for v in self.value_range)
        self.validate()

    def validate(self) -> None:
        positive = ("num_tokens", "num_heads", "quant_dim", "unet_blocks",
                    "unet_channels", "reset_window", "input_channels", "codebook_share")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.downscale_factor < 0:
            raise ConfigError("downscale_factor must be non-negative")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.bottleneck not in ("qgvae", "grid"):
            raise ConfigError(f"unknown bottleneck {self.bottleneck!r}")
        if len(self.image_size) != 2:
            raise ConfigError("image_size must be (W, H)")
        step = 2 ** self.downscale_factor
        if any(s < 1 or s % step for s in self.image_size):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2^f = {step}")
        if self.bottleneck == "qgvae":
            if self.num_tokens % self.num_heads:
                raise ConfigError(
                    f"num_heads={self.num_heads} does not divide num_tokens={self.num_tokens}")
            if self.num_tokens % self.codebook_share:
                raise ConfigError("codebook_share must divide num_tokens")
        else:
            if self.grid_size[0] * self.grid_size[1] != self.num_tokens:
                raise ConfigError(
                    f"grid bottleneck yields {self.grid_size} tokens, num_tokens={self.num_tokens}")
        lo, hi = self.value_range
        if not hi > lo:
            raise ConfigError("value_range must be increasing")

    @property
    def grid_size(self) -> tuple[int, int]:
        """Spatial size (W', H') of the bottleneck feature map."""
        step = 2 ** self.downscale_factor
        return self.image_size[0] // step, self.image_size[1] // step

    @property
    def num_codebooks(self) -> int:
        if self.bottleneck == "grid":
            return 1
        return self.num_tokens // self.codebook_share

    @property
    def data_range(self) -> float:
        return self.value_range[1] - self.value_range[0]


@dataclass
class TrainConfig:
    dataset: str = "mnist"
    data_dir: str | None = None
    batch_size: int = 128
    epochs: int = 15
    lr: float = 2e-4
    weight_decay: float = 0.01
    commit_weight: float = 1.0
    code_weight: float = 0.25
    perturb_scale: float = 1e-3
    reset_threshold: float = 0.0
    seed: int = 0
    deterministic: bool = True
    device: str = "cpu"
    train_limit: int | None = None
    test_limit: int | None = None
    log_every: int = 50
    checkpoint_every: int = 0
    eval_batch_size: int = 256

    def __post_init__(self):
        for name in ("batch_size", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.log_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("epochs, log_every and checkpoint_every must be non-negative")
        for name in ("lr", "perturb_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("weight_decay", "commit_weight", "code_weight", "reset_threshold"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["model"]["image_size"] = list(self.model.image_size)
        d["model"]["value_range"] = list(self.model.value_range)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        unknown = set(d) - {"model", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(model=_build(ModelConfig, d.get("model", {})),
                   train=_build(TrainConfig, d.get("train", {})))


_SCALARS = {"int": int, "float": float, "str": str}


def _coerce(name: str, annotation: str, value: Any) -> Any:
    """Convert a YAML value to the declared field type (e.g. ``"1e-3"`` to float)."""
    optional = annotation.endswith(" | None")
    base = annotation.removesuffix(" | None")
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{name} must not be empty")
    try:
        if base == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if base in _SCALARS:
            if isinstance(value, bool):
                raise TypeError
            if base == "int" and isinstance(value, float):
                if not value.is_integer():
                    raise TypeError
                return int(value)
            return _SCALARS[base](value)
        if base.startswith("tuple["):
            inner = _SCALARS[base[6:-1].split(",")[0].strip()]
            return tuple(inner(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot read {value!r} as {base}") from None
    return value


def _build(kind, values: dict[str, Any]):
    fields = {f.name: f.type for f in dataclasses.fields(kind)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    return kind(**{k: _coerce(k, fields[k], v) for k, v in values.items()})


# Per-dataset rows of the benchmark hyperparameter table.
PRESETS: dict[str, dict[str, Any]] = {
    "mnist": dict(num_tokens=64, downscale_factor=0, num_heads=8, unet_blocks=2,
                  unet_channels=256, reset_window=100, input_channels=1, image_size=(32, 32)),
    "cifar10": dict(num_tokens=64, downscale_factor=0, num_heads=8, unet_blocks=1,
                    unet_channels=128, reset_window=100, input_channels=3, image_size=(32, 32)),
    "svhn": dict(num_tokens=64, downscale_factor=0, num_heads=8, unet_blocks=1,
                 unet_channels=128, reset_window=100, input_channels=3, image_size=(32, 32)),
    "celeba64": dict(num_tokens=256, downscale_factor=2, num_heads=64, unet_blocks=2,
                     unet_channels=256, reset_window=1000, input_channels=3, image_size=(64, 64)),
    "celeba256": dict(num_tokens=256, downscale_factor=3, num_heads=64, unet_blocks=2,
                      unet_channels=128, reset_window=1350, input_channels=3,
                      image_size=(256, 256)),
    "imagenet64": dict(num_tokens=256, downscale_factor=2, num_heads=64, unet_blocks=2,
                       unet_channels=128, reset_window=1000, input_channels=3,
                       image_size=(64, 64)),
    "imagenet128": dict(num_tokens=256, downscale_factor=2, num_heads=64, unet_blocks=2,
                        unet_channels=128, reset_window=1000, input_channels=3,
                        image_size=(128, 128)),
}

PRESET_EPOCHS = {"mnist": 100, "cifar10": 100, "svhn": 100, "celeba64": 70,
                 "celeba256": 55, "imagenet64": 100, "imagenet128": 15}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"no preset named {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def grid_counterpart(cfg: ModelConfig) -> ModelConfig:
    """Vanilla VQ-VAE config with the same token count, codebook and backbone.

    The downscale factor is chosen so the spatial grid holds ``num_tokens``
    positions, e.g. 64 tokens on 32x32 images gives an 8x8 grid (f=2).
    """
    w, h = cfg.image_size
    for f in range(0, 16):
        step = 2 ** f
        if w % step or h % step:
            break
        if (w // step) * (h // step) == cfg.num_tokens:
            return dataclasses.replace(cfg, bottleneck="grid", downscale_factor=f,
                                       num_heads=1, codebook_share=1, ordering_enabled=False)
    raise ConfigError(f"no power-of-two grid over {cfg.image_size} has {cfg.num_tokens} cells")


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Read a YAML run config and apply ``key=value`` overrides.

    Keys in overrides are dotted (``model.num_tokens=32``); a bare key is
    looked up in the model section first, then train.
    """
    data: dict[str, Any] = {"model": {}, "train": {}}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        preset_name = loaded.pop("preset", None)
        if preset_name is not None:
            if preset_name not in PRESETS:
                raise ConfigError(f"no preset named {preset_name!r}")
            data["model"].update(PRESETS[preset_name])
        for section in ("model", "train"):
            data[section].update(loaded.pop(section, None) or {})
        if loaded:
            raise ConfigError(f"unknown config sections: {sorted(loaded)}")
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        if "." in key:
            section, key = key.split(".", 1)
        elif key in model_keys:
            section = "model"
        elif key in train_keys:
            section = "train"
        else:
            raise ConfigError(f"unknown override key {key!r}")
        if section not in data:
            raise ConfigError(f"unknown config section {section!r}")
        data[section][key] = value
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
