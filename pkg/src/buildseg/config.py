"""Model and training configuration.

One flat dataclass holds every knob. Config files are plain ``key = value``
text; any key can also be overridden on the command line, so the field names
double as the user-facing vocabulary.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .tensor import ConfigError


@dataclass
class ModelConfig:
    # architecture
    widths: tuple[int, ...] = (64, 128, 256, 512)
    depths: tuple[int, ...] = (2, 2, 4, 1)
    modulator_groups: int = 4
    heads: tuple[int, ...] = (8, 16)
    ffn_ratios: tuple[int, ...] = (4, 4, 4, 2)
    fusion_width: int = 64
    local_levels: tuple[int, ...] = (1, 2, 3)
    global_levels: tuple[int, ...] = (3, 4)
    drop_path_rate: float = 0.0

    # uncertainty decoding
    use_uncertainty: bool = True
    sample_count: int = 8
    std_floor: float = 1e-4
    zero_std: bool = False
    uncertainty_gradients: bool = False

    # objectives
    boundary_weight: float = 1.0
    kl_weight: float = 0.2
    global_loss_weight: float = 0.5
    local_loss_weight: float = 0.5
    dice_smooth: float = 1.0

    # optimization
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    epochs: int = 3
    steps_per_epoch: int = 100
    batch_size: int = 4
    restart_epochs: int = 10
    seed: int = 0

    # data
    image_size: int = 64
    scene_margin: int = 16
    difficulty: float = 0.0
    tile_size: int = 512
    threshold: float = 0.5
    val_interval: int = 50
    val_count: int = 8

    def validate(self) -> "ModelConfig":
        if len(self.widths) != 4 or len(self.depths) != 4:
            raise ConfigError("widths and depths must have exactly 4 stages")
        if len(self.heads) != 2 or len(self.ffn_ratios) != 4:
            raise ConfigError("heads needs 2 entries (stages 3,4); ffn_ratios needs 4")
        for i, w in enumerate(self.widths[:3], start=1):
            if w % self.modulator_groups:
                raise ConfigError(f"stage-{i} width {w} not divisible by modulator group count {self.modulator_groups}")
        if self.widths[2] % self.heads[0] or self.widths[3] % self.heads[1]:
            raise ConfigError(f"head counts {self.heads} must divide stage widths {self.widths[2:]}")
        for name in ("boundary_weight", "kl_weight", "global_loss_weight", "local_loss_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.sample_count < 2:
            raise ConfigError(f"sample_count must be >= 2, got {self.sample_count}")
        if self.image_size % 32 or self.tile_size % 32:
            raise ConfigError("image_size and tile_size must be divisible by 32")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate must be in [0,1), got {self.drop_path_rate}")
        return self

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @classmethod
    def full(cls) -> "ModelConfig":
        """Publication-scale settings (512-pixel tiles, full widths)."""
        return cls(image_size=512, epochs=105, batch_size=16, drop_path_rate=0.2, scene_margin=64)

    @classmethod
    def reduced(cls) -> "ModelConfig":
        """Desk-scale settings small enough to train on one CPU in minutes."""
        return cls(widths=(16, 32, 64, 128), heads=(8, 16), fusion_width=16,
                   image_size=64, scene_margin=16, batch_size=4)


_FIELD_TYPES = {f.name: f.type for f in fields(ModelConfig)}


def _parse_value(name: str, raw: str):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key '{name}'")
    raw = raw.strip()
    annotation = _FIELD_TYPES[name]
    if annotation == "bool" or annotation is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean '{raw}' for key '{name}'")
    if annotation == "int" or annotation is int:
        return int(raw)
    if annotation == "float" or annotation is float:
        return float(raw)
    # remaining fields are integer tuples like "64,128,256,512"
    parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
    return tuple(int(p) for p in parts)


def apply_overrides(config: ModelConfig, overrides: dict[str, str]) -> ModelConfig:
    values = {name: _parse_value(name, raw) for name, raw in overrides.items()}
    return dataclasses.replace(config, **values)


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> ModelConfig:
    """Read a key=value config file, then apply command-line overrides."""
    config = ModelConfig()
    if path is not None:
        parsed: dict[str, str] = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{line.strip()}'")
            key, _, value = stripped.partition("=")
            parsed[key.strip()] = value.strip()
        config = apply_overrides(config, parsed)
    if overrides:
        config = apply_overrides(config, overrides)
    return config.validate()


def dump_config(config: ModelConfig) -> str:
    lines = []
    for f in fields(ModelConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
