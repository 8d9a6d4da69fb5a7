"""Model and training hyperparameters plus config-file loading.

Configs are flat JSON objects; keys must match a dataclass field of either
ModelConfig or TrainConfig. Unknown keys and type-mismatched overrides are
rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    levels: int = 5                      # pyramid depth N
    channels: int = 256                  # model width C
    in_channels: int | None = None       # feature dim; defaults to channels
    num_classes: int = 20
    heads: int = 4
    ffn_mult: int = 4
    delta: float = 0.7                   # background sampling rate
    tau: int = 5                         # boundary label half-window, level-1 units
    loss_lambda: float = 1.0             # regression/classification balance
    omega: float = 8.0                   # refined-distance scale factor
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    coarse_scale_mode: str = "double"    # "double": S(l)=2^l, "stride": S(l)=2^(l-1)
    context_source: str = "combined"     # "combined" or "encoded" previous-level features
    pos_scale: float = 0.2               # sinusoidal positional-encoding magnitude
    bfs_enabled: bool = True
    encoder_type: str = "hierarchical"   # "hierarchical" | "vanilla" | "cnn"
    nms_sigma: float = 0.5
    score_threshold: float = 1e-3
    top_k: int = 200
    nms_final_threshold: float = 1e-4

    def __post_init__(self):
        if self.in_channels is None:
            self.in_channels = self.channels
        if self.channels % self.heads != 0:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.encoder_type not in ("hierarchical", "vanilla", "cnn"):
            raise ConfigError(f"unknown encoder_type {self.encoder_type!r}")
        if self.coarse_scale_mode not in ("double", "stride"):
            raise ConfigError(f"unknown coarse_scale_mode {self.coarse_scale_mode!r}")
        if self.context_source not in ("combined", "encoded"):
            raise ConfigError(f"unknown context_source {self.context_source!r}")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError(f"delta must be in (0, 1], got {self.delta}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")

    def scale(self, level: int) -> float:
        """Distance-to-base-units factor S(l) for decode and target encoding."""
        return float(2 ** level if self.coarse_scale_mode == "double" else 2 ** (level - 1))


@dataclass
class TrainConfig:
    epochs: int = 45
    batch_size: int = 2
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 1
    eval_every: int = 10                 # epochs between validation-mAP passes
    schedule_horizon: int | None = None  # cosine horizon; defaults to total steps
    eval_thresholds: list[float] = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6, 0.7])


_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)} | {
    f.name: f for f in dataclasses.fields(TrainConfig)
}


def _coerce(key: str, raw: str):
    """Parse a key=value override string against the field's declared type."""
    f = _FIELDS[key]
    hint = f.type
    try:
        if hint in ("int", "int | None"):
            return int(raw)
        if hint == "float":
            return float(raw)
        if hint == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if hint == "str":
            return raw
        if hint.startswith("list[float]"):
            return [float(v) for v in raw.split(",") if v]
        raise ValueError(f"unsupported type {hint}")
    except ValueError as exc:
        raise ConfigError(f"override for {key!r}: cannot parse {raw!r} as {hint}") from exc


def _check_types(values: dict) -> None:
    for key, val in values.items():
        hint = _FIELDS[key].type
        ok = True
        if hint == "int" or hint == "int | None":
            ok = isinstance(val, int) and not isinstance(val, bool) or (val is None and "None" in hint)
        elif hint == "float":
            ok = isinstance(val, (int, float)) and not isinstance(val, bool)
        elif hint == "bool":
            ok = isinstance(val, bool)
        elif hint == "str":
            ok = isinstance(val, str)
        elif hint.startswith("list[float]"):
            ok = isinstance(val, list) and all(isinstance(v, (int, float)) for v in val)
        if not ok:
            raise ConfigError(f"config key {key!r}: value {val!r} does not match type {hint}")


def load_config(path: str | Path | None = None,
                overrides: dict[str, str] | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Resolve defaults <- file <- overrides, in that precedence."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        loaded.pop("schema_version", None)
        for key in loaded:
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r} in {path}")
        _check_types(loaded)
        values.update(loaded)
    for key, raw in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r} in overrides")
        values.update({key: _coerce(key, raw)})

    model_names = {f.name for f in dataclasses.fields(ModelConfig)}
    train_names = {f.name for f in dataclasses.fields(TrainConfig)}
    model_kwargs = {k: v for k, v in values.items() if k in model_names}
    train_kwargs = {k: v for k, v in values.items() if k in train_names}
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def dump_config(model_cfg: ModelConfig, train_cfg: TrainConfig, path: str | Path) -> None:
    """Write the fully-resolved configuration for reproducibility."""
    merged = {"schema_version": 1}
    merged.update(dataclasses.asdict(model_cfg))
    merged.update(dataclasses.asdict(train_cfg))
    Path(path).write_text(json.dumps(merged, indent=2, sort_keys=True) + "\n")
