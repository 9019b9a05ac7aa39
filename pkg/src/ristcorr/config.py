"""Configuration dataclasses and the flat ``section.key=value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError

SR_TERMS = ("mse", "emd", "cd")

# Self-reconstruction term sets of the loss ablation, rows (a)-(g).
LOSS_ABLATIONS = {
    "a": ("mse", "emd", "cd"),
    "b": ("mse", "emd"),
    "c": ("mse", "cd"),
    "d": ("emd", "cd"),
    "e": ("cd",),
    "f": ("emd",),
    "g": ("mse",),
}


@dataclass
class EncoderConfig:
    edge_channels: tuple = (8, 8, 16, 32)
    k: int = 4
    C: int = 16
    C_prime: int = 8
    fuse_channels: int = 0  # 0 -> same as C
    mlp_hidden: int = 0  # 0 -> 4 * C_prime * 3
    aggregation: str = "mean"
    negative_slope: float = 0.0

    def __post_init__(self):
        self.edge_channels = tuple(int(c) for c in self.edge_channels)
        if len(self.edge_channels) != 4:
            raise ConfigError("encoder.edge_channels needs exactly 4 stage widths")
        if self.fuse_channels <= 0:
            self.fuse_channels = self.C
        if self.mlp_hidden <= 0:
            self.mlp_hidden = 4 * self.C_prime * 3
        if self.aggregation not in ("mean", "max"):
            raise ConfigError(f"encoder.aggregation must be mean or max, got {self.aggregation!r}")


@dataclass
class DecoderConfig:
    in_channels: int = 8
    hidden: tuple = (8, 4)
    negative_slope: float = 0.0

    def __post_init__(self):
        self.hidden = tuple(int(c) for c in self.hidden)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    dtype: str = "float64"

    def __post_init__(self):
        if self.decoder.in_channels != self.encoder.C_prime:
            raise ConfigError(
                f"decoder input channels ({self.decoder.in_channels}) must equal encoder C' ({self.encoder.C_prime})")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def preset(cls, name: str, dtype: str = "float64") -> "ModelConfig":
        if name == "test":
            return cls(EncoderConfig(), DecoderConfig(), dtype)
        if name == "full":
            return cls(EncoderConfig(edge_channels=(64, 64, 128, 256), k=20, C=170, C_prime=64),
                       DecoderConfig(in_channels=64, hidden=(128, 64, 32)), dtype)
        raise ConfigError(f"unknown model preset {name!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d["encoder"]), DecoderConfig(**d["decoder"]), d.get("dtype", "float64"))


@dataclass
class TrainConfig:
    lambda_mse: float = 1000.0
    lambda_emd: float = 1.0
    lambda_cd: float = 10.0
    lr: float = 1e-3
    batch_pairs: int = 1
    epochs: int = 10
    iters_per_epoch: int = 0  # 0 -> ceil(num_shapes / batch_pairs)
    rotation_augmentation: bool = True
    seed: int = 0
    categories: tuple = ()
    sr_terms: tuple = ("mse", "emd")
    cross_reconstruction: bool = True
    num_points: int = 128
    normalize: bool = True

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.sr_terms = tuple(self.sr_terms)
        for name in ("lambda_mse", "lambda_emd", "lambda_cd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        bad = set(self.sr_terms) - set(SR_TERMS)
        if bad:
            raise ConfigError(f"unknown self-reconstruction terms {sorted(bad)}")
        if self.batch_pairs < 1 or self.epochs < 0:
            raise ConfigError("train.batch_pairs must be >= 1 and train.epochs >= 0")

    @classmethod
    def ablation(cls, row: str, **kwargs) -> "TrainConfig":
        if row not in LOSS_ABLATIONS:
            raise ConfigError(f"unknown loss ablation {row!r}; expected one of {sorted(LOSS_ABLATIONS)}")
        return cls(sr_terms=LOSS_ABLATIONS[row], **kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EvalConfig:
    tau_grid: tuple = tuple(round(0.01 * i, 2) for i in range(1, 11))
    protocol: str = "rotated"
    seed: int = 0
    matcher: str = "recon"

    def __post_init__(self):
        self.tau_grid = tuple(float(t) for t in self.tau_grid)
        if self.protocol not in ("aligned", "rotated"):
            raise ConfigError(f"eval.protocol must be aligned or rotated, got {self.protocol!r}")
        if self.matcher not in ("recon", "lst"):
            raise ConfigError(f"eval.matcher must be recon or lst, got {self.matcher!r}")


# ---------------------------------------------------------------------------
# flat key=value files

def _parse_value(text: str, current: Any):
    text = text.strip()
    if isinstance(current, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        items = [t.strip() for t in text.strip("()[]").split(",") if t.strip()]
        sample = current[0] if current else ""
        if isinstance(sample, int):
            return tuple(int(t) for t in items)
        if isinstance(sample, float):
            return tuple(float(t) for t in items)
        return tuple(items)
    return text


@dataclass
class RunConfig:
    """Everything a CLI command can be configured with, as nested sections."""

    model_preset: str = "test"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: dict = field(default_factory=lambda: {"manifest": ()})

    def sections(self) -> dict:
        return {
            "encoder": self.model.encoder,
            "decoder": self.model.decoder,
            "train": self.train,
            "eval": self.eval,
        }

    def flat(self) -> dict:
        out = {"model.preset": self.model_preset, "model.dtype": self.model.dtype,
               "data.manifest": tuple(self.data["manifest"])}
        for sec, obj in self.sections().items():
            for f in dataclasses.fields(obj):
                out[f"{sec}.{f.name}"] = getattr(obj, f.name)
        return out

    def resolve_key(self, key: str) -> str:
        keys = self.flat()
        if key in keys:
            return key
        matches = [k for k in keys if k.split(".", 1)[1] == key]
        if len(matches) == 1:
            return matches[0]
        if not matches:
            raise ConfigError(f"unknown config key {key!r}")
        raise ConfigError(f"ambiguous config key {key!r}; use one of {matches}")

    def set(self, key: str, text: str) -> None:
        full = self.resolve_key(key)
        section, name = full.split(".", 1)
        current = self.flat()[full]
        try:
            value = _parse_value(text, current)
        except ValueError as exc:
            raise ConfigError(f"bad value for {full}: {exc}") from None
        if full == "model.preset":
            self.model_preset = value
            self.model = ModelConfig.preset(value, self.model.dtype)
        elif full == "model.dtype":
            self.model = ModelConfig(self.model.encoder, self.model.decoder, value)
        elif full == "data.manifest":
            self.data["manifest"] = value
        else:
            obj = self.sections()[section]
            setattr(obj, name, value)
            obj.__post_init__()
            if full == "encoder.C_prime":
                self.model.decoder.in_channels = value
        if section in ("encoder", "decoder", "model"):
            self.model.__post_init__()

    def apply(self, assignments: Iterable[str]) -> None:
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, value = item.split("=", 1)
            self.set(key.strip(), value)


def read_config_file(path) -> list:
    """Non-empty, non-comment lines of a ``key=value`` file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    lines = []
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return lines


def load_run_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        lines = read_config_file(path)
        # the preset resets model sections, so it goes first
        lines.sort(key=lambda l: not l.startswith("model.preset"))
        cfg.apply(lines)
    cfg.apply(overrides)
    return cfg
