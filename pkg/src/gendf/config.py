"""Run configuration: dataclass defaults, flat ``key = value`` files, overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .errors import ConfigError
from .features import AugmentationConfig
from .objectives import LossWeights
from .peft import normalize_targets


@dataclass
class RunConfig:
    # backbone
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 2
    mlp_ratio: float = 4.0
    backbone_std: float = 0.02
    filter_fraction: float = 0.375
    filter_gain: float = 8.0
    # components
    dsrl: bool = True
    fsr: bool = True
    cifaug: bool = True
    peft: str = "lora"  # lora | adapter
    redistribution: str = "fsr"  # fsr | linear
    targets: str = "QV"
    rank: int = 8
    scale: float = 4.0
    lora_sigma: float = 0.01
    adapter_dim: int = 16
    fsr_sigma: float = 0.02
    head_std: float = 0.02
    # losses and augmentation
    gamma_tri: float = 0.2
    gamma_aug: float = 0.2
    aug_sigma: float = 0.02
    aug_prob: float = 0.5
    # optimisation
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 32
    steps: int = 300
    log_every: int = 50
    # data
    n_train: int = 512
    n_eval: int = 256
    # seeds; None derives from the master seed
    seed: int = 0
    model_seed: int | None = None
    data_seed: int | None = None
    aug_seed: int | None = None
    # evaluation
    perturbations: str = ""
    contrast: float = 1.5
    saturation: float = 2.0
    pixelate: float = 2.0
    blur: float = 1.0
    timing: bool = False
    extra: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.targets = "".join(normalize_targets(self.targets))
        if not self.targets:
            raise ConfigError("targets must name at least one of Q, K, V")
        if self.peft not in ("lora", "adapter"):
            raise ConfigError(f"peft must be 'lora' or 'adapter', got {self.peft!r}")
        if self.redistribution not in ("fsr", "linear"):
            raise ConfigError(f"redistribution must be 'fsr' or 'linear', got {self.redistribution!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        self.backbone_config()
        self.aug_config()
        self.loss_weights()

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.image_size, self.patch_size, 3, self.embed_dim,
                              self.num_heads, self.num_blocks, self.mlp_ratio)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.gamma_tri, self.gamma_aug)

    def aug_config(self) -> AugmentationConfig:
        return AugmentationConfig(self.aug_sigma, self.aug_prob, self.seeds()["aug"])

    def seeds(self) -> dict[str, int]:
        derived = np.random.SeedSequence(self.seed).generate_state(3)
        return {
            "model": int(self.model_seed if self.model_seed is not None else derived[0]),
            "data": int(self.data_seed if self.data_seed is not None else derived[1] % 100_000),
            "aug": int(self.aug_seed if self.aug_seed is not None else derived[2]),
        }

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "extra"}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def perturbation_list(self) -> list[str]:
        if not self.perturbations or self.perturbations == "none":
            return []
        if self.perturbations == "all":
            return ["contrast", "saturation", "pixelate", "blur"]
        return [p.strip() for p in self.perturbations.split(",") if p.strip()]


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES or key == "extra":
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if "None" in kind and raw.lower() in ("", "none", "null"):
        return None
    if kind.startswith("bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw.strip("\"'")


def parse_assignments(lines) -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """Defaults, then the config file, then ``key=value`` overrides, then ``GENDF_SEED``."""
    env = os.environ if env is None else env
    values = {}
    if path is not None:
        values.update(parse_assignments(Path(path).read_text().splitlines()))
    values.update(parse_assignments(overrides))
    if env.get("GENDF_SEED"):
        values["seed"] = _coerce("seed", env["GENDF_SEED"])
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
