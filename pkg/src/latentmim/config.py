"""Configuration dataclasses and the flat ``key = value`` config file format.

Nested configs are addressed with dotted keys (``vit.depth``, ``dec.dec_dim``)
both in files and on the command line.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from latentmim.errors import ConfigError

DECODER_VARIANTS = ("prompting", "full", "none")
TARGETS = ("latent", "pixel")
SAMPLERS = ("semantic", "uniform")
NORMALIZATIONS = ("teacher", "imagenet", "clip", "none")

# per-channel (mean, std) for image normalization
NORM_STATS = {
    "imagenet": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
    "clip": ((0.48145466, 0.4578275, 0.40821073), (0.26862954, 0.26130258, 0.27577711)),
    "none": ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
}


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 2
    embed_dim: int = 64
    num_heads: int = 4
    ffn_ratio: float = 4.0
    use_class_token: bool = True

    min_depth = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.patch_size <= 0 or self.image_size <= 0:
            raise ConfigError(f"image_size and patch_size must be positive, got {self.image_size}, {self.patch_size}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.depth < self.min_depth:
            raise ConfigError(f"depth must be >= {self.min_depth}, got {self.depth}")
        if not self.ffn_ratio > 0:
            raise ConfigError(f"ffn_ratio must be positive, got {self.ffn_ratio}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def ffn_dim(self) -> int:
        return int(round(self.embed_dim * self.ffn_ratio))


@dataclass
class TeacherConfig(ViTConfig):
    """A frozen teacher ViT. Depth 0 (patch projection only) is allowed."""

    depth: int = 2
    positional: bool = True
    # strength of the contrast coupling in the last attention layer of stub teachers
    saliency: float = 0.0

    min_depth = 0

    def validate(self):
        super().validate()
        if self.saliency < 0:
            raise ConfigError(f"teacher.saliency must be >= 0, got {self.saliency}")


@dataclass
class DecoderConfig:
    depth: int = 2
    dec_dim: int = 64
    num_heads: int = 4
    ffn_ratio: float = 4.0
    d_target: int = 64
    variant: str = "prompting"
    # project prompt rows through W_k / W_v instead of using them as-is
    project_prompts: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in DECODER_VARIANTS:
            raise ConfigError(f"dec.variant must be one of {DECODER_VARIANTS}, got {self.variant!r}")
        if self.depth < 0:
            raise ConfigError(f"dec.depth must be >= 0, got {self.depth}")
        if self.num_heads <= 0 or self.dec_dim % self.num_heads:
            raise ConfigError(f"dec.dec_dim {self.dec_dim} is not divisible by dec.num_heads {self.num_heads}")
        if self.d_target < 1:
            raise ConfigError(f"dec.d_target must be >= 1, got {self.d_target}")
        if not self.ffn_ratio > 0:
            raise ConfigError(f"dec.ffn_ratio must be positive, got {self.ffn_ratio}")

    @property
    def ffn_dim(self) -> int:
        return int(round(self.dec_dim * self.ffn_ratio))


@dataclass
class TrainConfig:
    target: str = "latent"
    decoder: str = "prompting"
    sampler: str = "semantic"
    mask_ratio: float = 0.75
    epochs: int = 400
    warmup_epochs: int = 40
    max_steps: int = 0
    batch_size: int = 4096
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    grad_clip: float = 0.0
    seed: int = 0
    data_dir: str = ""
    synthetic_images: int = 512
    normalization: str = "teacher"
    checkpoint_every: int = 0
    teacher_path: str = ""
    teacher_seed: int = 0
    vit: ViTConfig = field(default_factory=ViTConfig)
    dec: DecoderConfig = field(default_factory=DecoderConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self):
        if self.target not in TARGETS:
            raise ConfigError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.decoder not in DECODER_VARIANTS:
            raise ConfigError(f"decoder must be one of {DECODER_VARIANTS}, got {self.decoder!r}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1 and self.max_steps < 1:
            raise ConfigError("one of epochs or max_steps must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr and weight_decay must be nonnegative")
        if self.sampler == "semantic" and not self.teacher_path and self.teacher.depth < 1:
            raise ConfigError("sampler=semantic needs a teacher with at least one attention layer")
        if self.dec.variant != self.decoder:
            # the top-level axis is authoritative
            self.dec = dataclasses.replace(self.dec, variant=self.decoder)
        if self.teacher.image_size != self.vit.image_size or self.teacher.patch_size != self.vit.patch_size:
            raise ConfigError(
                f"teacher grid {self.teacher.image_size}/{self.teacher.patch_size} does not match "
                f"student grid {self.vit.image_size}/{self.vit.patch_size}"
            )
        self.dec = dataclasses.replace(self.dec, d_target=self.d_target)

    @property
    def d_target(self) -> int:
        if self.target == "pixel":
            return 3 * self.vit.patch_size**2
        return self.teacher.embed_dim

    @property
    def loss_kind(self) -> str:
        return "kd" if self.decoder == "none" else "reconstruction"

    def effective_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    def normalization_stats(self):
        key = self.normalization
        if key == "teacher":
            # stub teachers are trained on nothing; use CLIP preprocessing as the
            # nominal teacher statistics
            key = "clip"
        return NORM_STATS[key]

    def to_flat(self) -> dict[str, Any]:
        return flatten(dataclasses.asdict(self))

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "TrainConfig":
        return build_config(flat)


_NESTED = {"vit": ViTConfig, "dec": DecoderConfig, "teacher": TeacherConfig}


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def known_keys() -> dict[str, Any]:
    """Every valid dotted key mapped to its default value."""
    return TrainConfig(epochs=1, batch_size=1).to_flat()


def _coerce(key: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = text.strip("()[] ").split(",")
            return tuple(float(p) for p in parts if p.strip())
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for key {key!r}") from None
    return text


def build_config(flat: dict[str, Any]) -> TrainConfig:
    """Build a TrainConfig from dotted keys, rejecting unknown keys."""
    defaults = known_keys()
    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {name: {} for name in _NESTED}
    for key, raw in flat.items():
        key = key.replace("-", "_")
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        value = _coerce(key, raw, defaults[key])
        head, _, rest = key.partition(".")
        if rest:
            nested[head][rest] = value
        else:
            top[key] = value
    for name, cls in _NESTED.items():
        top[name] = cls(**nested[name])
    return TrainConfig(**top)


def parse_config_text(text: str, source: str = "<string>") -> dict[str, str]:
    """Parse ``key = value`` lines. ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def load_config_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {str(path)!r}: {exc.strerror}") from None
    return parse_config_text(text, source=str(path))


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_flat().items():
        if isinstance(value, tuple):
            value = ", ".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_id(cfg: TrainConfig) -> str:
    """Short stable identifier of a resolved config."""
    import hashlib

    blob = json.dumps(cfg.to_flat(), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def steps_per_epoch(num_images: int, batch_size: int) -> int:
    return max(1, math.ceil(num_images / batch_size))
