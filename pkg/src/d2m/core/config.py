"""Run configuration: value types and the YAML loader.

A config file is a YAML mapping. Top-level keys set distillation
hyperparameters; the ``pool``, ``augment``, ``pretrain``, ``eval``, ``nas``
and ``toy`` sections configure the other stages. Unspecified keys take the
defaults below (distillation defaults: lambda 100, T 4, B 128, K 60,
generator lr 1e-6).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

FAMILIES = ("convnet", "resnet-small")
ACTIVATIONS = ("sigmoid", "relu", "leakyrelu")
NORMALIZATIONS = ("none", "batch", "layer", "instance", "group")
POOLINGS = ("none", "max", "avg")
AUGMENT_OPS = ("color", "crop", "cutout", "flip", "scale", "rotate")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _require(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(key, message)


@dataclass(frozen=True)
class ArchSpec:
    """A network architecture from the ConvNet / small-ResNet family.

    ``input_shape`` and ``class_count`` may be left unset in pool and grid
    entries; :meth:`bind` fills them from the dataset.  For ``resnet-small``
    the depth is the number of residual stages and pooling is ignored.
    """

    family: str = "convnet"
    depth: int = 3
    width: int = 128
    activation: str = "relu"
    normalization: str = "instance"
    pooling: str = "avg"
    input_shape: tuple[int, int, int] | None = None
    class_count: int | None = None

    def __post_init__(self):
        _require(self.family in FAMILIES, "family", f"unknown family {self.family!r}")
        _require(self.activation in ACTIVATIONS, "activation", f"unknown activation {self.activation!r}")
        _require(self.normalization in NORMALIZATIONS, "normalization",
                 f"unknown normalization {self.normalization!r}")
        _require(self.pooling in POOLINGS, "pooling", f"unknown pooling {self.pooling!r}")
        _require(self.depth >= 1, "depth", "must be >= 1")
        _require(self.width >= 1, "width", "must be >= 1")
        if self.input_shape is not None:
            object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    def bind(self, input_shape, class_count: int) -> "ArchSpec":
        return dataclasses.replace(self, input_shape=tuple(input_shape), class_count=int(class_count))

    @property
    def tag(self) -> str:
        return (f"{self.family}-d{self.depth}-w{self.width}-{self.activation}"
                f"-{self.normalization}-{self.pooling}")

    @classmethod
    def parse(cls, text: str) -> "ArchSpec":
        """Inverse of :attr:`tag`, e.g. ``convnet-d2-w128-relu-instance-avg``."""
        family = "resnet-small" if text.startswith("resnet-small") else "convnet"
        rest = text[len(family):].lstrip("-").split("-")
        if len(rest) != 5 or not rest[0].startswith("d") or not rest[1].startswith("w"):
            raise ConfigError("arch", f"cannot parse architecture tag {text!r}")
        try:
            depth, width = int(rest[0][1:]), int(rest[1][1:])
        except ValueError:
            raise ConfigError("arch", f"cannot parse architecture tag {text!r}") from None
        return cls(family, depth, width, rest[2], rest[3], rest[4])

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("family", "depth", "width", "activation", "normalization", "pooling")}
        return d

    @classmethod
    def from_dict(cls, d: dict | str) -> "ArchSpec":
        if isinstance(d, str):
            return cls.parse(d)
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            _require(k in known, f"arch.{k}", "unknown key")
        return cls(**d)


def default_depth(image_size: int) -> int:
    """ConvNet depth used for a square input side: 32 -> 3, 64 -> 4, ..."""
    return max(1, int(round(math.log2(image_size))) - 2)


@dataclass(frozen=True)
class ModelPoolSpec:
    entries: tuple[tuple[ArchSpec, float], ...]
    init: str = "normal"

    def __post_init__(self):
        _require(len(self.entries) >= 1, "pool", "needs at least one entry")
        for _, w in self.entries:
            _require(w > 0, "pool.weight", "weights must be positive")
        _require(self.init == "normal", "pool.init", "only 'normal' initialization is supported")

    @classmethod
    def default(cls, image_size: int, width: int = 128) -> "ModelPoolSpec":
        """Uniform pool: the default-depth ConvNet plus 2- and 3-stage ResNets."""
        return cls((
            (ArchSpec("convnet", default_depth(image_size), width), 1.0),
            (ArchSpec("resnet-small", 2, width // 2), 1.0),
            (ArchSpec("resnet-small", 3, width // 2), 1.0),
        ))


@dataclass(frozen=True)
class AugmentPolicy:
    ops: tuple[str, ...] = AUGMENT_OPS
    brightness: float = 1.0
    saturation: float = 2.0
    contrast: float = 0.5
    crop_pad: float = 0.125
    cutout: float = 0.5
    flip_prob: float = 0.5
    scale: float = 1.2
    rotate_deg: float = 15.0
    compose_all: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        for op in self.ops:
            _require(op in AUGMENT_OPS, "augment.ops", f"unknown op {op!r}")
        _require(0.0 <= self.flip_prob <= 1.0, "augment.flip_prob", "must be in [0, 1]")
        for name in ("brightness", "saturation", "contrast", "crop_pad", "cutout", "scale", "rotate_deg"):
            _require(getattr(self, name) > 0, f"augment.{name}", "must be positive")

    @property
    def enabled(self) -> bool:
        return len(self.ops) > 0


@dataclass(frozen=True)
class ToySpec:
    class_count: int = 3
    per_class: int = 500
    image_shape: tuple[int, int, int] = (3, 16, 16)
    seed: int = 7

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        _require(self.class_count >= 2, "toy.class_count", "must be >= 2")
        _require(self.per_class >= 1, "toy.per_class", "must be >= 1")
        _require(len(self.image_shape) == 3, "toy.image_shape", "must be (C, H, W)")


@dataclass(frozen=True)
class PretrainSettings:
    epochs: int = 100
    batch_size: int = 64
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.5, 0.9)
    disc_width: int = 64
    spectral_norm: bool = False
    augment: bool = True
    augment_ops: tuple[str, ...] = ("crop",)

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "augment_ops", tuple(self.augment_ops))
        _require(set(self.augment_ops) <= set(AUGMENT_OPS), "pretrain.augment_ops",
                 f"ops must be among {AUGMENT_OPS}")
        _require(self.epochs >= 0, "pretrain.epochs", "must be >= 0")
        _require(self.batch_size >= 1, "pretrain.batch_size", "must be >= 1")
        _require(self.optimizer in ("adam", "sgd"), "pretrain.optimizer", "must be adam or sgd")
        _require(self.lr_generator >= 0, "pretrain.lr_generator", "must be >= 0")
        _require(self.lr_discriminator >= 0, "pretrain.lr_discriminator", "must be >= 0")


@dataclass(frozen=True)
class EvalProtocol:
    """Downstream classifier training recipe.

    SGD with momentum and weight decay, learning rate halved every
    ``lr_step`` epochs. ``arch`` of ``None`` means the default-depth ConvNet
    for the dataset's image size.

    Latency-matched runs reserve ``generation_share`` of the time budget for
    synthesis: they generate ``generation_multiplier * ipc`` images per class
    once, then train for ``floor(epochs * (1 - generation_share))`` epochs,
    each epoch drawing ``ipc`` images per class from that pool.
    """

    arch: ArchSpec | None = None
    epochs: int = 300
    batch_size: int = 256
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 0.5
    lr_step: int = 15
    augment: bool = True
    trials: int = 5
    budget_reps: int = 3
    budget_slack: float = 0.05
    generation_share: float = 0.1
    generation_multiplier: int = 20

    def __post_init__(self):
        _require(self.trials >= 1, "eval.trials", "must be >= 1")
        _require(self.epochs >= 0, "eval.epochs", "must be >= 0")
        _require(self.batch_size >= 1, "eval.batch_size", "must be >= 1")
        _require(self.lr_step >= 1, "eval.lr_step", "must be >= 1")
        _require(self.budget_reps >= 1, "eval.budget_reps", "must be >= 1")
        _require(0.0 <= self.generation_share < 1.0, "eval.generation_share", "must be in [0, 1)")
        _require(self.generation_multiplier >= 1, "eval.generation_multiplier", "must be >= 1")


@dataclass(frozen=True)
class NasSettings:
    """Proxy-set architecture search: grid name, proxy size and training lengths."""

    grid: str = "reduced"
    proxy_ipc: int = 50
    proxy_epochs: int = 200
    full_epochs: int = 100
    val_fraction: float = 0.1

    def __post_init__(self):
        _require(self.proxy_ipc >= 1, "nas.proxy_ipc", "must be >= 1")
        _require(self.proxy_epochs >= 1 and self.full_epochs >= 1, "nas.epochs", "must be >= 1")
        _require(0.0 < self.val_fraction < 1.0, "nas.val_fraction", "must be in (0, 1)")


@dataclass(frozen=True)
class DistillConfig:
    lambda_balance: float = 100.0
    temperature: float = 4.0
    batch_size: int = 128
    epochs: int = 60
    lr_generator: float = 1e-6
    attention_exponent: float = 4.0
    pool: ModelPoolSpec | None = None
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    seed: int = 0
    latent_dim: int = 64
    generator_width: int = 64
    generator_optimizer: str = "sgd"
    generator_betas: tuple[float, float] = (0.5, 0.9)
    t_squared: bool = False
    em_grouping: str = "batch"
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    nas: NasSettings = field(default_factory=NasSettings)
    toy: ToySpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "generator_betas", tuple(float(b) for b in self.generator_betas))
        _require(self.lambda_balance >= 0, "lambda_balance", "must be >= 0")
        _require(self.temperature > 0, "temperature", "must be > 0")
        _require(self.batch_size >= 2, "batch_size", "must be >= 2")
        _require(self.epochs >= 1, "epochs", "must be >= 1")
        _require(self.lr_generator >= 0, "lr_generator", "must be >= 0")
        _require(self.attention_exponent > 0, "attention_exponent", "must be > 0")
        _require(self.latent_dim >= 1, "latent_dim", "must be >= 1")
        _require(self.generator_width >= 4, "generator_width", "must be >= 4")
        _require(self.generator_optimizer in ("sgd", "adam"), "generator_optimizer", "must be sgd or adam")
        _require(self.em_grouping in ("batch", "class"), "em_grouping", "must be batch or class")

    def pool_for(self, image_size: int) -> ModelPoolSpec:
        return self.pool if self.pool is not None else ModelPoolSpec.default(image_size)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.pool is not None:
            d["pool"] = [{"arch": a.to_dict(), "weight": w} for a, w in self.pool.entries]
        if self.eval.arch is not None:
            d["eval"]["arch"] = self.eval.arch.to_dict()
        return d

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_ALIASES = {"lambda": "lambda_balance", "λ": "lambda_balance", "T": "temperature",
            "B": "batch_size", "K": "epochs", "eta_g": "lr_generator", "p": "attention_exponent"}


def _section(cls, raw: Any, prefix: str, convert=None):
    if raw is None:
        return cls()
    _require(isinstance(raw, dict), prefix, "must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in raw.items():
        _require(k in known, f"{prefix}.{k}", "unknown key")
        kwargs[k] = convert(k, v) if convert else v
    try:
        return cls(**kwargs)
    except ConfigError as e:
        key = e.key if e.key.startswith(prefix) else f"{prefix}.{e.key}"
        raise ConfigError(key, str(e).split(": ", 1)[-1]) from None
    except TypeError as e:
        raise ConfigError(prefix, str(e)) from None


def _parse_pool(raw) -> ModelPoolSpec:
    _require(isinstance(raw, (list, dict)), "pool", "must be a list of entries")
    init = "normal"
    if isinstance(raw, dict):
        init = raw.get("init", "normal")
        raw = raw.get("entries", [])
    entries = []
    for item in raw:
        if isinstance(item, dict) and "arch" in item:
            entries.append((ArchSpec.from_dict(item["arch"]), float(item.get("weight", 1.0))))
        else:
            entries.append((ArchSpec.from_dict(item), 1.0))
    return ModelPoolSpec(tuple(entries), init)


def load_config(source: str | None = "") -> DistillConfig:
    """Parse YAML config text into a validated :class:`DistillConfig`."""
    try:
        raw = yaml.safe_load(source or "") or {}
    except yaml.YAMLError as e:
        raise ConfigError("<source>", f"parse failure: {e}") from None
    _require(isinstance(raw, dict), "<source>", "top level must be a mapping")

    kwargs: dict[str, Any] = {}
    known = {f.name for f in dataclasses.fields(DistillConfig)}
    for key, value in raw.items():
        name = _ALIASES.get(key, key)
        _require(name in known, key, "unknown key")
        kwargs[name] = value

    if "pool" in kwargs and kwargs["pool"] is not None:
        kwargs["pool"] = _parse_pool(kwargs["pool"])
    kwargs["augment"] = _section(AugmentPolicy, kwargs.get("augment"), "augment")
    kwargs["pretrain"] = _section(PretrainSettings, kwargs.get("pretrain"), "pretrain")
    kwargs["eval"] = _section(
        EvalProtocol, kwargs.get("eval"), "eval",
        convert=lambda k, v: ArchSpec.from_dict(v) if k == "arch" and v is not None else v)
    kwargs["nas"] = _section(NasSettings, kwargs.get("nas"), "nas")
    if kwargs.get("toy") is not None:
        kwargs["toy"] = _section(ToySpec, kwargs["toy"], "toy")

    try:
        return DistillConfig(**kwargs)
    except TypeError as e:
        raise ConfigError("<source>", str(e)) from None


def load_config_file(path: str | Path) -> DistillConfig:
    return load_config(Path(path).read_text())
