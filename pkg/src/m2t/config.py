"""Run configuration: dataclasses, JSON (de)serialization, presets.

Configs are plain JSON documents. Parsing is strict: unknown keys and type
mismatches are reported with their full field path so a bad config fails
loudly before any compute happens. ``key.path=value`` override strings
(values parsed as JSON, falling back to raw strings) are applied to the
document before validation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Optional

from .data import AugmentSpec
from .model import MlpSpec

MODES = ("byol_m2t", "byol_plain", "byol_synced", "moco")
OPTIMIZERS = ("sgd", "lars")
BN_AUTO = "auto"


class ConfigError(ValueError):
    """Invalid configuration; message starts with the offending field path."""


@dataclass
class DataConfig:
    kind: str = "synthetic"          # synthetic | idx
    num_classes: int = 10
    dim: int = 32
    per_class: int = 500
    spread: float = 0.3
    images_path: Optional[str] = None
    labels_path: Optional[str] = None

    def validate(self, path: str = "data") -> None:
        if self.kind not in ("synthetic", "idx"):
            raise ConfigError(f"{path}.kind: must be 'synthetic' or 'idx'")
        if self.kind == "synthetic":
            if self.num_classes < 2:
                raise ConfigError(f"{path}.num_classes: must be >= 2")
            if self.dim < 2:
                raise ConfigError(f"{path}.dim: must be >= 2")
            if self.per_class < 1:
                raise ConfigError(f"{path}.per_class: must be >= 1")
            if self.spread < 0:
                raise ConfigError(f"{path}.spread: must be >= 0")
        else:
            if not self.images_path:
                raise ConfigError(f"{path}.images_path: required for kind 'idx'")


@dataclass
class TrainConfig:
    # identity of the run
    mode: str
    seed: int
    epochs: int

    # batching
    batch_size: int = 128
    workers: int = 4

    # optimization
    optimizer: str = "sgd"
    lr_base: float = 0.4
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    trust_coeff: float = 0.001
    wd_exclude_bias_bn: bool = False
    warmup_epochs: int = 1
    warmup_factor: float = 0.001
    reference_batch: int = 256
    auto_scale: bool = False

    # teacher coefficients
    m_base: float = 0.032
    m_schedule: str = "cosine_to_zero"
    alpha_base: float = 1.0
    alpha_schedule: str = "cosine_to_zero"
    alpha_semantics: str = "weight_on_batch"

    # normalization wiring ("auto" derives from mode)
    student_bn: str = BN_AUTO
    teacher_bn: str = BN_AUTO
    eps: float = 1e-5

    # contrastive mode
    temperature: float = 0.2
    queue_capacity: int = 256

    # model (None -> package defaults sized from the data dim)
    encoder: Optional[MlpSpec] = None
    projector: Optional[MlpSpec] = None
    predictor: Optional[MlpSpec] = None

    # data and augmentation
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    # evaluation
    probe_epochs: int = 80
    probe_lr: float = 0.5
    probe_batch: int = 256
    probe_test_fraction: float = 0.2

    # bookkeeping
    log_interval: int = 10

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer: must be one of {OPTIMIZERS}")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        if self.batch_size % self.workers != 0:
            raise ConfigError(
                f"workers: batch_size {self.batch_size} not divisible by "
                f"{self.workers}")
        for name in ("lr_base", "m_base", "alpha_base"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if self.alpha_base > 1:
            raise ConfigError("alpha_base: must lie in [0, 1]")
        if self.m_base > 1:
            raise ConfigError("m_base: must lie in [0, 1]")
        if self.alpha_semantics not in ("weight_on_batch", "weight_on_history"):
            raise ConfigError("alpha_semantics: must be 'weight_on_batch' or "
                              "'weight_on_history'")
        for name in ("m_schedule", "alpha_schedule"):
            if getattr(self, name) not in ("cosine_to_zero", "constant"):
                raise ConfigError(f"{name}: must be 'cosine_to_zero' or 'constant'")
        if self.temperature <= 0:
            raise ConfigError("temperature: must be > 0")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity: must be >= 1")
        if not 0 < self.probe_test_fraction < 1:
            raise ConfigError("probe_test_fraction: must lie in (0, 1)")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs: must be >= 0")
        if self.log_interval < 1:
            raise ConfigError("log_interval: must be >= 1")
        resolved = self.resolved_bn()
        if resolved[0] not in ("plain", "synced"):
            raise ConfigError(f"student_bn: invalid kind {resolved[0]!r}")
        if resolved[1] not in ("momentum", "plain", "synced", "shuffling"):
            raise ConfigError(f"teacher_bn: invalid kind {resolved[1]!r}")
        self.data.validate()

    def resolved_bn(self) -> tuple[str, str]:
        """Concrete (student_bn, teacher_bn) after applying the mode preset."""
        defaults = {
            "byol_m2t": ("plain", "momentum"),
            "byol_plain": ("plain", "plain"),
            "byol_synced": ("synced", "synced"),
            "moco": ("plain", "momentum"),
        }
        s, t = defaults.get(self.mode, ("plain", "momentum"))
        if self.student_bn != BN_AUTO:
            s = self.student_bn
        if self.teacher_bn != BN_AUTO:
            t = self.teacher_bn
        return s, t

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (DataConfig,)):
                out[f.name] = {df.name: getattr(v, df.name)
                               for df in fields(v)}
            elif isinstance(v, AugmentSpec):
                out[f.name] = v.to_dict()
            elif isinstance(v, MlpSpec):
                out[f.name] = v.to_dict()
            else:
                out[f.name] = v
        return out


_REQUIRED = ("mode", "seed", "epochs")


def _check_unknown(d: dict, known: set, path: str) -> None:
    for key in d:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown field")


def from_dict(d: dict) -> TrainConfig:
    if not isinstance(d, dict):
        raise ConfigError("config: expected a JSON object")
    known = {f.name for f in fields(TrainConfig)}
    _check_unknown(d, known, "")
    for name in _REQUIRED:
        if name not in d:
            raise ConfigError(f"{name}: missing required field")
    kwargs = dict(d)
    if "data" in kwargs and kwargs["data"] is not None:
        sub = kwargs["data"]
        if not isinstance(sub, dict):
            raise ConfigError("data: expected an object")
        _check_unknown(sub, {f.name for f in fields(DataConfig)}, "data")
        try:
            kwargs["data"] = DataConfig(**sub)
        except TypeError as e:
            raise ConfigError(f"data: {e}") from None
    if "augment" in kwargs and kwargs["augment"] is not None:
        sub = kwargs["augment"]
        if not isinstance(sub, dict):
            raise ConfigError("augment: expected an object")
        try:
            kwargs["augment"] = AugmentSpec.from_dict(sub)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"augment: {e}") from None
    for name in ("encoder", "projector", "predictor"):
        if kwargs.get(name) is not None:
            try:
                kwargs[name] = MlpSpec.from_dict(kwargs[name])
            except (TypeError, KeyError, ValueError) as e:
                raise ConfigError(f"{name}: {e}") from None
    try:
        cfg = TrainConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    cfg.validate()
    return cfg


def loads(text: str) -> TrainConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON ({e})") from None
    return from_dict(doc)


def load(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return loads(f.read())


def dumps(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# overrides


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply repeated ``dotted.path=value`` strings to a config document."""
    out = json.loads(json.dumps(doc))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part} is not an object")
        node[parts[-1]] = value
    return out


# ---------------------------------------------------------------------------
# presets


def preset(name: str) -> dict:
    """Built-in config documents, also usable as starting points."""
    base = {
        "mode": "byol_m2t",
        "seed": 0,
        "epochs": 30,
        "batch_size": 128,
        "workers": 4,
        "lr_base": 0.4,
        "data": {"kind": "synthetic", "num_classes": 10, "dim": 32,
                 "per_class": 500, "spread": 0.3},
        "augment": {"noise_std": 0.3, "mask_prob": 0.2,
                    "scale_range": [0.8, 1.25]},
    }
    if name == "default-synth":
        return base
    if name == "table1-grid":
        doc = dict(base)
        doc["epochs"] = 10
        return doc
    if name == "moco-smoke":
        # The deep BN-terminated projector keeps projections batch-centered
        # and view pairs near-uncorrelated at init (each random BN+ReLU
        # layer contracts cross-view correlation), so the contrastive loss
        # starts at the uniform-softmax level without needing augmentation
        # so aggressive that nothing remains learnable.
        return {
            "mode": "moco",
            "seed": 0,
            "epochs": 10,
            "batch_size": 128,
            "workers": 4,
            "lr_base": 1.2,
            "m_base": 0.001,
            "m_schedule": "constant",
            "alpha_base": 0.064,
            "alpha_schedule": "constant",
            "temperature": 0.3,
            "queue_capacity": 256,
            "projector": {"widths": [64, 64, 64, 64, 64, 64, 64],
                          "bn": [True] * 6,
                          "relu": [True] * 5 + [False]},
            "data": {"kind": "synthetic", "num_classes": 10, "dim": 32,
                     "per_class": 3000, "spread": 0.3},
            "augment": {"noise_std": 0.3, "mask_prob": 0.2,
                        "scale_range": [0.5, 1.5]},
        }
    raise ConfigError(f"preset: unknown preset {name!r}")


PRESET_NAMES = ("default-synth", "table1-grid", "moco-smoke")
