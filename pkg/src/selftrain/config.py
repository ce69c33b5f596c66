"""Validated configuration tree.

Every section is a frozen pydantic model that rejects unknown keys, so a
typo in a run config fails loudly instead of silently falling back to a
default. ``RunConfig()`` with no arguments is the reference operating point:
dropout 0.5, final stochastic-depth survival 0.8, RandAugment with two ops at
magnitude 27, confidence threshold 0.3, soft pseudo labels.
"""
from __future__ import annotations

import json
import math
import re
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError

AUGMENT_KINDS = (
    "translate-x",
    "translate-y",
    "shear-x",
    "shear-y",
    "rotate",
    "flip-horizontal",
    "brightness",
    "contrast",
    "sharpness",
    "invert",
    "cutout",
)
AugmentKind = Literal[
    "translate-x",
    "translate-y",
    "shear-x",
    "shear-y",
    "rotate",
    "flip-horizontal",
    "brightness",
    "contrast",
    "sharpness",
    "invert",
    "cutout",
]

CORRUPTION_KINDS = (
    "gaussian-noise",
    "shot-noise",
    "defocus-blur",
    "motion-blur",
    "snow-lite",
    "fog-lite",
    "brightness",
    "contrast",
    "pixelate",
    "jpeg-lite",
)
CorruptionKind = Literal[
    "gaussian-noise",
    "shot-noise",
    "defocus-blur",
    "motion-blur",
    "snow-lite",
    "fog-lite",
    "brightness",
    "contrast",
    "pixelate",
    "jpeg-lite",
]
PERTURBATION_KINDS = ("gaussian-noise", "translate", "rotate", "brightness", "scale-lite")
PerturbationKind = Literal["gaussian-noise", "translate", "rotate", "brightness", "scale-lite"]

ARCH_PATTERN = re.compile(r"^(mlp-S|mlp-L|resnetlite-[1-9][0-9]*)$")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RandAugmentPolicy(_Strict):
    num_ops: int = Field(2, ge=1)
    magnitude: int = Field(27, ge=0, le=30)
    op_menu: tuple[AugmentKind, ...] = Field(AUGMENT_KINDS, min_length=1)


class NoiseConfig(_Strict):
    dropout_rate: float = Field(0.5, ge=0.0, lt=1.0)
    sd_final_survival: float = Field(0.8, gt=0.0, le=1.0)
    augment_policy: Union[RandAugmentPolicy, Literal["standard"]] = RandAugmentPolicy()
    enable_aug: bool = True
    enable_sd: bool = True
    enable_dropout: bool = True

    @classmethod
    def clean(cls):
        """All three noise sources off: the plain function f."""
        return cls(enable_aug=False, enable_sd=False, enable_dropout=False)

    @property
    def is_clean(self):
        return not (self.enable_aug or self.enable_sd or self.enable_dropout)


class TrainConfig(_Strict):
    labeled_batch: int = Field(2048, ge=1)
    ratio: int = Field(1, ge=1)
    epochs: int = Field(350, ge=0)
    base_lr: float = Field(0.128, gt=0.0)
    lr_reference_batch: int = Field(2048, ge=1)
    lr_decay: float = Field(0.97, gt=0.0, lt=1.0)
    decay_interval_epochs: Optional[float] = Field(None, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    noise: NoiseConfig = NoiseConfig()
    pseudo_noise: Optional[NoiseConfig] = None
    label_mode: Literal["soft", "hard"] = "soft"
    loss_mode: Literal["concat_mean", "separate_means"] = "concat_mean"
    seed: int = Field(0, ge=0)
    warm_start_from: Optional[str] = None

    @property
    def decay_interval(self):
        """Epochs between LR decays: 2.4 at 350 epochs, 4.8 at 700, proportional otherwise."""
        if self.decay_interval_epochs is not None:
            return self.decay_interval_epochs
        if self.epochs == 0:
            return 2.4
        return self.epochs * 2.4 / 350.0

    @property
    def unlabeled_noise(self):
        return self.pseudo_noise if self.pseudo_noise is not None else self.noise


class PseudoConfig(_Strict):
    tau: float = Field(0.3, ge=0.0, lt=1.0)
    cap: Optional[int] = Field(None, ge=1)
    balance: bool = True


class SynthConfig(_Strict):
    classes: int = Field(10, ge=2)
    per_class_labeled: int = Field(10, ge=1)
    unlabeled_total: int = Field(10000, ge=1)
    in_domain_fraction: float = Field(0.7, ge=0.0, le=1.0)
    test_total: int = Field(2000, ge=1)
    image_side: int = Field(28, ge=4)
    noise_level: float = Field(0.4, ge=0.0)
    max_shift: int = Field(3, ge=0)
    max_rotate: float = Field(20.0, ge=0.0, le=180.0)
    jitter: float = Field(0.15, ge=0.0, le=0.5)
    prototype_seed: Optional[int] = Field(0, ge=0)


class IdxConfig(_Strict):
    classes: int = Field(10, ge=2)
    labeled_images: str
    labeled_labels: str
    unlabeled_images: str
    test_images: str
    test_labels: str


class DataConfig(_Strict):
    source: Literal["synthetic", "idx"] = "synthetic"
    synthetic: SynthConfig = SynthConfig()
    idx: Optional[IdxConfig] = None


def _check_arch(value):
    if not ARCH_PATTERN.match(value):
        raise ValueError(f"unknown arch {value!r}; expected mlp-S, mlp-L or resnetlite-N")
    return value


class StageConfig(_Strict):
    arch: str = "mlp-L"
    train: TrainConfig = TrainConfig()

    _arch = field_validator("arch")(_check_arch)


class PlanEntry(_Strict):
    arch: str = "mlp-L"
    ratio: int = Field(14, ge=1)
    train: Optional[TrainConfig] = None

    _arch = field_validator("arch")(_check_arch)


class EvalConfig(_Strict):
    corruption_kinds: tuple[CorruptionKind, ...] = CORRUPTION_KINDS
    severities: tuple[int, ...] = (1, 2, 3, 4, 5)
    perturbation_kinds: tuple[PerturbationKind, ...] = PERTURBATION_KINDS
    frames: int = Field(10, ge=2)
    perturb_images: int = Field(200, ge=1)
    fgsm_eps: tuple[float, ...] = tuple(e / 255 for e in (1, 2, 4, 8, 16))
    pgd_eps: float = Field(16 / 255, ge=0.0)
    pgd_steps: int = Field(10, ge=1)
    pgd_step_size: Optional[float] = Field(None, gt=0.0)
    baseline: str = "shipped"

    @field_validator("severities")
    @classmethod
    def _severities(cls, value):
        if not value or any(s < 1 or s > 5 for s in value):
            raise ValueError("severities must be a non-empty subset of 1..5")
        return value

    @field_validator("fgsm_eps")
    @classmethod
    def _eps(cls, value):
        if any(e < 0 or not math.isfinite(e) for e in value):
            raise ValueError("eps values must be finite and >= 0")
        return value


class RunConfig(_Strict):
    seed: int = Field(0, ge=0)
    data: DataConfig = DataConfig()
    teacher: StageConfig = StageConfig()
    student: TrainConfig = TrainConfig()
    pseudo: PseudoConfig = PseudoConfig()
    plan: tuple[PlanEntry, ...] = Field((PlanEntry(ratio=14), PlanEntry(ratio=14), PlanEntry(ratio=28)), min_length=1)
    eval: EvalConfig = EvalConfig()


def _error_path(exc):
    err = exc.errors()[0]
    loc = [str(p) for p in err["loc"]]
    # drop union-branch tags pydantic inserts, e.g. "RandAugmentPolicy"
    loc = [p for p in loc if not p[:1].isupper() and not p.startswith("literal[")]
    return ".".join(loc) or "<root>", err["msg"]


def parse_config(tree):
    """Validate a decoded JSON tree into a :class:`RunConfig`."""
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a JSON object", "<root>")
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        path, msg = _error_path(exc)
        raise ConfigError(msg, path) from None


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", str(path)) from None
    try:
        tree = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno})", str(path)) from None
    return parse_config(tree)


def dump_config(config):
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True)
