"""Flat ``key = value`` run configuration.

Every key has a default; the SGD, loss and augmentation defaults are the
reference training settings. Unknown keys are rejected. ``dump`` writes the
effective configuration in the same format, so an echoed file reproduces a run.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields

from .data import AugmentPolicy
from .losses import HybridLossConfig
from .nn import ModelConfig
from .optim import SgdConfig


ALIASES = {"lambda": "lam"}


class RunConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "f32"
    # model
    in_channels: int = 3
    stem_channels: int = 16
    stem_stride: int = 2
    stage_channels: str = "16,32,32"
    stage_strides: str = "1,2,2"
    attention_channels: str = "32,32"
    placement: str = "sea"
    se_reduction: int = 4
    num_classes: int = 5
    feature_dim: int = 0
    freeze_backbone: bool = False
    batch_norm: bool = True
    # loss
    lam: float = 0.1
    center_alpha: float = 0.5
    # optimizer
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 1e-8
    batch_size: int = 20
    epochs: int = 30
    # augmentation
    augment: bool = True
    rotation: float = 10.0
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    # data
    image_size: int = 64
    full_image_size: int = 610
    crop_threshold: float = 10.0
    balanced_test: bool = False
    synth_classes: int = 5
    synth_train_per_class: int = 200
    synth_test_per_class: int = 50
    synth_seed: int = 0
    cache_dir: str = "cache"
    # gradient check
    gradcheck_batch: int = 2
    gradcheck_size: int = 8
    gradcheck_channels: int = 8
    gradcheck_entries: int = 12
    gradcheck_tolerance: float = 1e-4

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @staticmethod
    def canonical(key):
        key = key.strip().replace("-", "_")
        return ALIASES.get(key, key)

    def set(self, key, value):
        key = self.canonical(key)
        if key not in self.keys():
            raise RunConfigError(f"unknown config key {key!r}")
        kind = type(_DEFAULTS[key])
        try:
            if kind is bool:
                if isinstance(value, bool):
                    parsed = value
                elif str(value).strip().lower() in ("1", "true", "yes", "on"):
                    parsed = True
                elif str(value).strip().lower() in ("0", "false", "no", "off"):
                    parsed = False
                else:
                    raise ValueError(value)
            else:
                parsed = kind(value)
        except (TypeError, ValueError):
            raise RunConfigError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}") from None
        setattr(self, key, parsed)

    @classmethod
    def from_text(cls, text):
        ini = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        ini.optionxform = str
        try:
            ini.read_string("[run]\n" + text)
        except configparser.Error as exc:
            raise RunConfigError(f"malformed config: {exc}") from None
        cfg = cls()
        unknown = [k for k in ini["run"] if cls.canonical(k) not in cls.keys()]
        if unknown:
            raise RunConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for k, v in ini["run"].items():
            cfg.set(k, v)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())

    def dump(self):
        lines = ["# effective run configuration"]
        for k in self.keys():
            v = getattr(self, k)
            if isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dump())

    # ---- views onto the module configs

    def model_config(self):
        return ModelConfig(
            in_channels=self.in_channels,
            stem_channels=self.stem_channels,
            stem_stride=self.stem_stride,
            stage_channels=self.stage_channels,
            stage_strides=self.stage_strides,
            attention_channels=self.attention_channels,
            placement=self.placement,
            se_reduction=self.se_reduction,
            num_classes=self.num_classes,
            feature_dim=self.feature_dim,
            freeze_backbone=self.freeze_backbone,
            batch_norm=self.batch_norm,
        )

    def sgd_config(self):
        return SgdConfig(self.lr, self.momentum, self.weight_decay, self.batch_size)

    def loss_config(self, class_weights=None):
        return HybridLossConfig(self.lam, class_weights)

    def augment_policy(self):
        return AugmentPolicy(self.rotation, self.hflip_prob, self.vflip_prob) if self.augment else None


_DEFAULTS = {f.name: f.default for f in fields(RunConfig)}
