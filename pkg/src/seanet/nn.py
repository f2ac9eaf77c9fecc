"""Network blocks: residual backbone, Attention Net, SE block, classifier head.

Feature maps are NHWC. The four architecture variants differ only in where SE
blocks sit relative to the attention convolutions, see :class:`Placement`.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sgt
from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    """Checkpoint missing, malformed, or shape-incompatible with the config."""


class Placement(enum.Enum):
    AT = "at"
    SE_AT = "se-at"
    AT_SE = "at-se"
    SEA = "sea"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        if key.endswith("-net"):
            key = key[:-4]
        for p in cls:
            if p.value == key:
                return p
        raise ConfigError(f"unknown placement {value!r}; expected one of at, se-at, at-se, sea")

    def se_count(self, n_convs):
        return {Placement.AT: 0, Placement.SE_AT: 1, Placement.AT_SE: 1, Placement.SEA: n_convs}[self]


def _ints(value):
    if isinstance(value, str):
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    return tuple(int(v) for v in value)


@dataclass
class ModelConfig:
    in_channels: int = 3
    stem_channels: int = 16
    stem_stride: int = 2
    stage_channels: tuple = (16, 32, 32)
    stage_strides: tuple = (1, 2, 2)
    attention_channels: tuple = (32, 32)
    placement: Placement = Placement.SEA
    se_reduction: int = 4
    num_classes: int = 5
    feature_dim: int = 0
    freeze_backbone: bool = False
    batch_norm: bool = True

    def __post_init__(self):
        self.stage_channels = _ints(self.stage_channels)
        self.stage_strides = _ints(self.stage_strides)
        self.attention_channels = _ints(self.attention_channels)
        self.placement = Placement.parse(self.placement)

    @property
    def channels(self):
        return self.stage_channels[-1] if self.stage_channels else self.stem_channels

    def se_widths(self):
        """Channel width seen by each SE block, in forward order."""
        if self.placement is Placement.SE_AT:
            return [self.channels]
        if self.placement is Placement.AT_SE:
            return [self.attention_channels[-1]] if self.attention_channels else []
        if self.placement is Placement.SEA:
            return list(self.attention_channels)
        return []

    def errors(self):
        errs = []
        for name in ("in_channels", "stem_channels", "stem_stride", "se_reduction", "num_classes"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.num_classes < 2:
            errs.append("num_classes must be >= 2")
        if self.feature_dim < 0:
            errs.append("feature_dim must be >= 0 (0 disables the embedding layer)")
        if len(self.stage_channels) != len(self.stage_strides):
            errs.append("stage_channels and stage_strides must have equal length")
        if any(c < 1 for c in self.stage_channels) or any(s < 1 for s in self.stage_strides):
            errs.append("stage channels and strides must be >= 1")
        if not self.attention_channels:
            errs.append("attention_channels needs at least one layer")
        elif self.attention_channels[-1] != self.channels:
            errs.append(
                f"last attention width {self.attention_channels[-1]} must equal backbone channels {self.channels}"
            )
        if self.se_reduction >= 1:
            for width in self.se_widths():
                if width % self.se_reduction:
                    errs.append(f"SE width {width} not divisible by reduction {self.se_reduction}")
        return errs

    def validate(self):
        errs = self.errors()
        if errs:
            raise ConfigError("invalid model config: " + "; ".join(errs))
        return self

    def output_size(self, image_size):
        s = (image_size - 1) // self.stem_stride + 1
        for stride in self.stage_strides:
            s = (s - 1) // stride + 1
        return s

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, Placement):
                v = v.value
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d):
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.type in ("int", int):
                v = int(v)
            elif f.type in ("bool", bool):
                v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            kwargs[f.name] = v
        return cls(**kwargs)


# ---------------------------------------------------------------- parameter groups


@dataclass
class SeBlockParams:
    """``w2`` (C×C/r) squeezes, ``w1`` (C/r×C) expands back to C."""

    w1: Tensor
    w2: Tensor
    r: int

    @property
    def channels(self):
        return self.w2.shape[0]


@dataclass
class AttentionNetParams:
    convs: list  # [(weight C_in×C_out, bias C_out), ...]

    @property
    def schedule(self):
        return [w.shape[1] for w, _ in self.convs]


@dataclass
class ConvUnit:
    """A convolution followed by optional batch norm; ``running`` holds [mean, var]."""

    weight: Tensor
    bias: Tensor | None = None
    gamma: Tensor | None = None
    beta: Tensor | None = None
    running: list | None = None

    def __call__(self, x, stride=1, training=True):
        if self.weight.ndim == 4:
            h = T.conv3x3(x, self.weight, self.bias, stride=stride)
        else:
            h = T.strided_conv1x1(x, self.weight, stride)
        if self.gamma is not None:
            h = T.batch_norm(h, self.gamma, self.beta, self.running, training=training)
        return h


@dataclass
class ResidualBlockParams:
    conv1: ConvUnit
    conv2: ConvUnit
    proj: ConvUnit | None
    stride: int


@dataclass
class BackboneParams:
    stem: ConvUnit
    stem_stride: int
    blocks: list
    frozen: bool = False


def se_forward(g, p):
    if g.shape[3] != p.channels:
        raise T.DimensionError(f"SE block expects {p.channels} channels, input has {g.shape[3]}")
    n, c = g.shape[0], g.shape[3]
    z = T.reshape(T.global_avg_pool(g), (n, c))
    z_hat = T.matmul(T.relu(T.matmul(z, p.w2)), p.w1)
    gate = T.sigmoid(z_hat)
    return T.mul(g, T.reshape(gate, (n, 1, 1, c)))


def refine(u, p, placement, se):
    """Run the attention convolutions with SE blocks injected; returns the refined map A."""
    placement = Placement.parse(placement)
    expected = placement.se_count(len(p.convs))
    if len(se) != expected:
        raise ConfigError(f"placement {placement.value} with {len(p.convs)} convs needs {expected} SE blocks, got {len(se)}")
    a = u
    if placement is Placement.SE_AT:
        a = se_forward(a, se[0])
    for i, (w, b) in enumerate(p.convs):
        a = T.relu(T.conv1x1(a, w, b))
        if placement is Placement.SEA:
            a = se_forward(a, se[i])
    if placement is Placement.AT_SE:
        a = se_forward(a, se[0])
    return a


def attention_forward(u, p, placement, se):
    """Attend over the channels of ``u``; returns ``(attended, feature_vec)``."""
    a = refine(u, p, placement, se)
    if a.shape != u.shape:
        raise T.DimensionError(f"attention output {a.shape} must match input {u.shape}")
    n, c = u.shape[0], u.shape[3]
    x = T.global_avg_pool(a)
    y = T.global_avg_pool(u)
    s = T.softmax(T.div(x, y), axis=3)
    # gate by C·s so a uniform distribution leaves A unscaled
    attended = T.mul(a, T.mul(s, float(c)))
    feature_vec = T.reshape(T.global_avg_pool(attended), (n, c))
    return attended, feature_vec


def attention_distribution(u, a):
    """Channel attention weights ``softmax(GAP(a) / GAP(u))`` as an N×C array."""
    s = T.softmax(T.div(T.global_avg_pool(a), T.global_avg_pool(u)), axis=3)
    return s.data.reshape(u.shape[0], u.shape[3])


def classifier_head(feature_vec, weight, bias):
    if feature_vec.ndim != 2 or feature_vec.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise T.DimensionError(
            f"classifier head: features {feature_vec.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return T.add(T.matmul(feature_vec, weight), bias)


def residual_block(x, p, training=True, last=False):
    h = T.relu(p.conv1(x, p.stride, training))
    h = p.conv2(h, 1, training)
    shortcut = x if p.proj is None else p.proj(x, p.stride, training)
    # the backbone output must stay strictly positive: it is pooled into a divisor
    return (T.softplus if last else T.relu)(T.add(h, shortcut))


def backbone_forward(images, p, training=True):
    """Residual feature extractor; a frozen backbone always runs on its running statistics."""
    training = training and not p.frozen
    u = T.relu(p.stem(images, p.stem_stride, training))
    for i, block in enumerate(p.blocks):
        u = residual_block(u, block, training, last=i == len(p.blocks) - 1)
    return u


# ---------------------------------------------------------------- model


class Model:
    """Backbone → attention (with SE placement) → optional embedding → classifier.

    ``params`` maps names to trainable tensors; ``buffers`` holds batch-norm
    running statistics, updated by training-mode forwards only.
    """

    def __init__(self, config, params, buffers=None):
        self.config = config
        self.params = params
        self.buffers = buffers if buffers is not None else initial_buffers(config, params["head.w"].dtype)
        self.training = True
        self.backbone = self._backbone()
        self.attention = AttentionNetParams(
            [(params[f"attention.{i}.w"], params[f"attention.{i}.b"]) for i in range(len(config.attention_channels))]
        )
        self.se = [
            SeBlockParams(params[f"se.{i}.w1"], params[f"se.{i}.w2"], config.se_reduction)
            for i in range(len(config.se_widths()))
        ]
        self.embed = (params["embed.w"], params["embed.b"]) if config.feature_dim else None
        self.head = (params["head.w"], params["head.b"])

    def _unit(self, prefix):
        p = self.params
        if f"{prefix}.gamma" in p:
            running = [self.buffers[f"{prefix}.running_mean"], self.buffers[f"{prefix}.running_var"]]
            return ConvUnit(p[f"{prefix}.w"], None, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], running)
        return ConvUnit(p[f"{prefix}.w"], p.get(f"{prefix}.b"))

    def _backbone(self):
        blocks = []
        for i, stride in enumerate(self.config.stage_strides):
            pre = f"backbone.stage{i}"
            proj = self._unit(f"{pre}.proj") if f"{pre}.proj.w" in self.params else None
            blocks.append(ResidualBlockParams(self._unit(f"{pre}.conv1"), self._unit(f"{pre}.conv2"), proj, stride))
        return BackboneParams(
            self._unit("backbone.stem"), self.config.stem_stride, blocks, self.config.freeze_backbone
        )

    def parameters(self):
        return dict(self.params)

    def trainable_parameters(self):
        """Parameters handed to the optimizer; a frozen backbone is excluded."""
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def features(self, images, training=None):
        training = self.training if training is None else training
        u = backbone_forward(images, self.backbone, training)
        _, fv = attention_forward(u, self.attention, self.config.placement, self.se)
        if self.embed is not None:
            fv = T.add(T.matmul(fv, self.embed[0]), self.embed[1])
        return fv

    def forward(self, images, training=None):
        """Return ``(logits N×K, features N×D)``."""
        if not isinstance(images, Tensor):
            images = Tensor(images)
        feats = self.features(images, training)
        return classifier_head(feats, *self.head), feats

    __call__ = forward

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        out = {k: v.data.copy() for k, v in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def clone(self):
        params = {
            k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k, dtype=v.dtype)
            for k, v in self.params.items()
        }
        return Model(self.config, params, {k: v.copy() for k, v in self.buffers.items()})


def _conv_shapes(shapes, cfg, prefix, wshape):
    shapes[f"{prefix}.w"] = wshape
    cout = wshape[-1]
    if cfg.batch_norm:
        shapes[f"{prefix}.gamma"] = (cout,)
        shapes[f"{prefix}.beta"] = (cout,)
    elif len(wshape) == 4:
        shapes[f"{prefix}.b"] = (cout,)


def parameter_shapes(cfg):
    """Ordered name → shape map; also the initialization order."""
    shapes = {}
    _conv_shapes(shapes, cfg, "backbone.stem", (3, 3, cfg.in_channels, cfg.stem_channels))
    cin = cfg.stem_channels
    for i, (cout, stride) in enumerate(zip(cfg.stage_channels, cfg.stage_strides)):
        _conv_shapes(shapes, cfg, f"backbone.stage{i}.conv1", (3, 3, cin, cout))
        _conv_shapes(shapes, cfg, f"backbone.stage{i}.conv2", (3, 3, cout, cout))
        if cin != cout or stride != 1:
            _conv_shapes(shapes, cfg, f"backbone.stage{i}.proj", (cin, cout))
        cin = cout
    for i, cout in enumerate(cfg.attention_channels):
        shapes[f"attention.{i}.w"] = (cin, cout)
        shapes[f"attention.{i}.b"] = (cout,)
        cin = cout
    for i, width in enumerate(cfg.se_widths()):
        shapes[f"se.{i}.w1"] = (width // cfg.se_reduction, width)
        shapes[f"se.{i}.w2"] = (width, width // cfg.se_reduction)
    feat = cfg.channels
    if cfg.feature_dim:
        shapes["embed.w"] = (feat, cfg.feature_dim)
        shapes["embed.b"] = (cfg.feature_dim,)
        feat = cfg.feature_dim
    shapes["head.w"] = (feat, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def initial_buffers(cfg, dtype=None):
    dtype = dtype or T.get_dtype()
    out = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gamma"):
            prefix = name[: -len(".gamma")]
            out[f"{prefix}.running_mean"] = np.zeros(shape, dtype=dtype)
            out[f"{prefix}.running_var"] = np.ones(shape, dtype=dtype)
    return out


def _fan_in(shape):
    if len(shape) == 4:
        return shape[0] * shape[1] * shape[2]
    return shape[0]


def _trainable(cfg, name):
    return not (cfg.freeze_backbone and name.startswith("backbone."))


def build_model(cfg, seed=0):
    """Initialize a model: He-uniform weights, zero biases, unit BN scales; deterministic in ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    dtype = T.get_dtype()
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith((".b", ".beta")):
            arr = np.zeros(shape)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        else:
            limit = np.sqrt(6.0 / _fan_in(shape))
            arr = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=_trainable(cfg, name), name=name)
    return Model(cfg, params)


def parameter_count(cfg):
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))


# ---------------------------------------------------------------- checkpoints

MANIFEST = "manifest.txt"


def save_checkpoint(directory, model, buffers=None, state=None):
    """Write parameters, BN statistics and optional extra arrays as SGT1 files plus a manifest.

    The manifest is an INI file with sections ``config`` (the ModelConfig),
    ``params`` and ``buffers`` (name → file) and ``state`` (scalars).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ini = configparser.ConfigParser(interpolation=None)
    ini.optionxform = str
    ini["config"] = {k: str(v) for k, v in model.config.to_dict().items()}
    ini["params"] = {}
    for name, t in model.params.items():
        sgt.save(directory / f"{name}.sgt", t.data)
        ini["params"][name] = f"{name}.sgt"
    ini["buffers"] = {}
    extra = {f"model.{k}": v for k, v in model.buffers.items()}
    extra.update(buffers or {})
    for name, arr in extra.items():
        sgt.save(directory / f"buffer.{name}.sgt", arr)
        ini["buffers"][name] = f"buffer.{name}.sgt"
    ini["state"] = {k: str(v) for k, v in (state or {}).items()}
    with open(directory / MANIFEST, "w") as fh:
        ini.write(fh)


def read_manifest(directory):
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    ini = configparser.ConfigParser(interpolation=None)
    ini.optionxform = str
    try:
        ini.read(path)
    except configparser.Error as exc:
        raise CheckpointError(f"malformed manifest {path}: {exc}") from None
    for section in ("config", "params"):
        if not ini.has_section(section):
            raise CheckpointError(f"manifest {path} lacks a [{section}] section")
    return ini


def load_checkpoint(directory, config=None):
    """Load ``(model, extra_buffers, state)``.

    Raises :class:`CheckpointError` when files are missing or when shapes do not
    match ``config`` (default: the config recorded in the manifest).
    """
    directory = Path(directory)
    ini = read_manifest(directory)
    try:
        cfg = config or ModelConfig.from_dict(dict(ini["config"]))
        cfg.validate()
    except (ConfigError, ValueError) as exc:
        raise CheckpointError(str(exc)) from None
    shapes = parameter_shapes(cfg)
    names = list(ini["params"])
    if set(names) != set(shapes):
        missing = sorted(set(shapes) - set(names))
        extra = sorted(set(names) - set(shapes))
        raise CheckpointError(f"checkpoint parameters do not match config (missing {missing}, unexpected {extra})")

    def read(fname):
        try:
            return sgt.load(directory / fname)
        except (OSError, sgt.TensorFileError) as exc:
            raise CheckpointError(f"cannot read {fname}: {exc}") from None

    params = {}
    for name in shapes:
        arr = read(ini["params"][name])
        if arr.shape != shapes[name]:
            raise CheckpointError(f"parameter {name}: checkpoint shape {arr.shape} != expected {shapes[name]}")
        params[name] = Tensor(arr, requires_grad=_trainable(cfg, name), name=name, dtype=arr.dtype)
    stored = {k: read(v) for k, v in ini["buffers"].items()} if ini.has_section("buffers") else {}
    model_buffers = initial_buffers(cfg, params["head.w"].dtype)
    for k in model_buffers:
        if f"model.{k}" not in stored:
            raise CheckpointError(f"checkpoint lacks batch-norm statistics {k}")
        model_buffers[k] = stored[f"model.{k}"]
    extra = {k: v for k, v in stored.items() if not k.startswith("model.")}
    state = dict(ini["state"]) if ini.has_section("state") else {}
    return Model(cfg, params, model_buffers), extra, state
