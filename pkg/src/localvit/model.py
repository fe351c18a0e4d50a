"""Classifier assembly: patch embedding -> encoder layers -> class-token head.

Every ablation row is a named preset over :class:`ModelConfig`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Union

import numpy as np

from . import tensor as T
from .blocks import (
    CONV1X1,
    FFN_VARIANTS,
    LOCALITY,
    PLAIN,
    ActivationSpec,
    EncoderLayer,
    Init,
    LayerNorm,
    Linear,
    Module,
)
from .tensor import Tensor

CHECKPOINT_FORMAT = "localvit-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """A ModelConfig field is invalid; ``field`` names it."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 12
    heads: int = 3
    gamma: int = 4
    # 1-based indices of layers whose FFN is the locality variant
    locality_layers: FrozenSet[int] = frozenset()
    # FFN variant for every other layer
    base_variant: str = PLAIN
    activation: ActivationSpec = field(default_factory=lambda: ActivationSpec("hswish"))
    plain_activation: str = "gelu"
    kernel_size: int = 3
    depthwise: bool = True
    in_channels: int = 3
    num_classes: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "locality_layers", frozenset(int(i) for i in self.locality_layers))
        if isinstance(self.activation, dict):
            object.__setattr__(self, "activation", ActivationSpec(**self.activation))
        self.validate()

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "embed_dim", "depth", "heads", "gamma", "in_channels", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size", f"{self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError("heads", f"{self.heads} does not divide embed_dim {self.embed_dim}")
        bad = sorted(i for i in self.locality_layers if not 1 <= i <= self.depth)
        if bad:
            raise ConfigError("locality_layers", f"indices {bad} outside 1..{self.depth}")
        if self.base_variant not in (PLAIN, CONV1X1):
            raise ConfigError("base_variant", f"must be 'plain' or 'conv1x1', got {self.base_variant!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size", f"must be odd and positive, got {self.kernel_size}")
        if self.plain_activation not in ("relu6", "hswish", "gelu"):
            raise ConfigError("plain_activation", f"unknown activation {self.plain_activation!r}")
        if self.activation.gate == "se" and self.locality_layers:
            try:
                self.activation.se_width(self.gamma * self.embed_dim)
            except ValueError as exc:
                raise ConfigError("activation", str(exc)) from None

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2

    def layer_variant(self, index: int) -> str:
        """Variant of 1-based layer ``index``."""
        return LOCALITY if index in self.locality_layers else self.base_variant

    def to_dict(self) -> dict:
        out = asdict(self)
        out["locality_layers"] = sorted(self.locality_layers)
        out["activation"] = self.activation.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], f"unknown config key(s) {unknown}")
        data = dict(data)
        if "activation" in data:
            act = data["activation"]
            if not isinstance(act, dict):
                raise ConfigError("activation", "must be an object")
            akeys = set(ActivationSpec.__dataclass_fields__)
            extra = sorted(set(act) - akeys)
            if extra:
                raise ConfigError("activation", f"unknown key(s) {extra}")
            try:
                data["activation"] = ActivationSpec(**act)
            except ValueError as exc:
                raise ConfigError("activation", str(exc)) from None
        if "locality_layers" in data:
            data["locality_layers"] = frozenset(data["locality_layers"])
        return cls(**data)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

ALL_12 = frozenset(range(1, 13))

_DEIT_T = ModelConfig()
_DEIT_S = replace(_DEIT_T, embed_dim=384, heads=6)
_SE192 = ActivationSpec("hswish", gate="se", se_reduction=192)
_SE_KEEP4 = ActivationSpec("hswish", gate="se", se_keep=4)

# Desk-scale twins: 32x32 inputs, 4x4 patches -> 8x8 token lattice.
_MICRO = ModelConfig(
    image_size=32,
    patch_size=4,
    embed_dim=16,
    depth=2,
    heads=2,
    gamma=2,
    activation=ActivationSpec("hswish"),
    num_classes=4,
)

PRESETS: Dict[str, ModelConfig] = {
    # locality ablation
    "deit-t": _DEIT_T,
    "localvit-t-nodw": replace(_DEIT_T, locality_layers=ALL_12, depthwise=False, activation=ActivationSpec("gelu")),
    "localvit-t-relu6": replace(_DEIT_T, locality_layers=ALL_12, activation=ActivationSpec("relu6")),
    "deit-t-g6": replace(_DEIT_T, gamma=6),
    "localvit-t-g6-nodw": replace(
        _DEIT_T, gamma=6, locality_layers=ALL_12, depthwise=False, activation=ActivationSpec("gelu")
    ),
    "localvit-t-g6": replace(_DEIT_T, gamma=6, locality_layers=ALL_12, activation=ActivationSpec("relu6")),
    # activation ablation (with deit-t and localvit-t-relu6)
    "localvit-t-hswish": replace(_DEIT_T, locality_layers=ALL_12, activation=ActivationSpec("hswish")),
    "localvit-t-eca": replace(
        _DEIT_T, locality_layers=ALL_12, activation=ActivationSpec("hswish", gate="eca", eca_kernel=5)
    ),
    "localvit-t": replace(_DEIT_T, locality_layers=ALL_12, activation=_SE192),
    "localvit-t-se96": replace(
        _DEIT_T, locality_layers=ALL_12, activation=ActivationSpec("hswish", gate="se", se_reduction=96)
    ),
    "localvit-t-se48": replace(
        _DEIT_T, locality_layers=ALL_12, activation=ActivationSpec("hswish", gate="se", se_reduction=48)
    ),
    "localvit-t-se4": replace(
        _DEIT_T, locality_layers=ALL_12, activation=ActivationSpec("hswish", gate="se", se_reduction=4)
    ),
    # placement of the locality layers
    "placement-high": replace(_DEIT_T, locality_layers=frozenset(range(9, 13)), activation=_SE192),
    "placement-mid": replace(_DEIT_T, locality_layers=frozenset(range(5, 9)), activation=_SE192),
    "placement-low": replace(_DEIT_T, locality_layers=frozenset(range(1, 5)), activation=_SE192),
    "placement-low8": replace(_DEIT_T, locality_layers=frozenset(range(1, 9)), activation=_SE192),
    "placement-all": replace(_DEIT_T, locality_layers=ALL_12, activation=_SE192),
    # tiny and small models
    "deit-s": _DEIT_S,
    "localvit-s": replace(_DEIT_S, locality_layers=ALL_12, activation=_SE_KEEP4),
    # desk-scale
    "micro-localvit": replace(_MICRO, locality_layers=frozenset({1, 2})),
    "micro-plain": replace(_MICRO, gamma=3),
    "micro-conv": replace(_MICRO, base_variant=CONV1X1),
    "micro-localvit-se": replace(
        _MICRO, locality_layers=frozenset({1, 2}), activation=ActivationSpec("hswish", gate="se", se_keep=4)
    ),
    "micro-localvit-eca": replace(
        _MICRO, locality_layers=frozenset({1, 2}), activation=ActivationSpec("hswish", gate="eca", eca_kernel=3)
    ),
}

# expansion ratio x SE (SE keeps 4 channels)
for _g in (1, 2, 3, 4):
    PRESETS[f"gamma-{_g}"] = replace(_DEIT_T, gamma=_g, locality_layers=ALL_12, activation=ActivationSpec("hswish"))
    PRESETS[f"gamma-{_g}-se"] = replace(_DEIT_T, gamma=_g, locality_layers=ALL_12, activation=_SE_KEEP4)


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(b, c, H, W) -> (b, N, c*p*p), patches row-major, features ordered (c, py, px)."""
    b, c, hh, ww = images.shape
    gh, gw = hh // patch, ww // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch * patch)


class Model(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        init = Init(cfg.seed)
        d = cfg.embed_dim
        self.patch_embed = Linear(cfg.patch_dim, d, init)
        self.cls_token = init.trunc_normal(1, 1, d)
        self.pos_embed = init.trunc_normal(1, cfg.num_patches + 1, d)
        self.layers: List[EncoderLayer] = []
        for i in range(1, cfg.depth + 1):
            variant = cfg.layer_variant(i)
            act = cfg.activation if variant == LOCALITY else ActivationSpec(cfg.plain_activation)
            self.layers.append(
                EncoderLayer(
                    d,
                    cfg.heads,
                    cfg.gamma,
                    variant,
                    act,
                    init,
                    kernel_size=cfg.kernel_size,
                    depthwise=cfg.depthwise,
                )
            )
        self.norm = LayerNorm(d)
        self.head = Linear(d, cfg.num_classes, init)

    @property
    def lattice(self):
        return (self.cfg.grid, self.cfg.grid)

    def features(self, images: Union[np.ndarray, Tensor]) -> Tensor:
        """Token states after the last encoder layer, (b, N+1, d)."""
        data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        cfg = self.cfg
        if data.ndim != 4 or data.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise T.ShapeError(
                f"expected images (b, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {data.shape}"
            )
        b = data.shape[0]
        x = self.patch_embed(Tensor(patchify(data, cfg.patch_size)))
        cls = T.broadcast_to(self.cls_token, (b, 1, cfg.embed_dim))
        x = T.concat([cls, x], axis=1) + self.pos_embed
        for layer in self.layers:
            x = layer(x, self.lattice)
        return x

    def __call__(self, images: Union[np.ndarray, Tensor]) -> Tensor:
        x = self.norm(self.features(images)[:, 0, :])
        return self.head(x)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        for name, st in self.named_buffers():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


def forward_classify(model: Model, images, training: bool = False) -> Tensor:
    model.train(training)
    return model(images)


def parameter_checksum(model: Model) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, arr in model.state_arrays().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path: Union[str, Path]) -> None:
    """Write a JSON manifest of every named parameter and BN buffer.

    Floats are written with ``repr`` precision so a load is bit-exact.
    """
    tensors = [
        {"name": name, "shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
        for name, arr in model.state_arrays().items()
    ]
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "tensors": tensors,
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: Union[str, Path]) -> Model:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    model = build_model(ModelConfig.from_dict(doc["config"]))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    seen = set()
    for entry in doc["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
        if name in params:
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {shape} does not match model {params[name].shape}")
            params[name].data = arr
        else:
            owner, _, attr = name.rpartition(".")
            if owner not in buffers or attr not in ("running_mean", "running_var"):
                raise ValueError(f"{path}: unexpected tensor {name!r}")
            setattr(buffers[owner], attr, arr)
        seen.add(name)
    missing = sorted(set(params) - seen)
    if missing:
        raise ValueError(f"{path}: missing tensors {missing[:5]}")
    return model

