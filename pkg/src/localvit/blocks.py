"""Transformer building blocks: attention, the three feed-forward variants,
sequence/lattice conversion, channel gates and class-token routing.

Token tensors are (batch, tokens, dim). When a class token is present it
sits at index 0. Lattices are row-major: token i lives at pixel
(i // w, i % w).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor

LN_EPS = 1e-6
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

PLAIN, CONV1X1, LOCALITY = "plain", "conv1x1", "locality"
FFN_VARIANTS = (PLAIN, CONV1X1, LOCALITY)
BASE_ACTIVATIONS = ("relu6", "hswish", "gelu")


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


class Module:
    """Holds parameters as attributes; children are walked in insertion order."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, BatchNormState]]:
        for key, value in vars(self).items():
            if isinstance(value, BatchNormState):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Init:
    """Seeded weight factory: truncated normal (±2 std) weights, constant biases."""

    def __init__(self, seed: int, std: float = 0.02):
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.std = std

    def trunc_normal(self, *shape: int) -> Tensor:
        n = int(np.prod(shape))
        out = np.empty(0)
        while out.size < n:
            draw = self.rng.standard_normal(n)
            out = np.concatenate([out, draw[np.abs(draw) <= 2.0]])
        return Tensor(out[:n].reshape(shape) * self.std, requires_grad=True)

    @staticmethod
    def zeros(*shape: int) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=True)

    @staticmethod
    def ones(*shape: int) -> Tensor:
        return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    """y = x @ weight + bias, weight stored (in, out)."""

    def __init__(self, d_in: int, d_out: int, init: Init, bias: bool = True):
        self.weight = init.trunc_normal(d_in, d_out)
        self.bias = Init.zeros(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = LN_EPS):
        self.weight = Init.ones(d)
        self.bias = Init.zeros(d)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.weight = Init.ones(c)
        self.bias = Init.zeros(c)
        self.state = BatchNormState(c, momentum=momentum, eps=eps)

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm2d(x, self.weight, self.bias, self.state, self.training)


class PointwiseConv(Module):
    def __init__(self, c_in: int, c_out: int, init: Init, bias: bool = True):
        self.weight = init.trunc_normal(c_out, c_in, 1, 1)
        self.bias = Init.zeros(c_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_pointwise(x, self.weight, self.bias)


class DepthwiseConv(Module):
    def __init__(self, c: int, k: int, init: Init, bias: bool = True):
        if k % 2 == 0:
            raise ValueError(f"depthwise kernel size must be odd, got {k}")
        self.weight = init.trunc_normal(c, 1, k, k)
        self.bias = Init.zeros(c) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_depthwise(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# activations and channel gates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActivationSpec:
    """Base nonlinearity plus an optional channel gate.

    ``gate`` is ``None``, ``"se"`` or ``"eca"``. For SE, ``se_reduction`` is
    the ratio applied to the hidden width (SE-192 on 768 channels keeps 4).
    ``se_keep`` instead fixes the bottleneck width directly and wins when set.
    """

    base: str = "hswish"
    gate: Optional[str] = None
    se_reduction: Optional[int] = None
    se_keep: Optional[int] = None
    eca_kernel: int = 5

    def __post_init__(self):
        if self.base not in BASE_ACTIVATIONS:
            raise ValueError(f"activation base must be one of {BASE_ACTIVATIONS}, got {self.base!r}")
        if self.gate not in (None, "se", "eca"):
            raise ValueError(f"channel gate must be None, 'se' or 'eca', got {self.gate!r}")
        if self.gate == "se" and self.se_reduction is None and self.se_keep is None:
            raise ValueError("SE gate needs se_reduction or se_keep")
        if self.se_reduction is not None and self.se_reduction < 1:
            raise ValueError(f"se_reduction must be >= 1, got {self.se_reduction}")
        if self.eca_kernel % 2 == 0:
            raise ValueError(f"eca_kernel must be odd, got {self.eca_kernel}")

    def se_width(self, channels: int) -> int:
        width = self.se_keep if self.se_keep is not None else channels // self.se_reduction
        if width < 1:
            raise ValueError(f"SE bottleneck width is 0 for {channels} channels at reduction {self.se_reduction}")
        return width

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "gate": self.gate,
            "se_reduction": self.se_reduction,
            "se_keep": self.se_keep,
            "eca_kernel": self.eca_kernel,
        }


def apply_activation(name: str, x: Tensor) -> Tensor:
    if name == "relu6":
        return T.relu6(x)
    if name == "hswish":
        return T.hswish(x)
    if name == "gelu":
        return T.gelu(x)
    raise ValueError(f"unknown activation {name!r}")


class SEGate(Module):
    """Squeeze-and-excitation: sigmoid(FC2(relu(FC1(gap(u))))) scales each channel."""

    def __init__(self, channels: int, width: int, init: Init):
        if width < 1:
            raise ValueError(f"SE bottleneck width must be >= 1, got {width}")
        self.fc1 = Linear(channels, width, init)
        self.fc2 = Linear(width, channels, init)

    def scale(self, u: Tensor) -> Tensor:
        s = T.global_avg_pool(u)
        return T.sigmoid(self.fc2(T.relu(self.fc1(s))))

    def __call__(self, u: Tensor) -> Tensor:
        s = self.scale(u)
        return u * s.reshape(s.shape[0], s.shape[1], 1, 1)


class ECAGate(Module):
    """Efficient channel attention: k-tap channel convolution, no bias."""

    def __init__(self, k: int, init: Init):
        if k % 2 == 0:
            raise ValueError(f"ECA kernel size must be odd, got {k}")
        self.weight = init.trunc_normal(k)

    def scale(self, u: Tensor) -> Tensor:
        return T.sigmoid(T.conv1d_channels(T.global_avg_pool(u), self.weight))

    def __call__(self, u: Tensor) -> Tensor:
        s = self.scale(u)
        return u * s.reshape(s.shape[0], s.shape[1], 1, 1)


def make_gate(spec: ActivationSpec, channels: int, init: Init) -> Optional[Module]:
    if spec.gate == "se":
        return SEGate(channels, spec.se_width(channels), init)
    if spec.gate == "eca":
        return ECAGate(spec.eca_kernel, init)
    return None


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


class MultiHeadAttention(Module):
    """Softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated then projected."""

    def __init__(self, d: int, heads: int, init: Init):
        if heads < 1 or d % heads:
            raise ValueError(f"heads ({heads}) must divide embed dim ({d})")
        self.heads = heads
        self.q = Linear(d, d, init)
        self.k = Linear(d, d, init)
        self.v = Linear(d, d, init)
        self.proj = Linear(d, d, init)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        dh = d // self.heads
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        z = T.matmul(T.softmax_rows(scores), v)
        z = z.transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(z)


# ---------------------------------------------------------------------------
# sequence <-> lattice and class-token routing
# ---------------------------------------------------------------------------


def seq2img(z: Tensor, lattice: Tuple[int, int]) -> Tensor:
    """(b, N, d) -> (b, d, h, w), token i to pixel (i // w, i % w)."""
    b, n, d = z.shape
    h, w = lattice
    if n != h * w:
        raise T.ShapeError(f"seq2img: {n} tokens do not fill a {h}x{w} lattice")
    return z.transpose(0, 2, 1).reshape(b, d, h, w)


def img2seq(y: Tensor) -> Tensor:
    """(b, d, h, w) -> (b, h*w, d); exact inverse of :func:`seq2img`."""
    b, d, h, w = y.shape
    return y.reshape(b, d, h * w).transpose(0, 2, 1)


def class_token_split(z: Tensor, lattice: Tuple[int, int]) -> Tuple[Tensor, Tensor]:
    b, n, d = z.shape
    h, w = lattice
    if n != h * w + 1:
        raise T.ShapeError(f"class_token_split: expected {h * w + 1} tokens (class + {h}x{w}), got {n}")
    return z[:, 0:1, :], z[:, 1:, :]


def class_token_concat(z_cls: Tensor, y_img: Tensor) -> Tensor:
    if z_cls.ndim != 3 or z_cls.shape[1] != 1 or z_cls.shape[0] != y_img.shape[0] or z_cls.shape[2] != y_img.shape[2]:
        raise T.ShapeError(f"class_token_concat: class token {z_cls.shape} incompatible with tokens {y_img.shape}")
    return T.concat([z_cls, y_img], axis=1)


def _require_image_tokens(z: Tensor, lattice: Tuple[int, int], who: str) -> None:
    h, w = lattice
    if z.shape[1] == h * w + 1:
        raise T.ShapeError(f"{who}: class token present; split it off before the feed-forward network")
    if z.shape[1] != h * w:
        raise T.ShapeError(f"{who}: {z.shape[1]} tokens do not fill a {h}x{w} lattice")


# ---------------------------------------------------------------------------
# feed-forward variants
# ---------------------------------------------------------------------------


class PlainFFN(Module):
    """Position-wise f(Z W1) W2."""

    variant = PLAIN

    def __init__(self, d: int, gamma: int, activation: ActivationSpec, init: Init):
        self.fc1 = Linear(d, gamma * d, init)
        self.fc2 = Linear(gamma * d, d, init)
        self.activation = activation

    def __call__(self, z: Tensor) -> Tensor:
        return self.fc2(apply_activation(self.activation.base, self.fc1(z)))


class ConvFFN(Module):
    """The same map written as 1x1 convolutions over the token lattice."""

    variant = CONV1X1

    def __init__(self, d: int, gamma: int, activation: ActivationSpec, init: Init):
        self.conv1 = PointwiseConv(d, gamma * d, init)
        self.conv2 = PointwiseConv(gamma * d, d, init)
        self.activation = activation

    @classmethod
    def from_plain(cls, plain: PlainFFN) -> "ConvFFN":
        """Reshape a PlainFFN's (in, out) matrices into (out, in, 1, 1) kernels."""
        obj = cls.__new__(cls)
        obj.conv1 = PointwiseConv.__new__(PointwiseConv)
        obj.conv1.weight = Tensor(plain.fc1.weight.data.T[:, :, None, None].copy(), requires_grad=True)
        obj.conv1.bias = Tensor(plain.fc1.bias.data.copy(), requires_grad=True)
        obj.conv2 = PointwiseConv.__new__(PointwiseConv)
        obj.conv2.weight = Tensor(plain.fc2.weight.data.T[:, :, None, None].copy(), requires_grad=True)
        obj.conv2.bias = Tensor(plain.fc2.bias.data.copy(), requires_grad=True)
        obj.activation = plain.activation
        return obj

    def __call__(self, z: Tensor, lattice: Tuple[int, int]) -> Tensor:
        _require_image_tokens(z, lattice, "ffn_conv")
        y = seq2img(z, lattice)
        y = self.conv2(apply_activation(self.activation.base, self.conv1(y)))
        return img2seq(y)


class LocalityFFN(Module):
    """1x1 expand -> k x k depthwise -> 1x1 project, each conv followed by BN.

    The base activation follows the expand and depthwise stages; the channel
    gate, if any, follows the depthwise-stage activation. Convs feeding a BN
    carry no bias. ``depthwise=False`` drops the middle stage (the "no DW"
    ablation rows).
    """

    variant = LOCALITY

    def __init__(
        self,
        d: int,
        gamma: int,
        activation: ActivationSpec,
        init: Init,
        kernel_size: int = 3,
        depthwise: bool = True,
    ):
        if kernel_size % 2 == 0:
            raise ValueError(f"depthwise kernel size must be odd, got {kernel_size}")
        hidden = gamma * d
        self.activation = activation
        self.conv1 = PointwiseConv(d, hidden, init, bias=False)
        self.bn1 = BatchNorm2d(hidden)
        if depthwise:
            self.dw = DepthwiseConv(hidden, kernel_size, init, bias=False)
            self.bn_dw = BatchNorm2d(hidden)
        else:
            self.dw = None
            self.bn_dw = None
        self.gate = make_gate(activation, hidden, init)
        self.conv2 = PointwiseConv(hidden, d, init, bias=False)
        self.bn2 = BatchNorm2d(d)

    def hidden_map(self, z: Tensor, lattice: Tuple[int, int]) -> Tensor:
        """Gated hidden feature map fed to the projection conv."""
        _require_image_tokens(z, lattice, "ffn_locality")
        f = self.activation.base
        u = apply_activation(f, self.bn1(self.conv1(seq2img(z, lattice))))
        if self.dw is not None:
            u = apply_activation(f, self.bn_dw(self.dw(u)))
        if self.gate is not None:
            u = self.gate(u)
        return u

    def __call__(self, z: Tensor, lattice: Tuple[int, int]) -> Tensor:
        return img2seq(self.bn2(self.conv2(self.hidden_map(z, lattice))))


def make_ffn(variant: str, d: int, gamma: int, activation: ActivationSpec, init: Init, **kw) -> Module:
    if variant == PLAIN:
        return PlainFFN(d, gamma, activation, init)
    if variant == CONV1X1:
        return ConvFFN(d, gamma, activation, init)
    if variant == LOCALITY:
        return LocalityFFN(d, gamma, activation, init, **kw)
    raise ValueError(f"unknown FFN variant {variant!r}; expected one of {FFN_VARIANTS}")


# ---------------------------------------------------------------------------
# encoder layer
# ---------------------------------------------------------------------------


class EncoderLayer(Module):
    """Pre-norm attention sub-layer followed by a feed-forward sub-layer.

    Plain/conv layers: u = x + MHA(LN(x)); out = u + FFN(LN(u)).
    Locality layers drop the second LN and route only the image tokens
    through the FFN; the class token passes the FFN untouched.
    """

    def __init__(
        self,
        d: int,
        heads: int,
        gamma: int,
        variant: str,
        activation: ActivationSpec,
        init: Init,
        kernel_size: int = 3,
        depthwise: bool = True,
    ):
        self.variant = variant
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, init)
        self.norm2 = None if variant == LOCALITY else LayerNorm(d)
        extra = {"kernel_size": kernel_size, "depthwise": depthwise} if variant == LOCALITY else {}
        self.ffn = make_ffn(variant, d, gamma, activation, init, **extra)

    def attention_sublayer(self, x: Tensor) -> Tensor:
        return x + self.attn(self.norm1(x))

    def ffn_branch(self, u: Tensor, lattice: Tuple[int, int]) -> Tensor:
        """FFN contribution added to the residual stream of a plain/conv layer."""
        if self.variant == PLAIN:
            return self.ffn(self.norm2(u))
        if self.variant == CONV1X1:
            v = self.norm2(u)
            cls, img = class_token_split(v, lattice)
            # class token as a 1x1 lattice keeps the map position-wise
            return class_token_concat(self.ffn(cls, (1, 1)), self.ffn(img, lattice))
        raise ValueError("locality layers route the class token around the FFN; use __call__")

    def __call__(self, x: Tensor, lattice: Tuple[int, int]) -> Tensor:
        u = self.attention_sublayer(x)
        if self.variant == LOCALITY:
            cls, img = class_token_split(u, lattice)
            return class_token_concat(cls, img + self.ffn(img, lattice))
        return u + self.ffn_branch(u, lattice)


def ffn_plain(z: Tensor, ffn: PlainFFN) -> Tensor:
    return ffn(z)


def ffn_conv(z: Tensor, ffn: ConvFFN, lattice: Tuple[int, int]) -> Tensor:
    return ffn(z, lattice)


def ffn_locality(z: Tensor, ffn: LocalityFFN, lattice: Tuple[int, int], training: bool) -> Tensor:
    ffn.train(training)
    return ffn(z, lattice)


def multi_head_attention(x: Tensor, attn: MultiHeadAttention) -> Tensor:
    return attn(x)


def parameter_shapes(module: Module) -> Dict[str, tuple]:
    return {name: p.shape for name, p in module.named_parameters()}
