"""Desk-scale training on a synthetic motif task, plus gradient checking."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .model import Model, parameter_checksum
from .tensor import Tensor

# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToySpec:
    """Each class owns one k x k motif; an image is noise plus its motif at a random spot."""

    image_size: int = 32
    channels: int = 3
    num_classes: int = 4
    motif_size: int = 6
    train_per_class: int = 128
    eval_per_class: int = 32
    noise_std: float = 0.2
    seed: int = 0


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, H, W)
    labels: np.ndarray  # (n,)
    positions: np.ndarray  # (n, 2) top-left corner of the planted motif

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.positions[idx])


def make_motifs(spec: ToySpec) -> np.ndarray:
    """(classes, c, k, k) zero-mean unit-energy sign patterns, distinct per class."""
    rng = np.random.Generator(np.random.PCG64([spec.seed, 7919]))
    k = spec.motif_size
    motifs = rng.choice([-1.0, 1.0], size=(spec.num_classes, spec.channels, k, k))
    motifs -= motifs.mean(axis=(1, 2, 3), keepdims=True)
    motifs /= np.sqrt((motifs**2).sum(axis=(1, 2, 3), keepdims=True))
    return motifs * math.sqrt(spec.channels * k * k)


def _render(spec: ToySpec, motifs: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> Dataset:
    n, k, size = len(labels), spec.motif_size, spec.image_size
    pos = rng.integers(0, size - k + 1, size=(n, 2))
    noise = rng.standard_normal((n, spec.channels, size, size)) * spec.noise_std
    images = noise
    for i in range(n):
        r, c = pos[i]
        images[i, :, r : r + k, c : c + k] += motifs[labels[i]]
    return Dataset(images, labels.astype(np.int64), pos)


def generate_toy_dataset(spec: ToySpec) -> Tuple[Dataset, Dataset]:
    """Balanced, seeded (train, eval) pair drawn from disjoint RNG streams."""
    if spec.motif_size > spec.image_size:
        raise ValueError(f"motif ({spec.motif_size}) larger than image ({spec.image_size})")
    if spec.num_classes < 2:
        raise ValueError("need at least 2 classes")
    motifs = make_motifs(spec)
    out = []
    for stream, per_class in ((1, spec.train_per_class), (2, spec.eval_per_class)):
        rng = np.random.Generator(np.random.PCG64([spec.seed, stream]))
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        labels = labels[rng.permutation(len(labels))]
        out.append(_render(spec, motifs, labels, rng))
    return out[0], out[1]


def template_match_classify(spec: ToySpec, images: np.ndarray) -> np.ndarray:
    """Predict the class whose motif has the largest correlation anywhere in the image."""
    motifs = make_motifs(spec)
    k = spec.motif_size
    windows = np.lib.stride_tricks.sliding_window_view(images, (k, k), axis=(2, 3))
    # windows: (n, c, H-k+1, W-k+1, k, k)
    scores = np.einsum("nchwij,mcij->nmhw", windows, motifs, optimize=True)
    return scores.reshape(len(images), spec.num_classes, -1).max(axis=2).argmax(axis=1)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    min_lr: float = 1e-5
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.lr > 0 and not self.min_lr < self.lr:
            raise ValueError(f"min_lr ({self.min_lr}) must be below lr ({self.lr})")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


# desk-scale budget for the twin comparison; micro models need a hotter lr than 1e-3
TOY_OPTIMIZER = OptimizerConfig(lr=5e-3, epochs=40)


def cosine_lr(epoch: int, cfg: OptimizerConfig) -> float:
    """Cosine decay from ``lr`` at epoch 0 to ``min_lr`` at the final epoch."""
    if cfg.lr == 0:
        return 0.0
    if cfg.epochs == 1:
        return cfg.lr
    t = epoch / (cfg.epochs - 1)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t))


NO_DECAY = ("cls_token", "pos_embed")


def decays(name: str, p: Tensor) -> bool:
    """Weight decay applies to matrices and kernels only."""
    return p.ndim >= 2 and name not in NO_DECAY


class AdamW:
    """Adam with decoupled weight decay: p <- p(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, named_params, cfg: OptimizerConfig):
        self.params = list(named_params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        b1, b2 = self.cfg.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            if decays(name, p):
                p.data *= 1.0 - lr * self.cfg.weight_decay
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class NonFiniteError(FloatingPointError):
    def __init__(self, tensor_name: str, step: int):
        super().__init__(f"non-finite values in {tensor_name} at step {step}")
        self.tensor_name = tensor_name
        self.step = step


@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    train_acc: List[float] = field(default_factory=list)
    eval_acc: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    checksum: str = ""
    wall_clock: float = 0.0
    seed: int = 0

    def rows(self) -> List[dict]:
        return [
            {"epoch": i + 1, "train_loss": l, "train_acc": a, "eval_acc": e}
            for i, (l, a, e) in enumerate(zip(self.train_loss, self.train_acc, self.eval_acc))
        ]

    def to_dict(self) -> dict:
        return asdict(self)


def _first_non_finite(model: Model) -> Optional[str]:
    # a bad value propagates into every gradient, so look at the data first
    params = list(model.named_parameters())
    for name, p in params:
        if not np.all(np.isfinite(p.data)):
            return name
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"{name}.grad"
    return None


def train(
    model: Model,
    data: Dataset,
    opt: OptimizerConfig,
    eval_data: Optional[Dataset] = None,
    seed: int = 0,
    log=None,
) -> TrainReport:
    """Minibatch AdamW with a per-epoch cosine schedule and smoothed cross-entropy."""
    rng = np.random.Generator(np.random.PCG64(seed))
    optimizer = AdamW(model.named_parameters(), opt)
    report = TrainReport(seed=seed)
    start = time.perf_counter()
    step = 0
    n = len(data)
    for epoch in range(opt.epochs):
        lr = cosine_lr(epoch, opt)
        order = rng.permutation(n)
        model.train()
        loss_sum, correct = 0.0, 0
        for lo in range(0, n, opt.batch_size):
            idx = order[lo : lo + opt.batch_size]
            model.zero_grad()
            logits = model(data.images[idx])
            loss = T.cross_entropy_smoothed(logits, data.labels[idx], opt.label_smoothing)
            if not np.isfinite(loss.item()):
                raise NonFiniteError(_first_non_finite(model) or "loss", step)
            T.backward(loss)
            bad = _first_non_finite(model)
            if bad is not None:
                raise NonFiniteError(bad, step)
            optimizer.step(lr)
            step += 1
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == data.labels[idx]).sum())
        report.train_loss.append(loss_sum / n)
        report.train_acc.append(correct / n)
        report.eval_acc.append(evaluate(model, eval_data) if eval_data is not None else float("nan"))
        report.lr.append(lr)
        if log is not None:
            log(epoch, report)
    report.checksum = parameter_checksum(model)
    report.wall_clock = time.perf_counter() - start
    return report


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    for lo in range(0, len(images), batch_size):
        out.append(model(images[lo : lo + batch_size]).data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(model: Model, data: Dataset) -> float:
    """Eval-mode top-1 accuracy; argmax ties go to the lowest class index."""
    if data is None or len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float((predict(model, data.images) == data.labels).mean())


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    size: int
    max_abs_err: float
    rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    entries: List[GradCheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def failures(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if not e.passed]

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """max |a - n| over the larger block magnitude.

    ``floor`` keeps structurally zero gradients (the attention key bias
    cancels in the softmax) from dividing finite-difference noise by ~0.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    smoothing: float = 0.1,
    training: bool = True,
) -> GradCheckReport:
    """Compare backward() to central differences for every parameter block.

    BN running statistics are snapshotted and restored so the check leaves
    the model as it found it.
    """
    snapshot = {name: (st.running_mean.copy(), st.running_var.copy()) for name, st in model.named_buffers()}
    model.train(training)

    def loss_value(_=None) -> Tensor:
        return T.cross_entropy_smoothed(model(images), labels, smoothing)

    model.zero_grad()
    T.backward(loss_value())
    entries = []
    for name, p in model.named_parameters():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = T.finite_diff_grad(loss_value, p, h)
        err = relative_error(analytic, numeric)
        entries.append(
            GradCheckEntry(name, p.size, float(np.abs(analytic - numeric).max()), err, err < tolerance)
        )
    model.zero_grad()
    buffers = dict(model.named_buffers())
    for name, (mean, var) in snapshot.items():
        buffers[name].running_mean, buffers[name].running_var = mean, var
    return GradCheckReport(tolerance, entries)


def block_summary(report: GradCheckReport) -> Dict[str, float]:
    """Worst relative error per top-level block (e.g. ``layers.0.ffn``)."""
    out: Dict[str, float] = {}
    for e in report.entries:
        parts = e.name.split(".")
        key = ".".join(parts[:3]) if parts[0] == "layers" else parts[0]
        out[key] = max(out.get(key, 0.0), e.rel_err)
    return out
