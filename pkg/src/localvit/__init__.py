"""LocalViT: vision transformers with a depthwise-convolution feed-forward, in pure numpy."""

__version__ = "0.1.0"

from .blocks import ActivationSpec, EncoderLayer, LocalityFFN, PlainFFN  # noqa: E402
from .complexity import ComplexityReport, complexity_report, count_macs, count_params  # noqa: E402
from .model import PRESETS, ConfigError, Model, ModelConfig, build_model, preset  # noqa: E402
from .tensor import Tensor, backward  # noqa: E402
from .train import OptimizerConfig, ToySpec, TrainReport, evaluate, generate_toy_dataset, grad_check, train  # noqa: E402

__all__ = [
    "ActivationSpec",
    "ComplexityReport",
    "ConfigError",
    "EncoderLayer",
    "LocalityFFN",
    "Model",
    "ModelConfig",
    "OptimizerConfig",
    "PRESETS",
    "PlainFFN",
    "Tensor",
    "ToySpec",
    "TrainReport",
    "backward",
    "build_model",
    "complexity_report",
    "count_macs",
    "count_params",
    "evaluate",
    "generate_toy_dataset",
    "grad_check",
    "preset",
    "train",
]
