"""Closed-form parameter and MAC accounting.

MAC convention: one multiply-accumulate counts as 1. Norms, activations,
pooling, bias adds and residual adds count as 0. The patch embedding is
included. Counts are for a single image.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

from .blocks import LOCALITY
from .model import ModelConfig, preset

CONVENTION = "MACs (1 multiply-accumulate = 1 FLOP); norms/activations = 0"


@dataclass
class ComplexityRow:
    name: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    rows: List[ComplexityRow] = field(default_factory=list)
    convention: str = CONVENTION

    def add(self, name: str, params: int, macs: int = 0) -> None:
        self.rows.append(ComplexityRow(name, int(params), int(macs)))

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def gmacs(self) -> float:
        return self.macs / 1e9

    def by_prefix(self, prefix: str) -> Tuple[int, int]:
        sel = [r for r in self.rows if r.name == prefix or r.name.startswith(prefix + ".")]
        return sum(r.params for r in sel), sum(r.macs for r in sel)


def _ffn_rows(report: ComplexityReport, cfg: ModelConfig, i: int) -> None:
    d, hidden, k = cfg.embed_dim, cfg.gamma * cfg.embed_dim, cfg.kernel_size
    n_img = cfg.num_patches
    tokens = n_img + 1
    pre = f"layers.{i}.ffn"
    if cfg.layer_variant(i + 1) != LOCALITY:
        report.add(f"{pre}.fc1", d * hidden + hidden, tokens * d * hidden)
        report.add(f"{pre}.fc2", hidden * d + d, tokens * hidden * d)
        return
    # locality: convs feeding a BN carry no bias; the class token skips the FFN
    report.add(f"{pre}.conv1", d * hidden, n_img * d * hidden)
    report.add(f"{pre}.bn1", 2 * hidden)
    if cfg.depthwise:
        report.add(f"{pre}.dw", hidden * k * k, n_img * hidden * k * k)
        report.add(f"{pre}.bn_dw", 2 * hidden)
    act = cfg.activation
    if act.gate == "se":
        w = act.se_width(hidden)
        report.add(f"{pre}.gate", hidden * w + w + w * hidden + hidden, 2 * hidden * w)
    elif act.gate == "eca":
        report.add(f"{pre}.gate", act.eca_kernel, hidden * act.eca_kernel)
    report.add(f"{pre}.conv2", hidden * d, n_img * hidden * d)
    report.add(f"{pre}.bn2", 2 * d)


def complexity_report(cfg: ModelConfig) -> ComplexityReport:
    """Per-component parameter and MAC counts for ``cfg``."""
    r = ComplexityReport()
    d, n_img = cfg.embed_dim, cfg.num_patches
    tokens = n_img + 1
    r.add("patch_embed", cfg.patch_dim * d + d, n_img * cfg.patch_dim * d)
    r.add("cls_token", d)
    r.add("pos_embed", tokens * d)
    for i in range(cfg.depth):
        r.add(f"layers.{i}.norm1", 2 * d)
        r.add(f"layers.{i}.attn.qkv", 3 * (d * d + d), 3 * tokens * d * d)
        r.add(f"layers.{i}.attn.scores", 0, tokens * tokens * d)
        r.add(f"layers.{i}.attn.mix", 0, tokens * tokens * d)
        r.add(f"layers.{i}.attn.proj", d * d + d, tokens * d * d)
        if cfg.layer_variant(i + 1) != LOCALITY:
            r.add(f"layers.{i}.norm2", 2 * d)
        _ffn_rows(r, cfg, i)
    r.add("norm", 2 * d)
    r.add("head", d * cfg.num_classes + cfg.num_classes, d * cfg.num_classes)
    return r


def count_params(cfg: ModelConfig) -> ComplexityReport:
    return complexity_report(cfg)


def count_macs(cfg: ModelConfig) -> ComplexityReport:
    return complexity_report(cfg)


def layer_table(cfg: ModelConfig) -> List[dict]:
    """One summary row per encoder layer."""
    r = complexity_report(cfg)
    out = []
    for i in range(cfg.depth):
        params, macs = r.by_prefix(f"layers.{i}")
        variant = cfg.layer_variant(i + 1)
        act = cfg.activation if variant == LOCALITY else None
        out.append(
            {
                "layer": i + 1,
                "variant": variant,
                "gamma": cfg.gamma,
                "activation": _describe_activation(cfg) if act else cfg.plain_activation,
                "params": params,
                "macs": macs,
            }
        )
    return out


def _describe_activation(cfg: ModelConfig) -> str:
    act = cfg.activation
    label = act.base
    if act.gate == "se":
        label += f"+SE(width {act.se_width(cfg.gamma * cfg.embed_dim)})"
    elif act.gate == "eca":
        label += f"+ECA(k={act.eca_kernel})"
    if not cfg.depthwise:
        label += " (no DW)"
    return label


# ---------------------------------------------------------------------------
# ablation tables
# ---------------------------------------------------------------------------

# table id -> (caption, [(row label, preset)], decimals)
TABLES: Dict[str, Tuple[str, List[Tuple[str, str]], int]] = {
    "1": (
        "Locality from depth-wise convolution",
        [
            ("DeiT-T g4", "deit-t"),
            ("LocalViT-T g4 no-DW", "localvit-t-nodw"),
            ("LocalViT-T* g4 DW", "localvit-t-relu6"),
            ("DeiT-T g6", "deit-t-g6"),
            ("LocalViT-T g6 no-DW", "localvit-t-g6-nodw"),
            ("LocalViT-T* g6 DW", "localvit-t-g6"),
        ],
        1,
    ),
    "2": (
        "Nonlinear activation after depth-wise convolution",
        [
            ("DeiT-T", "deit-t"),
            ("ReLU6", "localvit-t-relu6"),
            ("h-swish", "localvit-t-hswish"),
            ("h-swish + ECA", "localvit-t-eca"),
            ("h-swish + SE-192", "localvit-t"),
            ("h-swish + SE-96", "localvit-t-se96"),
            ("h-swish + SE-48", "localvit-t-se48"),
            ("h-swish + SE-4", "localvit-t-se4"),
        ],
        1,
    ),
    "3": (
        "Placement of locality",
        [
            ("High 9-12", "placement-high"),
            ("Mid 5-8", "placement-mid"),
            ("Low 1-4", "placement-low"),
            ("Low 1-8", "placement-low8"),
            ("All 1-12", "placement-all"),
        ],
        2,
    ),
    "4": (
        "Expansion ratio x SE",
        [(f"g{g} SE={'yes' if se else 'no'}", f"gamma-{g}{'-se' if se else ''}") for g in (1, 2, 3, 4) for se in (0, 1)],
        1,
    ),
    "5": (
        "DeiT vs LocalViT (tiny/small)",
        [("DeiT-T", "deit-t"), ("LocalViT-T", "localvit-t"), ("DeiT-S", "deit-s"), ("LocalViT-S", "localvit-s")],
        1,
    ),
}

CSV_COLUMNS = [
    "table",
    "row",
    "preset",
    "params",
    "params_M",
    "macs",
    "flops_G",
    "accuracy_if_trained",
    "accuracy_source",
]

ACCURACY_SOURCE = "desk-scale synthetic toy task (not ImageNet)"


def table_rows(
    table_id: str, accuracies: Optional[Dict[str, float]] = None
) -> List[dict]:
    if table_id not in TABLES:
        raise KeyError(f"unknown table {table_id!r}; available: {', '.join(TABLES)}")
    _, rows, decimals = TABLES[table_id]
    return emit_rows(rows, decimals, accuracies, table_id)


def emit_rows(
    rows: Sequence[Tuple[str, str]],
    decimals: int = 1,
    accuracies: Optional[Dict[str, float]] = None,
    table_id: str = "",
) -> List[dict]:
    out = []
    for label, name in rows:
        rep = complexity_report(preset(name))
        acc = (accuracies or {}).get(name)
        out.append(
            {
                "table": table_id,
                "row": label,
                "preset": name,
                "params": rep.params,
                "params_M": f"{rep.params_m:.{decimals}f}",
                "macs": rep.macs,
                "flops_G": f"{rep.gmacs:.{decimals}f}",
                "accuracy_if_trained": "" if acc is None else f"{acc:.4f}",
                "accuracy_source": "" if acc is None else ACCURACY_SOURCE,
            }
        )
    return out


def write_csv(rows: Iterable[dict], fh: TextIO) -> None:
    writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)


def emit_ablation_tables(
    presets: Sequence[str], decimals: int = 1, accuracies: Optional[Dict[str, float]] = None
) -> str:
    """CSV text with one row per preset (header only for an empty list)."""
    buf = io.StringIO()
    write_csv(emit_rows([(p, p) for p in presets], decimals, accuracies), buf)
    return buf.getvalue()
