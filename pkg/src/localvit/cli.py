"""Command line entry point: ``localvit {summarize,tables,gradcheck,train,rerun}``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
Every command that writes files writes ``manifest.json`` first; ``rerun``
replays a manifest and reproduces the CSV outputs byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from . import tensor as T
from .complexity import TABLES, complexity_report, layer_table, table_rows, write_csv
from .model import PRESETS, ConfigError, ModelConfig, build_model, preset
from .train import (
    NonFiniteError,
    TOY_OPTIMIZER,
    OptimizerConfig,
    ToySpec,
    block_summary,
    generate_toy_dataset,
    grad_check,
    train,
)

OUT_ENV = "LOCALVIT_OUT"
MANIFEST = "manifest.json"
MANIFEST_FORMAT = "localvit-manifest"
MANIFEST_VERSION = 1

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors (argparse would use 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def tool_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _resolve_config(args) -> ModelConfig:
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValidationError(f"config {args.config} must be a JSON object")
        return ModelConfig.from_dict(doc)
    return _preset(args.preset)


def _preset(name: str) -> ModelConfig:
    try:
        return preset(name)
    except KeyError as exc:
        raise ValidationError(exc.args[0]) from exc


def _out_dir(args, required: bool) -> Optional[Path]:
    out = getattr(args, "out", None) or os.environ.get(OUT_ENV)
    if out is None and required:
        out = "localvit-runs"
    if out is None:
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out: Path, command: str, resolved: dict, outputs: List[str], seed=None) -> dict:
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "command": command,
        "tool_version": tool_version(),
        "seed": seed,
        "config": resolved,
        "outputs": outputs,
    }
    _dump_json(out / MANIFEST, manifest)
    return manifest


def _dump_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, rows: List[dict], columns: List[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _fmt(x: float) -> str:
    # repr round-trips float64 exactly, so equal runs give equal bytes
    return repr(float(x))


# ---------------------------------------------------------------------------
# summarize
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = ["layer", "variant", "gamma", "activation", "params", "macs"]


def totals_line(cfg: ModelConfig) -> str:
    rep = complexity_report(cfg)
    return f"params={rep.params} ({rep.params_m:.1f}M) macs≈{rep.gmacs:.2f}G"


def cmd_summarize(args) -> int:
    cfg = _resolve_config(args)
    rows = layer_table(cfg)
    rep = complexity_report(cfg)
    out = _out_dir(args, required=False)
    if out is not None:
        _write_manifest(out, "summarize", {"model": cfg.to_dict()}, ["summary.csv"], seed=cfg.seed)
        _write_rows(out / "summary.csv", rows, SUMMARY_COLUMNS)
    widths = [7, 10, 7, 28, 10, 14]
    print("".join(h.ljust(w) for h, w in zip(SUMMARY_COLUMNS, widths)).rstrip())
    for r in rows:
        print("".join(str(r[h]).ljust(w) for h, w in zip(SUMMARY_COLUMNS, widths)).rstrip())
    for prefix in ("patch_embed", "cls_token", "pos_embed", "norm", "head"):
        p, m = rep.by_prefix(prefix)
        print(f"{prefix:<14}params={p} macs={m}")
    print(totals_line(cfg))
    return EXIT_OK


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def read_accuracies(path: str) -> Dict[str, float]:
    """Mean final eval accuracy per preset from a ``comparison.csv`` (or any CSV with preset + accuracy)."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read accuracy file {path}: {exc}") from exc
    if not rows:
        raise ValidationError(f"accuracy file {path} has no rows")
    key = next((k for k in ("final_eval_acc", "accuracy", "eval_acc") if k in rows[0]), None)
    if "preset" not in rows[0] or key is None:
        raise ValidationError(f"accuracy file {path} needs a 'preset' column and an accuracy column")
    acc: Dict[str, List[float]] = {}
    for i, row in enumerate(rows, start=2):
        if row.get(key) in ("", None):
            continue
        try:
            acc.setdefault(row["preset"], []).append(float(row[key]))
        except ValueError as exc:
            raise ValidationError(f"{path}:{i}: bad accuracy {row[key]!r}") from exc
    return {k: float(np.mean(v)) for k, v in acc.items()}


def _parse_tables(spec: str) -> List[str]:
    ids = [t.strip() for t in spec.split(",") if t.strip()]
    bad = [t for t in ids if t not in TABLES]
    if bad:
        raise ValidationError(f"unknown table id(s) {bad}; available: {', '.join(TABLES)}")
    return ids


def cmd_tables(args) -> int:
    ids = _parse_tables(args.tables)
    accuracies = read_accuracies(args.accuracy) if args.accuracy else None
    if not ids:
        print("no tables selected")
        return EXIT_OK
    out = _out_dir(args, required=True)
    files = [f"table{t}.csv" for t in ids]
    _write_manifest(out, "tables", {"tables": ids, "accuracies": accuracies}, files)
    for t, name in zip(ids, files):
        with open(out / name, "w", newline="") as fh:
            write_csv(table_rows(t, accuracies), fh)
        print(out / name)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

GRADCHECK_COLUMNS = ["block", "max_rel_err", "passed"]


def cmd_gradcheck(args) -> int:
    cfg = _resolve_config(args)
    if args.image_size:
        cfg = replace(cfg, image_size=args.image_size)
    if args.tolerance <= 0:
        raise ValidationError("--tolerance must be positive")
    if args.batch < 1:
        raise ValidationError("--batch must be positive")
    resolved = {"model": cfg.to_dict(), "tolerance": args.tolerance, "batch": args.batch, "corrupt": args.corrupt}
    return run_gradcheck(resolved, args.seed, _out_dir(args, required=False))


def run_gradcheck(resolved: dict, seed: int, out: Optional[Path]) -> int:
    cfg = ModelConfig.from_dict(resolved["model"])
    tolerance, batch, corrupt = resolved["tolerance"], resolved["batch"], resolved["corrupt"]
    if out is not None:
        _write_manifest(out, "gradcheck", resolved, ["gradcheck.csv"], seed=seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    images = rng.standard_normal((batch, cfg.in_channels, cfg.image_size, cfg.image_size))
    labels = rng.integers(0, cfg.num_classes, batch)
    model = build_model(cfg)
    with T.corrupt_adjoint(*(corrupt or ())):
        report = grad_check(model, images, labels, tolerance=tolerance)
    rows = [
        {"block": k, "max_rel_err": f"{v:.3e}", "passed": v < tolerance}
        for k, v in block_summary(report).items()
    ]
    if out is not None:
        _write_rows(out / "gradcheck.csv", rows, GRADCHECK_COLUMNS)
    for r in rows:
        print(f"{'ok  ' if r['passed'] else 'FAIL'} {r['block']:<20} {r['max_rel_err']}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: max relative error {report.max_rel_err:.3e} (tolerance {tolerance:g})")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

EPOCH_COLUMNS = ["epoch", "lr", "train_loss", "train_acc", "eval_acc"]
COMPARISON_COLUMNS = ["preset", "seed", "status", "final_train_loss", "final_train_acc", "final_eval_acc"]


def _train_config(args) -> dict:
    toy = replace(ToySpec(), **{k: v for k, v in {
        "train_per_class": args.train_per_class,
        "noise_std": args.noise_std,
        "seed": args.data_seed,
    }.items() if v is not None})
    opt = replace(TOY_OPTIMIZER, **{k: v for k, v in {
        "epochs": args.epochs,
        "lr": args.lr,
        "batch_size": args.batch_size,
    }.items() if v is not None})
    presets = args.preset or ["micro-localvit", "micro-plain"]
    models = {name: _preset(name).to_dict() for name in presets}
    return {"toy": asdict(toy), "optimizer": asdict(opt), "models": models, "presets": presets,
            "seeds": list(range(args.seeds))}


def run_training(resolved: dict, out: Path, log=print) -> int:
    toy = ToySpec(**resolved["toy"])
    opt_doc = dict(resolved["optimizer"])
    opt_doc["betas"] = tuple(opt_doc["betas"])
    opt = OptimizerConfig(**opt_doc)
    train_set, eval_set = generate_toy_dataset(toy)
    comparison, runs, curves = [], [], {}
    for seed in resolved["seeds"]:
        for name in resolved["presets"]:
            cfg = replace(ModelConfig.from_dict(resolved["models"][name]), seed=seed)
            if cfg.image_size != toy.image_size or cfg.num_classes != toy.num_classes:
                raise ValidationError(f"preset {name} does not match the toy task geometry")
            model = build_model(cfg)
            fname = f"{name}_seed{seed}.csv"
            try:
                report = train(model, train_set, opt, eval_set, seed=seed)
            except NonFiniteError as exc:
                runs.append({"preset": name, "seed": seed, "status": "non-finite", "error": str(exc)})
                comparison.append({"preset": name, "seed": seed, "status": "non-finite"})
                log(f"{name} seed {seed}: {exc}")
                continue
            rows = [
                {"epoch": r["epoch"], "lr": _fmt(lr), "train_loss": _fmt(r["train_loss"]),
                 "train_acc": _fmt(r["train_acc"]), "eval_acc": _fmt(r["eval_acc"])}
                for r, lr in zip(report.rows(), report.lr)
            ]
            _write_rows(out / fname, rows, EPOCH_COLUMNS)
            curves.setdefault(name, []).append(report)
            comparison.append({
                "preset": name, "seed": seed, "status": "ok",
                "final_train_loss": _fmt(report.train_loss[-1]),
                "final_train_acc": _fmt(report.train_acc[-1]),
                "final_eval_acc": _fmt(report.eval_acc[-1]),
            })
            runs.append({"preset": name, "seed": seed, "status": "ok", "csv": fname,
                         "checksum": report.checksum, "wall_clock_s": round(report.wall_clock, 3)})
            log(f"{name} seed {seed}: loss {report.train_loss[-1]:.4f} train acc {report.train_acc[-1]:.3f} "
                f"eval acc {report.eval_acc[-1]:.3f} ({report.wall_clock:.1f}s)")
    _write_rows(out / "comparison.csv", comparison, COMPARISON_COLUMNS)
    (out / "curves.svg").write_text(curves_svg(curves))
    _dump_json(out / "runs.json", {"runs": runs})
    return EXIT_NUMERIC if any(r["status"] != "ok" for r in runs) else EXIT_OK


def cmd_train(args) -> int:
    if args.seeds < 1:
        raise ValidationError("--seeds must be at least 1")
    try:
        resolved = _train_config(args)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    out = _out_dir(args, required=True)
    outputs = [f"{p}_seed{s}.csv" for s in resolved["seeds"] for p in resolved["presets"]]
    _write_manifest(out, "train", resolved, outputs + ["comparison.csv", "curves.svg", "runs.json"],
                    seed=resolved["seeds"])
    return run_training(resolved, out)


# ---------------------------------------------------------------------------
# SVG curves
# ---------------------------------------------------------------------------

_COLOURS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _panel(series: Dict[str, List[List[float]]], x0: float, title: str) -> List[str]:
    w, h, pad = 360.0, 240.0, 30.0
    values = [v for runs in series.values() for run in runs for v in run if np.isfinite(v)]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    hi = hi if hi > lo else lo + 1.0
    n = max((len(run) for runs in series.values() for run in runs), default=1)
    parts = [
        f'<text x="{x0 + w / 2:.1f}" y="16" text-anchor="middle" font-size="13">{title}</text>',
        f'<rect x="{x0 + pad:.1f}" y="{pad:.1f}" width="{w - 2 * pad:.1f}" height="{h - 2 * pad:.1f}" '
        'fill="none" stroke="#999"/>',
        f'<text x="{x0 + pad:.1f}" y="{h - 8:.1f}" font-size="10">epoch 1</text>',
        f'<text x="{x0 + w - pad:.1f}" y="{h - 8:.1f}" font-size="10" text-anchor="end">epoch {n}</text>',
        f'<text x="{x0 + 2:.1f}" y="{pad + 4:.1f}" font-size="9">{hi:.3g}</text>',
        f'<text x="{x0 + 2:.1f}" y="{h - pad:.1f}" font-size="9">{lo:.3g}</text>',
    ]
    for k, (name, runs) in enumerate(series.items()):
        colour = _COLOURS[k % len(_COLOURS)]
        for run in runs:
            pts = " ".join(
                f"{x0 + pad + (w - 2 * pad) * (i / max(n - 1, 1)):.2f},"
                f"{h - pad - (h - 2 * pad) * (v - lo) / (hi - lo):.2f}"
                for i, v in enumerate(run)
            )
            parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.2" points="{pts}"/>')
    return parts


def curves_svg(curves: Dict[str, list]) -> str:
    """Training loss and train accuracy per epoch, one line per (preset, seed)."""
    loss = {k: [r.train_loss for r in v] for k, v in curves.items()}
    acc = {k: [r.train_acc for r in v] for k, v in curves.items()}
    body = _panel(loss, 0.0, "train loss") + _panel(acc, 380.0, "train accuracy")
    for k, name in enumerate(curves):
        y = 262 + 14 * k
        colour = _COLOURS[k % len(_COLOURS)]
        body.append(f'<line x1="30" y1="{y - 4}" x2="50" y2="{y - 4}" stroke="{colour}" stroke-width="2"/>')
        body.append(f'<text x="56" y="{y}" font-size="11">{name}</text>')
    height = 270 + 14 * len(curves)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="740" height="{height}" font-family="sans-serif">\n'
        + "\n".join(body)
        + "\n</svg>\n"
    )


# ---------------------------------------------------------------------------
# rerun
# ---------------------------------------------------------------------------


def load_manifest(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise ValidationError(f"{path} is not a localvit manifest")
    if doc.get("version") != MANIFEST_VERSION:
        raise ValidationError(f"unsupported manifest version {doc.get('version')!r}")
    return doc


def cmd_rerun(args) -> int:
    manifest = load_manifest(args.manifest)
    out = Path(args.out) if args.out else Path(args.manifest).resolve().parent / "rerun"
    out.mkdir(parents=True, exist_ok=True)
    command, resolved = manifest["command"], manifest["config"]
    _write_manifest(out, command, resolved, manifest["outputs"], seed=manifest.get("seed"))
    if command == "summarize":
        cfg = ModelConfig.from_dict(resolved["model"])
        _write_rows(out / "summary.csv", layer_table(cfg), SUMMARY_COLUMNS)
        print(totals_line(cfg))
        return EXIT_OK
    if command == "tables":
        for t in resolved["tables"]:
            with open(out / f"table{t}.csv", "w", newline="") as fh:
                write_csv(table_rows(t, resolved["accuracies"]), fh)
        return EXIT_OK
    if command == "gradcheck":
        return run_gradcheck(resolved, manifest["seed"], out)
    if command == "train":
        return run_training(resolved, out)
    raise ValidationError(f"unknown command {command!r} in manifest")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="localvit", description="Locality-enhanced vision transformer toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("summarize", help="per-layer parameter and MAC table")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", help=f"one of: {', '.join(sorted(PRESETS))}")
    src.add_argument("--config", help="JSON model config (unknown keys are errors)")
    p.add_argument("--out", help=f"also write summary.csv here (or set {OUT_ENV})")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("tables", help="ablation tables as CSV")
    p.add_argument("--tables", default="1,2,3,4", help="comma-separated ids from: " + ",".join(TABLES))
    p.add_argument("--accuracy", help="comparison.csv from a prior train run")
    p.add_argument("--out", help=f"output directory (or set {OUT_ENV})")
    p.set_defaults(func=cmd_tables)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter block")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", default="micro-localvit")
    src.add_argument("--config", help="JSON model config")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--image-size", type=int, default=8, help="0 keeps the preset's size")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", nargs="*", metavar="OP",
                   help="scale these ops' adjoints by 1.5 (negative control); default op: matmul")
    p.add_argument("--out", help=f"also write gradcheck.csv here (or set {OUT_ENV})")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="desk-scale training comparison on the synthetic motif task")
    p.add_argument("--preset", action="append", help="repeatable; default micro-localvit and micro-plain")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--train-per-class", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--out", help=f"output directory (or set {OUT_ENV})")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rerun", help="replay a manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: <manifest dir>/rerun)")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "corrupt", None) == []:
        args.corrupt = ["matmul"]
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
