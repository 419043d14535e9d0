"""Command-line experiment runner: gen-data, pretrain, probe, ablate, report.

Output paths default to ``$CATE_OUTPUT_ROOT/<experiment name>/...`` (or
``./runs`` when the variable is unset).  Failures print a single line
``cate: error: <category>: <message>`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from . import config as cfgmod
from .config import ExperimentConfig
from .contrastive import TrainingError, pretrain
from .models import CATEModel, file_sha256, load_checkpoint
from .probes import (
    ProbeError,
    ProbeReport,
    extract_features,
    knn_retrieval,
    linear_probe,
    location_probe,
    time_shift_probe,
)
from .synthgen import ConfigError, VideoDataset, generate_dataset, generate_spatial_dataset, read_container
from .tensor import DimensionError, NonFiniteError

OUTPUT_ROOT_ENV = "CATE_OUTPUT_ROOT"
TASKS = ("linear", "first-frame", "time-shift", "knn", "location")
AXES = {
    "head": ("head", ("linear", "mlp", "transformer")),
    "encoding": ("encode", ("none", "crop", "time", "crop+time")),
    "time-param": ("time_param", ("sgn", "sgn+magnitude")),
    "dropout": ("token_dropout", (False, True)),
}


class CLIError(Exception):
    def __init__(self, category: str, message: str, code: int = 1):
        super().__init__(message)
        self.category = category
        self.code = code


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CLIError("missing-input", f"{what} not found: {p}", 3)
    return p


# ---------------------------------------------------------------------------
# library-level steps (also used by ablate workers)
# ---------------------------------------------------------------------------


def generate(cfg: ExperimentConfig, out: Path) -> VideoDataset:
    out.parent.mkdir(parents=True, exist_ok=True)
    workers = cfg.experiment.workers
    if cfg.is_video:
        return generate_dataset(cfg.data, cfg.seed, out, workers)
    return generate_spatial_dataset(cfg.data, cfg.seed, out, workers)


def check_dataset(cfg: ExperimentConfig, ds: VideoDataset) -> None:
    T, C, H, W = ds.shape
    expected_T = cfg.data.T if cfg.is_video else 1
    if (T, C, H, W) != (expected_T, cfg.data.C, cfg.data.H, cfg.data.W):
        raise CLIError(
            "data-mismatch",
            f"dataset shape (T,C,H,W)={(T, C, H, W)} does not match config {(expected_T, cfg.data.C, cfg.data.H, cfg.data.W)}",
        )
    if cfg.is_video != ("loc_x" not in ds.extra):
        raise CLIError("data-mismatch", f"config expects {cfg.experiment.data_kind} data")


def run_pretrain(cfg: ExperimentConfig, ds: VideoDataset, out: Path, data_path: Path | None = None) -> Path:
    """Train one model into ``out``: manifest.ini, train_log.csv, checkpoints, model.ckpt."""
    check_dataset(cfg, ds)
    r = cfg.resolved()
    out.mkdir(parents=True, exist_ok=True)
    manifest = cfgmod.to_ini(cfg)
    (out / "manifest.ini").write_text(manifest, encoding="utf-8")
    if data_path is not None:
        (out / "inputs.txt").write_text(f"data={data_path}\ndata_sha256={file_sha256(data_path)}\n", encoding="utf-8")
    model = CATEModel(r.model, seed=cfg.seed)
    pretrain(r.train, model, r.augment, ds, r.clip_length, r.out_size, out_dir=out, manifest=manifest)
    return out / "model.ckpt"


def load_model(checkpoint: Path) -> tuple[CATEModel, ExperimentConfig, str]:
    state, manifest = load_checkpoint(checkpoint)
    cfg = cfgmod.from_ini(manifest)
    model = CATEModel(cfg.resolved().model, seed=cfg.seed)
    model.load_state_dict(state)
    model.eval()
    return model, cfg, file_sha256(checkpoint)


def run_probe(task: str, model: CATEModel, cfg: ExperimentConfig, ckpt_hash: str, ds: VideoDataset) -> ProbeReport:
    r = cfg.resolved()
    p = r.probe
    clip, size = r.clip_length, r.out_size
    windows = p.windows if cfg.is_video else 1
    if task == "time-shift":
        if not cfg.is_video:
            raise CLIError("bad-task", "time-shift probe needs video data")
        return time_shift_probe(
            model, ds, clip, size, r.data.max_time_shift, p.quant_step, p.pairs_per_video, p.seed, ckpt_hash
        )
    if task == "location" and cfg.is_video:
        raise CLIError("bad-task", "location probe needs spatial data")
    first = task == "first-frame"
    train = extract_features(model, ds, "train", clip, size, windows, first_frame=first)
    test = extract_features(model, ds, "eval", clip, size, windows, first_frame=first)
    if task in ("linear", "first-frame"):
        report = linear_probe(train, test, ds.class_names, task=task.replace("-", "_"), checkpoint=ckpt_hash, l2=p.l2)
        return report
    if task == "knn":
        return knn_retrieval(train, test, p.ks, checkpoint=ckpt_hash)
    if task == "location":
        return location_probe(train, test, checkpoint=ckpt_hash)
    raise CLIError("bad-task", f"unknown probe task {task!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg = cfgmod.load(_require_file(args.config, "config"))
    out = Path(args.out) if args.out else output_root() / cfg.experiment.name / "data.svd"
    if args.workers is not None:
        cfg = cfgmod.with_overrides(cfg, "experiment", workers=args.workers)
    generate(cfg, out)
    print(f"{out}\t{file_sha256(out)}")


def cmd_pretrain(args) -> None:
    cfg = cfgmod.load(_require_file(args.config, "config"))
    data = _require_file(args.data, "dataset")
    out = Path(args.out) if args.out else output_root() / cfg.experiment.name / "pretrain"
    ckpt = run_pretrain(cfg, read_container(data), out, data)
    print(f"{ckpt}\t{file_sha256(ckpt)}")


def cmd_probe(args) -> None:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    data = _require_file(args.data, "dataset")
    model, cfg, h = load_model(ckpt)
    ds = read_container(data)
    check_dataset(cfg, ds)
    report = run_probe(args.task, model, cfg, h, ds)
    out = Path(args.out) if args.out else output_root() / cfg.experiment.name / "reports"
    js, _ = report.write(out)
    print(js)


def _default_tasks(cfg: ExperimentConfig) -> tuple[str, ...]:
    return ("linear", "knn", "time-shift") if cfg.is_video else ("location", "knn")


def _ablation_run(job: tuple[str, str, Path, Path, tuple[str, ...]]) -> dict[str, object]:
    ini, label, data, run_dir, tasks = job
    cfg = cfgmod.from_ini(ini)
    ds = read_container(data)
    ckpt = run_pretrain(cfg, ds, run_dir, data)
    model, cfg, h = load_model(ckpt)
    row: dict[str, object] = {"value": label, "checkpoint": h}
    with open(run_dir / "train_log.csv") as fh:
        last = list(csv.DictReader(fh))[-1]
    row["final_loss"] = float(last["loss"])
    row["final_nce_bound"] = float(last["nce_bound"])
    for task in tasks:
        report = run_probe(task, model, cfg, h, ds)
        report.write(run_dir / "reports")
        key = task.replace("-", "_")
        if report.top1 is not None:
            row[f"{key}_top1"] = report.top1
        for k, v in sorted(report.recall.items()):
            row[f"{key}_recall@{k}"] = v
    return row


def cmd_ablate(args) -> None:
    base = cfgmod.load(_require_file(args.config, "config"))
    if args.axis not in AXES:
        raise CLIError("bad-axis", f"unknown axis {args.axis!r}; choose from {sorted(AXES)}")
    field_name, values = AXES[args.axis]
    out = Path(args.out) if args.out else output_root() / base.experiment.name / f"ablate-{args.axis}"
    tasks = tuple(args.tasks.split(",")) if args.tasks else _default_tasks(base)
    bad = [t for t in tasks if t not in TASKS]
    if bad:
        raise CLIError("bad-task", f"unknown probe task(s) {bad}")
    configs = [cfgmod.with_overrides(base, "model", **{field_name: v}) for v in values]
    if args.data:
        data = _require_file(args.data, "dataset")
    else:
        data = out / "data.svd"
        generate(base, data)
    jobs = []
    for v, cfg in zip(values, configs):
        label = ("on" if v else "off") if isinstance(v, bool) else str(v)
        jobs.append((cfgmod.to_ini(cfg), label, data, out / f"{args.axis}={label}", tasks))
    workers = args.workers or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ablation_run, jobs))
    else:
        rows = [_ablation_run(j) for j in jobs]
    columns = ["axis", "value"] + sorted({k for r in rows for k in r} - {"value", "checkpoint"}) + ["checkpoint"]
    with open(out / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            r = {"axis": args.axis, **r}
            writer.writerow([repr(r[c]) if isinstance(r.get(c), float) else r.get(c, "") for c in columns])
    print(out / "comparison.csv")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _svg_header(width: int, height: int, title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{_esc(title)}</text>',
    ]


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def svg_line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str, ylabel: str = "") -> str:
    w, h, pad = 640, 400, 50
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv]
    lines = _svg_header(w, h, title)
    if not xs:
        return "\n".join(lines + ["</svg>"]) + "\n"
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    y0, y1 = min(ys), max(ys) if max(ys) > min(ys) else min(ys) + 1

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (w - 2 * pad)

    def py(y):
        return h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad)

    lines.append(f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>')
    lines.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>')
    for v, y in ((y0, py(y0)), (y1, py(y1))):
        lines.append(f'<text x="{pad - 4}" y="{y:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{v:.3g}</text>')
    if ylabel:
        lines.append(f'<text x="12" y="{h / 2}" font-family="sans-serif" font-size="11" transform="rotate(-90 12 {h / 2})">{_esc(ylabel)}</text>')
    for i, (name, (xv, yv)) in enumerate(series.items()):
        colour = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xv, yv))
        lines.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{pts}"/>')
        lines.append(
            f'<text x="{w - pad + 4}" y="{pad + 14 * i}" font-family="sans-serif" font-size="10" fill="{colour}">{_esc(name)}</text>'
        )
    return "\n".join(lines + ["</svg>"]) + "\n"


def svg_bar_chart(bars: Sequence[tuple[str, float]], title: str) -> str:
    w, h, pad = max(320, 60 + 48 * len(bars)), 400, 50
    lines = _svg_header(w, h, title)
    top = max([v for _, v in bars] + [1e-12])
    bw = (w - 2 * pad) / max(1, len(bars))
    for i, (name, v) in enumerate(bars):
        bh = v / top * (h - 2 * pad - 40)
        x = pad + i * bw
        lines.append(f'<rect x="{x + 4:.1f}" y="{h - pad - bh:.1f}" width="{bw - 8:.1f}" height="{bh:.1f}" fill="{PALETTE[i % len(PALETTE)]}"/>')
        lines.append(f'<text x="{x + bw / 2:.1f}" y="{h - pad - bh - 4:.1f}" text-anchor="middle" font-family="sans-serif" font-size="10">{v:.3f}</text>')
        lines.append(
            f'<text x="{x + bw / 2:.1f}" y="{h - pad + 12}" text-anchor="end" font-family="sans-serif" font-size="9" '
            f'transform="rotate(-30 {x + bw / 2:.1f} {h - pad + 12})">{_esc(name)}</text>'
        )
    return "\n".join(lines + ["</svg>"]) + "\n"


def collect_run(run: Path) -> tuple[list[dict[str, float]], list[ProbeReport]]:
    log: list[dict[str, float]] = []
    log_path = run / "train_log.csv"
    if log_path.is_file():
        with open(log_path) as fh:
            log = [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
    reports = []
    for js in sorted(list(run.glob("*.json")) + list(run.glob("reports/*.json"))):
        try:
            reports.append(ProbeReport.from_dict(json.loads(js.read_text())))
        except (KeyError, ValueError):
            continue
    return log, reports


def cmd_report(args) -> None:
    runs = [Path(r) for r in args.runs]
    for r in runs:
        if not r.is_dir():
            raise CLIError("missing-input", f"run directory not found: {r}", 3)
    out = Path(args.out) if args.out else output_root() / "report"
    out.mkdir(parents=True, exist_ok=True)
    curves: dict[str, tuple[list[float], list[float]]] = {}
    bars: list[tuple[str, float]] = []
    rows = []
    for run in runs:
        name = run.name
        log, reports = collect_run(run)
        if log:
            curves[name] = ([r["step"] for r in log], [r["loss"] for r in log])
            rows.append((name, "pretrain", "final_loss", log[-1]["loss"]))
            rows.append((name, "pretrain", "final_nce_bound", log[-1]["nce_bound"]))
        for rep in reports:
            for metric, value in rep.summary_rows():
                rows.append((name, rep.task, metric, value))
            if rep.top1 is not None:
                bars.append((f"{name}:{rep.task}", rep.top1))
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run", "source", "metric", "value"])
        for r in rows:
            writer.writerow([r[0], r[1], r[2], repr(float(r[3]))])
    (out / "loss_curves.svg").write_text(svg_line_chart(curves, "InfoNCE loss", "loss"))
    (out / "top1.svg").write_text(svg_bar_chart(bars, "Probe top-1"))
    print(out / "summary.csv")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise CLIError("usage", message, 2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cate", description="Augmentation-aware contrastive learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset container")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="container path (default: $CATE_OUTPUT_ROOT/<name>/data.svd)")
    p.add_argument("--workers", type=int, default=None, help="generation processes (output is identical)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="run directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="frozen-feature evaluation of a checkpoint")
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="pretrain and probe every value of one ablation axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.add_argument("--out")
    p.add_argument("--data", help="existing container (default: generate from the config)")
    p.add_argument("--tasks", help="comma-separated probe tasks")
    p.add_argument("--workers", type=int, default=1, help="parallel runs")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge run logs and probe reports into CSV and SVG")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def _one_line(msg: str) -> str:
    return " ".join(str(msg).split())


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except CLIError as exc:
        print(f"cate: error: {exc.category}: {_one_line(exc)}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"cate: error: missing-input: {_one_line(exc)}", file=sys.stderr)
        return 3
    except (ConfigError, ProbeError) as exc:
        print(f"cate: error: config: {_one_line(exc)}", file=sys.stderr)
        return 4
    except TrainingError as exc:
        print(f"cate: error: training: step={exc.step} {_one_line(exc)}", file=sys.stderr)
        return 5
    except (ValueError, KeyError, DimensionError, NonFiniteError) as exc:
        print(f"cate: error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
