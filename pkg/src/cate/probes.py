"""Frozen-feature evaluation: linear probes, time-shift probe, kNN retrieval, AP."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import AugmentationSequence, TimeShift, apply
from .models import CATEModel
from .synthgen import VideoDataset
from .tensor import Tensor, no_grad

AP_CONVENTION = "mean over positives of precision at each positive's rank"
RECALL_KS = (1, 5, 10, 20, 50)


class ProbeError(ValueError):
    """Invalid probe configuration or incompatible inputs."""


@dataclass
class FrozenFeatureSet:
    features: np.ndarray  # (n, D)
    labels: np.ndarray  # (n,)
    split: str
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.features.shape[0]

    def with_labels(self, key: str) -> FrozenFeatureSet:
        """Same features, labels replaced by ``extra[key]``."""
        return FrozenFeatureSet(self.features, self.extra[key], self.split, self.extra)


@dataclass
class ProbeReport:
    task: str
    checkpoint: str
    class_names: list[str] = field(default_factory=list)
    top1: float | None = None
    top5: float | None = None
    per_class_ap: dict[str, float | None] = field(default_factory=dict)
    confusion: list[list[int]] = field(default_factory=list)
    recall: dict[int, float] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "checkpoint": self.checkpoint,
            "class_names": list(self.class_names),
            "top1": self.top1,
            "top5": self.top5,
            "per_class_ap": dict(self.per_class_ap),
            "confusion": [list(map(int, row)) for row in self.confusion],
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "metrics": dict(self.metrics),
            "meta": dict(self.meta),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ProbeReport:
        return cls(
            task=d["task"],
            checkpoint=d["checkpoint"],
            class_names=list(d.get("class_names", [])),
            top1=d.get("top1"),
            top5=d.get("top5"),
            per_class_ap=dict(d.get("per_class_ap", {})),
            confusion=[list(r) for r in d.get("confusion", [])],
            recall={int(k): v for k, v in d.get("recall", {}).items()},
            metrics=dict(d.get("metrics", {})),
            meta=dict(d.get("meta", {})),
            warnings=list(d.get("warnings", [])),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def summary_rows(self) -> list[tuple[str, float]]:
        rows = []
        if self.top1 is not None:
            rows.append(("top1", self.top1))
        if self.top5 is not None:
            rows.append(("top5", self.top5))
        rows += [(f"recall@{k}", v) for k, v in sorted(self.recall.items())]
        rows += [(k, self.metrics[k]) for k in sorted(self.metrics)]
        rows += [(f"ap:{c}", v) for c, v in self.per_class_ap.items() if v is not None]
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["task", "checkpoint", "metric", "value"])
        for name, value in self.summary_rows():
            writer.writerow([self.task, self.checkpoint, name, repr(float(value))])
        return buf.getvalue()

    def stem(self) -> str:
        return f"{self.task}-{self.checkpoint[:16]}"

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        """Write ``<task>-<hash>.json`` and ``.csv``; both or neither exist afterwards."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        js, cs = out / f"{self.stem()}.json", out / f"{self.stem()}.csv"
        tmp = [(js, self.to_json()), (cs, self.to_csv())]
        for path, text in tmp:
            path.with_suffix(path.suffix + ".tmp").write_text(text)
        for path, _ in tmp:
            path.with_suffix(path.suffix + ".tmp").replace(path)
        return js, cs


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def encode_views(model: CATEModel, views: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """f(views) in evaluation mode without recording a graph; (n, L, C, S, S) -> (n, D)."""
    model.eval()
    out = []
    with no_grad():
        for s in range(0, len(views), batch_size):
            out.append(model.encode_visual(Tensor(views[s : s + batch_size])).data)
    return np.concatenate(out)


def window_starts(n_frames: int, clip_length: int, windows: int) -> list[int]:
    """Up to ``windows`` evenly spaced clip starts covering the whole video."""
    last = n_frames - clip_length
    if last < 0:
        raise ProbeError("clip_length exceeds video length")
    if windows < 1:
        raise ProbeError("windows must be >= 1")
    return sorted({int(round(s)) for s in np.linspace(0, last, windows)})


def extract_features(
    model: CATEModel,
    dataset: VideoDataset,
    split: str,
    clip_length: int,
    out_size: int,
    windows: int = 3,
    first_frame: bool = False,
) -> FrozenFeatureSet:
    """Mean of f over evenly spaced full-frame clips of each video.

    ``first_frame`` repeats frame 0 to the clip length instead.
    """
    idx = dataset.split_indices(split)
    if first_frame:
        frames = dataset.frames[idx, :1]
        views = np.stack([apply(np.repeat(v, clip_length, axis=0), AugmentationSequence(), clip_length, out_size) for v in frames])
        feats = encode_views(model, views)
    else:
        total = None
        starts = window_starts(dataset.shape[0], clip_length, windows)
        for s in starts:
            seq = AugmentationSequence([TimeShift(s)])
            views = np.stack([apply(dataset.frames[i], seq, clip_length, out_size) for i in idx])
            f = encode_views(model, views)
            total = f if total is None else total + f
        feats = total / len(starts)
    extra = {k: v[idx] for k, v in dataset.extra.items()}
    return FrozenFeatureSet(feats, dataset.labels[idx].copy(), split, extra)


# ---------------------------------------------------------------------------
# multinomial logistic regression
# ---------------------------------------------------------------------------


@dataclass
class LinearClassifier:
    weight: np.ndarray  # (D, K)
    bias: np.ndarray  # (K,)
    mean: np.ndarray
    scale: np.ndarray
    n_iter: int
    loss: float

    def scores(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float64) - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(x), axis=1)


def _objective(theta: np.ndarray, xb: np.ndarray, onehot: np.ndarray, l2: float) -> tuple[float, np.ndarray]:
    z = xb @ theta
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = xb.shape[0]
    w = theta[:-1]
    value = float(-(logp * onehot).sum() / n + 0.5 * l2 * np.sum(w * w))
    grad = xb.T @ (np.exp(logp) - onehot) / n
    grad[:-1] += l2 * w
    return value, grad


def fit_logistic(
    x: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    l2: float = 1e-4,
    max_iter: int = 5000,
    tol: float = 1e-7,
) -> LinearClassifier:
    """Softmax-linear classifier on standardised features, full batch.

    Minimises mean cross-entropy + l2/2 |W|^2 by accelerated gradient
    descent with step 1/L (L bounds the Hessian), restarting momentum when
    the loss rises; stops once the loss changes by less than ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y) or len(y) == 0:
        raise ProbeError("features must be (n, D) with one label per row")
    if y.min() < 0 or y.max() >= n_classes:
        raise ProbeError(f"labels must lie in [0, {n_classes})")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    n = len(x)
    xb = np.hstack([(x - mean) / scale, np.ones((n, 1))])
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    step = 1.0 / (0.5 * np.linalg.norm(xb, 2) ** 2 / n + l2)
    theta = np.zeros((xb.shape[1], n_classes))
    look = theta
    momentum = 1.0
    loss, _ = _objective(theta, xb, onehot, l2)
    it = 0
    for it in range(1, max_iter + 1):
        _, grad = _objective(look, xb, onehot, l2)
        new = look - step * grad
        new_loss, _ = _objective(new, xb, onehot, l2)
        if new_loss > loss:
            # restart: plain gradient step from the last accepted point
            momentum = 1.0
            _, grad = _objective(theta, xb, onehot, l2)
            new = theta - step * grad
            new_loss, _ = _objective(new, xb, onehot, l2)
        nxt = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * momentum * momentum))
        look = new + ((momentum - 1.0) / nxt) * (new - theta)
        momentum = nxt
        change = abs(loss - new_loss)
        theta, loss = new, new_loss
        if change < tol:
            break
    return LinearClassifier(theta[:-1], theta[-1], mean, scale, it, loss)


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mean of precision@rank over the ranks of positive items (descending score).

    Ties are broken by original index so the value is deterministic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if not positives.any():
        raise ProbeError("average precision needs at least one positive")
    order = np.lexsort((np.arange(len(scores)), -scores))
    ranks = np.nonzero(positives[order])[0] + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def top_k_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    k = min(k, scores.shape[1])
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean((order == np.asarray(labels)[:, None]).any(axis=1)))


def linear_probe(
    train: FrozenFeatureSet,
    test: FrozenFeatureSet,
    class_names: Sequence[str],
    task: str = "linear",
    checkpoint: str = "",
    l2: float = 1e-4,
) -> ProbeReport:
    """Fit a softmax-linear classifier on ``train``; report on ``test``."""
    if train.features.shape[1] != test.features.shape[1]:
        raise ProbeError(f"feature dims differ: {train.features.shape[1]} vs {test.features.shape[1]}")
    k = len(class_names)
    clf = fit_logistic(train.features, train.labels, k, l2=l2)
    scores = clf.scores(test.features)
    pred = np.argmax(scores, axis=1)
    y = test.labels
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    seen = set(np.unique(train.labels).tolist())
    warnings = []
    ap: dict[str, float | None] = {}
    for c, name in enumerate(class_names):
        if not np.any(y == c):
            ap[name] = None
            continue
        if c not in seen:
            warnings.append(f"class {name!r} present in eval but absent in train; AP undefined")
            ap[name] = None
            continue
        ap[name] = average_precision(scores[:, c], y == c)
    return ProbeReport(
        task=task,
        checkpoint=checkpoint,
        class_names=list(class_names),
        top1=float(np.mean(pred == y)),
        top5=top_k_accuracy(scores, y, 5),
        per_class_ap=ap,
        confusion=confusion.tolist(),
        metrics={"probe_iterations": float(clf.n_iter), "probe_loss": clf.loss},
        meta={"ap_convention": AP_CONVENTION},
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# time-shift probe
# ---------------------------------------------------------------------------


def shift_label(delta: int, max_shift: int, quant_step: int) -> int:
    """floor(delta / q) shifted so the most negative shift maps to 0."""
    if quant_step < 1:
        raise ProbeError("quant_step must be >= 1")
    if quant_step > max_shift:
        raise ProbeError(f"quant_step {quant_step} exceeds the maximum shift {max_shift}: degenerate single-label task")
    if abs(delta) > max_shift:
        raise ProbeError(f"shift {delta} beyond +-{max_shift}")
    return delta // quant_step - (-max_shift) // quant_step


def n_shift_labels(max_shift: int, quant_step: int) -> int:
    return shift_label(max_shift, max_shift, quant_step) + 1


def shift_pairs(
    n_frames: int,
    indices: Sequence[int],
    clip_length: int,
    max_shift: int,
    pairs_per_video: int,
    rng: np.random.Generator,
) -> list[tuple[int, int, int]]:
    """(row, start_i, start_j): shift uniform over [-M, M], both clips inside."""
    last = n_frames - clip_length
    m = min(max_shift, last)
    out = []
    for i in indices:
        for _ in range(pairs_per_video):
            delta = int(rng.integers(-m, m + 1))
            si = int(rng.integers(max(0, -delta), min(last, last - delta) + 1))
            out.append((int(i), si, si + delta))
    return out


def pair_features(
    model: CATEModel, dataset: VideoDataset, pairs: Sequence[tuple[int, int, int]], clip_length: int, out_size: int
) -> np.ndarray:
    """Channel-wise concatenation [f(clip_i) ; f(clip_j)], clip_i always first."""

    def views(which):
        return np.stack(
            [apply(dataset.frames[p[0]], AugmentationSequence([TimeShift(p[which])]), clip_length, out_size) for p in pairs]
        )

    return np.hstack([encode_views(model, views(1)), encode_views(model, views(2))])


def time_shift_probe(
    model: CATEModel,
    dataset: VideoDataset,
    clip_length: int,
    out_size: int,
    max_shift: int,
    quant_step: int = 2,
    pairs_per_video: int = 8,
    seed: int = 0,
    checkpoint: str = "",
) -> ProbeReport:
    """Classify the quantised start offset between two clips of one video.

    Pairs from the train split fit the probe; pairs from the eval split are
    scored.  Chance is one over the number of labels.
    """
    k = n_shift_labels(max_shift, quant_step)
    rng = np.random.default_rng(seed)
    sets = []
    for split in ("train", "eval"):
        pairs = shift_pairs(dataset.shape[0], dataset.split_indices(split), clip_length, max_shift, pairs_per_video, rng)
        x = pair_features(model, dataset, pairs, clip_length, out_size)
        y = np.array([shift_label(p[2] - p[1], max_shift, quant_step) for p in pairs])
        sets.append(FrozenFeatureSet(x, y, split))
    lo = (-max_shift) // quant_step
    names = [f"shift[{(lo + i) * quant_step},{(lo + i + 1) * quant_step})" for i in range(k)]
    report = linear_probe(sets[0], sets[1], names, task="time_shift", checkpoint=checkpoint)
    report.metrics.update({"chance": 1.0 / k, "n_labels": float(k), "quant_step": float(quant_step)})
    report.meta["pair_order"] = "anchor clip first, partner clip second"
    return report


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


def _unit(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    norm = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ZeroDivisionError("zero feature vector cannot be normalised for retrieval")
    return a / norm


def knn_indices(queries: np.ndarray, gallery: np.ndarray, k: int) -> np.ndarray:
    """k nearest gallery rows by Euclidean distance between L2-normalised
    features; equal distances go to the lower gallery index."""
    if k < 1 or k > len(gallery):
        raise ProbeError(f"k must be in [1, {len(gallery)}], got {k}")
    q, g = _unit(queries), _unit(gallery)
    d2 = (q * q).sum(1)[:, None] - 2.0 * q @ g.T + (g * g).sum(1)[None, :]
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def knn_retrieval(
    train: FrozenFeatureSet,
    test: FrozenFeatureSet,
    ks: Sequence[int] = RECALL_KS,
    checkpoint: str = "",
) -> ProbeReport:
    """Recall@k: a query counts if any of its k nearest train items shares its label."""
    if len(train) == 0 or len(test) == 0:
        raise ProbeError("retrieval needs nonempty train and eval sets")
    usable = sorted(k for k in ks if k <= len(train))
    warnings = [f"k={k} exceeds the gallery size {len(train)}; skipped" for k in sorted(ks) if k > len(train)]
    top = knn_indices(test.features, train.features, max(usable))
    hit = train.labels[top] == test.labels[:, None]
    recall = {int(k): float(np.mean(hit[:, :k].any(axis=1))) for k in usable}
    return ProbeReport(task="knn", checkpoint=checkpoint, recall=recall, warnings=warnings)


# ---------------------------------------------------------------------------
# per-class AP deltas and spatial probes
# ---------------------------------------------------------------------------


def delta_ap_report(report_a: ProbeReport, report_b: ProbeReport) -> list[tuple[str, float]]:
    """Per-class AP(a) - AP(b), sorted descending (ties by class name)."""
    if list(report_a.class_names) != list(report_b.class_names):
        raise ProbeError("class rosters differ between the two reports")
    deltas = []
    for name in report_a.class_names:
        a, b = report_a.per_class_ap.get(name), report_b.per_class_ap.get(name)
        if a is not None and b is not None:
            deltas.append((name, float(a - b)))
    return sorted(deltas, key=lambda t: (-t[1], t[0]))


def mean_delta(ranked: Sequence[tuple[str, float]], classes: Sequence[str]) -> float:
    table = dict(ranked)
    missing = [c for c in classes if c not in table]
    if missing or not classes:
        raise ProbeError(f"no AP delta for classes {missing or classes}")
    return float(np.mean([table[c] for c in classes]))


def location_probe(
    train: FrozenFeatureSet, test: FrozenFeatureSet, n_bins: int = 16, checkpoint: str = ""
) -> ProbeReport:
    """Per-axis location-bin accuracy of the target object and their geometric mean."""
    names = [str(i) for i in range(n_bins)]
    ax = linear_probe(train.with_labels("loc_x"), test.with_labels("loc_x"), names).top1
    ay = linear_probe(train.with_labels("loc_y"), test.with_labels("loc_y"), names).top1
    return ProbeReport(
        task="location",
        checkpoint=checkpoint,
        top1=math.sqrt(ax * ay),
        metrics={"acc_x": ax, "acc_y": ay, "geo_mean": math.sqrt(ax * ay)},
        meta={"label": "16 bins per axis of the target object's centre"},
    )
