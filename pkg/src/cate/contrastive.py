"""InfoNCE objective, batch assembly and the pretraining loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .augment import AugmentationPolicy, AugmentationSequence, RelativeTransform, apply, relative, sample_pair
from .models import CATEModel, save_checkpoint
from .synthgen import VideoDataset
from .tensor import NonFiniteError, Tensor

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    temperature: float = 0.1
    lr: float = 3e-4
    optimizer: str = "adam"
    weight_decay: float = 0.0
    schedule: str = "constant"
    symmetric: bool = True
    negatives: str = "partners"
    save_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.negatives not in ("partners", "both"):
            raise ValueError(f"unknown negatives mode {self.negatives!r}")


# ---------------------------------------------------------------------------
# critic, loss, bound
# ---------------------------------------------------------------------------


def critic(x, y, temperature: float) -> Tensor:
    """h(x, y) = cos(x, y) / temperature."""
    x, y = T.as_tensor(x), T.as_tensor(y)
    if not np.any(x.data) or not np.any(y.data):
        raise ZeroDivisionError("critic is undefined for a zero vector")
    return T.cosine_similarity(x, y) * (1.0 / temperature)


def info_nce_from_scores(positive, negatives) -> Tensor:
    """-mean log( e^pos / (e^pos + sum e^neg) ) for scores of shape (N,) and (N, K)."""
    positive = T.as_tensor(positive)
    negatives = T.as_tensor(negatives)
    if positive.ndim == 0:
        positive = positive.reshape(1)
    if negatives.ndim == 1:
        negatives = negatives.reshape(1, -1)
    logits = T.concat([positive.reshape(-1, 1), negatives], axis=1)
    return T.softmax_cross_entropy(logits, np.zeros(logits.shape[0], dtype=np.int64))


def similarity_logits(anchors, partners, temperature: float, negatives: str = "partners") -> Tensor:
    """Row a: score of anchor a against every partner (positive on the diagonal).

    With ``negatives='both'`` the other anchors are appended as extra negatives.
    """
    x = T.l2_normalize(anchors)
    y = T.l2_normalize(partners)
    logits = T.matmul(x, y.T) * (1.0 / temperature)
    if negatives == "both":
        n = x.shape[0]
        xx = T.matmul(x, x.T) * (1.0 / temperature)
        rows, cols = np.nonzero(~np.eye(n, dtype=bool))
        logits = T.concat([logits, xx[rows, cols].reshape(n, n - 1)], axis=1)
    return logits


def info_nce_loss(batch: ContrastiveBatch, temperature: float, negatives: str = "partners") -> Tensor:
    """InfoNCE with in-batch negatives (K = N - 1), averaged over directions."""
    losses = []
    for direction in batch.directions():
        logits = similarity_logits(direction.anchors, direction.partners, temperature, negatives)
        n = logits.shape[0]
        losses.append(T.softmax_cross_entropy(logits, np.arange(n)))
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


def nce_bound(loss: float, k: int) -> float:
    """I_NCE = log K - L, a lower bound on the mutual information."""
    if k < 1:
        raise ValueError("K must be >= 1")
    return math.log(k) - float(loss)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class ContrastiveBatch:
    anchors: Tensor
    partners: Tensor
    deltas: list[RelativeTransform]
    anchor_token_counts: list[int]
    partner_token_counts: list[int]
    instance_ids: np.ndarray
    taus: list[tuple[AugmentationSequence, AugmentationSequence]] = field(default_factory=list)
    reverse: ContrastiveBatch | None = None

    @property
    def n_negatives(self) -> int:
        return self.anchors.shape[0] - 1

    def directions(self) -> list[ContrastiveBatch]:
        return [self] if self.reverse is None else [self, self.reverse]


def make_views(
    videos: np.ndarray, taus: Sequence[AugmentationSequence], clip_length: int, out_size: int
) -> np.ndarray:
    return np.stack([apply(v, tau, clip_length, out_size) for v, tau in zip(videos, taus)])


def build_batch(
    videos: np.ndarray,
    policy: AugmentationPolicy,
    model: CATEModel,
    rng: np.random.Generator,
    clip_length: int,
    out_size: int,
    dropout_rng: np.random.Generator | None = None,
    symmetric: bool = True,
    instance_ids: np.ndarray | None = None,
) -> ContrastiveBatch:
    """Anchors ``g(f(v_i), [])`` and partners ``g(f(v_j), e(tau_j - tau_i))``.

    The symmetric direction swaps the roles of the two views; its anchors
    are still projected without augmentation tokens.
    """
    n = len(videos)
    if n < 2:
        raise ValueError("a contrastive batch needs at least 2 instances")
    taus = [sample_pair(policy, rng) for _ in range(n)]
    views_i = make_views(videos, [t[0] for t in taus], clip_length, out_size)
    views_j = make_views(videos, [t[1] for t in taus], clip_length, out_size)
    feats = model.encode_visual(Tensor(np.concatenate([views_i, views_j])))
    f_i, f_j = feats[:n], feats[n:]
    forward_deltas = [relative(tj, ti) for ti, tj in taus]
    ids = np.arange(n) if instance_ids is None else np.asarray(instance_ids)

    if symmetric:
        deltas = forward_deltas + [-d for d in forward_deltas]
        tokens = model.encode_augmentation(deltas, dropout_rng)
        anchors = model.project(T.concat([f_i, f_j]), {})
        partners = model.project(T.concat([f_j, f_i]), tokens)
        n_tok = len(tokens)
        rev = ContrastiveBatch(
            anchors[n:], partners[n:], deltas[n:], [0] * n, [n_tok] * n, ids, [(b, a) for a, b in taus]
        )
        return ContrastiveBatch(anchors[:n], partners[:n], forward_deltas, [0] * n, [n_tok] * n, ids, taus, rev)
    tokens = model.encode_augmentation(forward_deltas, dropout_rng)
    anchors = model.project(f_i, {})
    partners = model.project(f_j, tokens)
    return ContrastiveBatch(anchors, partners, forward_deltas, [0] * n, [len(tokens)] * n, ids, taus)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    model: CATEModel
    log: list[dict[str, float]]
    checkpoints: list[Path]

    @property
    def final_loss(self) -> float:
        return self.log[-1]["loss"]


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "cosine" and total > 1:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
    return cfg.lr


def training_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for data order, augmentation and dropout."""
    return {name: np.random.default_rng([seed, i]) for i, name in enumerate(("order", "augment", "dropout"))}


def write_log(path: str | Path, log: Sequence[dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "nce_bound", "epoch"])
        for row in log:
            writer.writerow([row["step"], repr(row["loss"]), repr(row["nce_bound"]), row["epoch"]])


def pretrain(
    cfg: TrainConfig,
    model: CATEModel,
    policy: AugmentationPolicy,
    dataset: VideoDataset,
    clip_length: int,
    out_size: int,
    out_dir: str | Path | None = None,
    manifest: str = "",
    on_step: Callable[[dict[str, float]], None] | None = None,
) -> PretrainResult:
    """Train f, e and g jointly with the InfoNCE objective on the train split.

    Writes ``train_log.csv`` and checkpoints into ``out_dir`` when given.  A
    non-finite loss aborts with :class:`TrainingError` carrying the step.
    """
    cfg.validate()
    streams = training_streams(cfg.seed)
    optimiser = T.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    train_idx = dataset.split_indices("train")
    n = cfg.batch_size
    if len(train_idx) < n:
        raise ValueError(f"train split has {len(train_idx)} samples, fewer than batch size {n}")
    steps_per_epoch = len(train_idx) // n
    total = steps_per_epoch * cfg.epochs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    log: list[dict[str, float]] = []
    checkpoints: list[Path] = []
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        order = streams["order"].permutation(train_idx)
        for b in range(steps_per_epoch):
            ids = order[b * n : (b + 1) * n]
            videos = dataset.frames[ids].astype(np.float64)
            try:
                batch = build_batch(
                    videos, policy, model, streams["augment"], clip_length, out_size,
                    streams["dropout"], cfg.symmetric, ids,
                )
                loss = info_nce_loss(batch, cfg.temperature, cfg.negatives)
            except NonFiniteError as exc:
                raise TrainingError(step, f"non-finite value: {exc}") from exc
            optimiser.zero_grad()
            loss.backward()
            optimiser.step(_lr_at(cfg, step, total))
            row = {"step": step, "loss": loss.item(), "nce_bound": nce_bound(loss.item(), n - 1), "epoch": epoch}
            log.append(row)
            if on_step is not None:
                on_step(row)
            step += 1
        if out is not None and cfg.save_every and (epoch + 1) % cfg.save_every == 0:
            path = out / "checkpoints" / f"epoch{epoch + 1:04d}.ckpt"
            save_checkpoint(path, model.state_dict(), manifest)
            checkpoints.append(path)
        logger.debug("epoch %d loss %.4f", epoch, log[-1]["loss"] if log else float("nan"))
    model.eval()
    if out is not None:
        final = out / "model.ckpt"
        save_checkpoint(final, model.state_dict(), manifest)
        checkpoints.append(final)
        write_log(out / "train_log.csv", log)
    return PretrainResult(model, log, checkpoints)
