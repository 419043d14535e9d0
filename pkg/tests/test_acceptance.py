"""Acceptance suite: one test per acceptance criterion, each printing one PASS/FAIL line.

Trained models are cached for the session so criteria sharing a training
configuration train it once.  Expensive tests carry the ``slow`` marker.
"""

from __future__ import annotations

import functools
import hashlib
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cate import tensor as T
from cate.augment import AugmentationPolicy, apply
from cate.cli import main as cli_main
from cate.config import ExperimentConfig, ExperimentSection
from cate.contrastive import build_batch, info_nce_loss, nce_bound, pretrain
from cate.models import CATEModel, ModelConfig
from cate.probes import (
    FrozenFeatureSet,
    delta_ap_report,
    extract_features,
    knn_indices,
    knn_retrieval,
    linear_probe,
    location_probe,
    mean_delta,
    time_shift_probe,
)
from cate.synthgen import (
    SpatialDataConfig,
    VideoDataConfig,
    build_spatial_dataset,
    build_video_dataset,
    order_sensitive,
    roster,
)
from cate.tensor import Tensor, grad_check

DOWNSTREAM_EPOCHS = 50
SPATIAL_EPOCHS = 50
SEEDS = (0, 1, 2)


def verdict(capsys, criterion: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}", flush=True)
    assert ok, detail


# =============================================================================
# Shared training cache
# =============================================================================


def video_config(roster_name: str, encode: str, time_param: str, seed: int, epochs: int) -> ExperimentConfig:
    base = ExperimentConfig(
        experiment=ExperimentSection(seed=seed),
        data=VideoDataConfig(roster=roster_name),
    )
    return replace(
        base,
        model=replace(base.model, encode=encode, time_param=time_param),
        train=replace(base.train, epochs=epochs),
    ).resolved()


def spatial_config(encode: str, seed: int, epochs: int) -> ExperimentConfig:
    base = ExperimentConfig(experiment=ExperimentSection(seed=seed, data_kind="spatial"), data=SpatialDataConfig())
    return replace(
        base, model=replace(base.model, encode=encode), train=replace(base.train, epochs=epochs)
    ).resolved()


@functools.lru_cache(maxsize=None)
def video_dataset(roster_name: str):
    return build_video_dataset(VideoDataConfig(roster=roster_name), seed=0)


@functools.lru_cache(maxsize=None)
def spatial_dataset():
    return build_spatial_dataset(SpatialDataConfig(), seed=0)


@functools.lru_cache(maxsize=None)
def trained_video(roster_name: str, encode: str, time_param: str, seed: int, epochs: int):
    cfg = video_config(roster_name, encode, time_param, seed, epochs)
    model = CATEModel(cfg.model, seed=cfg.seed)
    result = pretrain(cfg.train, model, cfg.augment, video_dataset(roster_name), cfg.clip_length, cfg.out_size)
    return model, cfg, result.log


@functools.lru_cache(maxsize=None)
def video_features(roster_name: str, encode: str, seed: int, epochs: int):
    model, cfg, _ = trained_video(roster_name, encode, "sgn+magnitude", seed, epochs)
    ds = video_dataset(roster_name)
    w = cfg.probe.windows
    return (
        extract_features(model, ds, "train", cfg.clip_length, cfg.out_size, w),
        extract_features(model, ds, "eval", cfg.clip_length, cfg.out_size, w),
    )


@functools.lru_cache(maxsize=None)
def full_roster_probe(encode: str, seed: int):
    ds = video_dataset("default+static")
    train, test = video_features("default+static", encode, seed, DOWNSTREAM_EPOCHS)
    return linear_probe(train, test, ds.class_names)


def restrict(fs: FrozenFeatureSet, classes: list[int]) -> FrozenFeatureSet:
    keep = np.isin(fs.labels, classes)
    remap = {c: i for i, c in enumerate(classes)}
    return FrozenFeatureSet(fs.features[keep], np.array([remap[c] for c in fs.labels[keep]]), fs.split)


# =============================================================================
# 1. Gradient correctness
# =============================================================================


def _away_from_zero(rng, *shape):
    return Tensor(rng.uniform(0.2, 1.0, shape) * rng.choice([-1.0, 1.0], shape), requires_grad=True)


def op_cases(rng):
    """(name, function, inputs) for every differentiable operation."""
    a, b = Tensor(rng.standard_normal((3, 4)), requires_grad=True), Tensor(rng.standard_normal(4), requires_grad=True)
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    kinked = _away_from_zero(rng, 3, 4)
    w = rng.standard_normal((3, 4))
    img, ker = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True), Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    m1, m2 = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True), Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    table = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    x3 = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    attn = [Tensor(rng.standard_normal((4, 4)) * 0.5) for _ in range(4)] + [Tensor(rng.standard_normal(4)) for _ in range(4)]
    wq, wk, wv, wo, bq, bk, bv, bo = attn
    mask = rng.random((3, 4)) > 0.5
    seed = int(rng.integers(1 << 31))
    return [
        ("add", lambda a, b: ((a + b) * w).sum(), [a, b]),
        ("sub", lambda a, b: ((a - b) * w).sum(), [a, b]),
        ("mul", lambda a, b: (a * b * w).sum(), [a, b]),
        ("div", lambda a, p: ((a / p) * w).sum(), [a, pos]),
        ("neg", lambda a: ((-a) * w).sum(), [a]),
        ("power", lambda p: ((p ** 2.5) * w).sum(), [pos]),
        ("exp", lambda a: (T.exp(a) * w).sum(), [a]),
        ("log", lambda p: (T.log(p) * w).sum(), [pos]),
        ("sqrt", lambda p: (T.sqrt(p) * w).sum(), [pos]),
        ("relu", lambda k: (T.relu(k) * w).sum(), [kinked]),
        ("tanh", lambda a: (T.tanh(a) * w).sum(), [a]),
        ("gelu", lambda a: (T.gelu(a) * w).sum(), [a]),
        ("where", lambda a, b: (T.where(mask, a, b) * w).sum(), [a, b]),
        ("sum", lambda a: (T.tsum(a, axis=0) * b.data).sum(), [a]),
        ("mean", lambda a: (T.mean(a, axis=1) ** 2.0).sum(), [a]),
        ("max", lambda a: (T.tmax(a, axis=1) * Tensor([1.0, -2.0, 0.5])).sum(), [a]),
        ("reshape", lambda a: (T.reshape(a, (4, 3)) * w.reshape(4, 3)).sum(), [a]),
        ("transpose", lambda a: (T.transpose(a) * w.T).sum(), [a]),
        ("getitem", lambda a: (a[1:, ::2] ** 2.0).sum(), [a]),
        ("concat", lambda a, b: (T.concat([a, T.reshape(b, (1, 4))]) ** 2.0).sum(), [a, b]),
        ("stack", lambda a: (T.stack([a, a * 2.0]) ** 2.0).sum(), [a]),
        ("matmul", lambda x, y: (T.matmul(x, y) ** 2.0).sum(), [m1, m2]),
        ("conv2d", lambda x, k: (T.conv2d(x, k, stride=2, padding=1) ** 2.0).sum(), [img, ker]),
        ("layer_norm", lambda a: (T.layer_norm(a) * w).sum(), [a]),
        ("softmax", lambda a: (T.softmax(a) * w).sum(), [a]),
        ("log_softmax", lambda a: (T.log_softmax(a) * w).sum(), [a]),
        ("softmax_cross_entropy", lambda a: T.softmax_cross_entropy(a, [0, 3, 1]), [a]),
        ("l2_normalize", lambda a: (T.l2_normalize(a) * w).sum(), [a]),
        ("cosine_similarity", lambda a, b: (T.cosine_similarity(a, b) * Tensor([1.0, 2.0, -1.0])).sum(), [a, b]),
        ("embedding", lambda t: (T.embedding(t, [0, 2, 2, 4]) ** 2.0).sum(), [table]),
        ("dropout", lambda a: (T.dropout(a, 0.3, np.random.default_rng(seed)) * w).sum(), [a]),
        (
            "multi_head_attention",
            lambda x: (T.multi_head_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, 2) ** 2.0).sum(),
            [x3],
        ),
    ]


PIPE_MODEL = ModelConfig(
    image_size=8, width1=3, width2=4, feature_dim=8, hidden=8, intermediate=16, n_heads=2, n_layers=1, out_dim=6,
    max_time_shift=4, encode="crop+time",
)
PIPE_POLICY = AugmentationPolicy(n_frames=16, clip_length=4, max_time_shift=4)


@functools.lru_cache(maxsize=None)
def pipe_videos():
    cfg = VideoDataConfig(n_samples=8, T=16, H=8, W=8, clip_length=4, max_time_shift=4)
    return build_video_dataset(cfg, seed=0).frames[:4].astype(np.float64)


def pipeline_error(seed: int) -> float:
    model = CATEModel(PIPE_MODEL, seed=seed)
    rng = np.random.default_rng(seed)
    # random biases keep ReLU inputs off their kink
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.normal(0.0, 0.3, p.shape)
    names = dict(model.named_parameters())
    params = [
        names["head.out.bias"],
        names["head.type_embedding.weight"],
        names["augmentation.crop.weight"],
        names["augmentation.time_sign.weight"],
        names["encoder.conv1.bias"],
        names["encoder.temporal.bias"],
    ]
    videos = pipe_videos()

    def f(*_):
        batch = build_batch(videos, PIPE_POLICY, model, np.random.default_rng(seed + 100), 4, 8)
        return info_nce_loss(batch, 0.5)

    return grad_check(f, params)


@pytest.mark.slow
def test_c1_gradient_checks(capsys):
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for name, fn, inputs in op_cases(rng):
            worst[name] = max(worst.get(name, 0.0), grad_check(fn, inputs))
        worst["infonce_pipeline"] = max(worst.get("infonce_pipeline", 0.0), pipeline_error(seed))
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and elapsed < 120
    verdict(
        capsys, "C1 gradient checks",
        ok, f"{len(worst)} ops x 20 seeds, max rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s (limits 1e-4, 120s)",
    )


# =============================================================================
# 2. Loss calibration
# =============================================================================


@pytest.mark.slow
def test_c2_loss_calibration(capsys):
    data = VideoDataConfig(n_samples=128, eval_fraction=0.5)
    ds = build_video_dataset(data, seed=0)
    lines, ok = [], True
    for n in (8, 32):
        first, bound_ok = [], True
        for seed in range(5):
            base = ExperimentConfig(experiment=ExperimentSection(seed=seed), data=data)
            cfg = replace(base, train=replace(base.train, batch_size=n, epochs=2)).resolved()
            log = pretrain(cfg.train, CATEModel(cfg.model, seed=seed), cfg.augment, ds, cfg.clip_length, cfg.out_size).log
            first.append(log[0]["loss"])
            bound_ok &= all(r["nce_bound"] <= math.log(n - 1) for r in log)
            bound_ok &= all(abs(r["nce_bound"] - nce_bound(r["loss"], n - 1)) < 1e-12 for r in log)
        target = math.log(n)
        rel = abs(np.mean(first) - target) / target
        ok &= rel <= 0.10 and bound_ok
        lines.append(f"N={n} mean first loss {np.mean(first):.4f} vs log(K+1)={target:.4f} ({rel:.1%}), bound ok={bound_ok}")
    verdict(capsys, "C2 loss calibration", ok, "; ".join(lines))


# =============================================================================
# 3. Invariant-coding recovery
# =============================================================================


def reference_invariant_loss(model: CATEModel, videos, policy, seed, clip, size, temperature):
    """Independent invariant pipeline: same views, no augmentation encoder, numpy InfoNCE."""
    from cate.augment import sample_pair

    rng = np.random.default_rng(seed)
    taus = [sample_pair(policy, rng) for _ in range(len(videos))]
    vi = np.stack([apply(v, t[0], clip, size) for v, t in zip(videos, taus)])
    vj = np.stack([apply(v, t[1], clip, size) for v, t in zip(videos, taus)])
    zi = model.head(model.encoder(Tensor(vi)), {}).data
    zj = model.head(model.encoder(Tensor(vj)), {}).data

    def nce(x, y):
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
        y = y / np.linalg.norm(y, axis=1, keepdims=True)
        s = x @ y.T / temperature
        m = s.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(s - m).sum(axis=1))
        return float(np.mean(lse - np.diag(s)))

    return 0.5 * (nce(zi, zj) + nce(zj, zi))


def test_c3_invariant_recovery(capsys):
    cfg = ExperimentConfig(data=VideoDataConfig(n_samples=16))
    cfg = replace(cfg, model=replace(cfg.model, encode="none")).resolved()
    ds = build_video_dataset(cfg.data, seed=0)
    videos = ds.frames[:8].astype(np.float64)
    worst = 0.0
    for seed in range(5):
        model = CATEModel(cfg.model, seed=seed).eval()
        with T.no_grad():
            batch = build_batch(videos, cfg.augment, model, np.random.default_rng(seed), cfg.clip_length, cfg.out_size)
            got = info_nce_loss(batch, cfg.train.temperature).item()
            ref = reference_invariant_loss(
                model, videos, cfg.augment, seed, cfg.clip_length, cfg.out_size, cfg.train.temperature
            )
        tokens_used = any(batch.partner_token_counts)
        worst = max(worst, abs(got - ref) + (1.0 if tokens_used else 0.0))
    verdict(capsys, "C3 invariant-coding recovery", worst <= 1e-12, f"max |loss - reference| = {worst:.2e} over 5 seeds (limit 1e-12)")


# =============================================================================
# 4. Time-shift probe
# =============================================================================


@pytest.mark.slow
def test_c4_time_shift_probe(capsys):
    start = time.perf_counter()
    ds = video_dataset("default")
    top1 = {}
    chance = None
    for label, encode, param in (("delta_t", "time", "sgn+magnitude"), ("sgn", "time", "sgn"), ("none", "none", "sgn+magnitude")):
        model, cfg, _ = trained_video("default", encode, param, 0, 200)
        report = time_shift_probe(
            model, ds, cfg.clip_length, cfg.out_size, cfg.data.max_time_shift, cfg.probe.quant_step,
            cfg.probe.pairs_per_video, cfg.probe.seed,
        )
        top1[label] = report.top1
        chance = report.metrics["chance"]
    elapsed = time.perf_counter() - start
    checks = {
        "delta_t>=0.90": top1["delta_t"] >= 0.90,
        "none<=2xchance": top1["none"] <= 2 * chance,
        "none<sgn<delta_t": top1["none"] < top1["sgn"] < top1["delta_t"],
        "runtime<=15min": elapsed <= 900,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (
        f"top1 delta_t={top1['delta_t']:.3f} sgn={top1['sgn']:.3f} none={top1['none']:.3f} "
        f"chance={chance:.3f}, {elapsed / 60:.1f} min" + (f"; failed: {', '.join(failed)}" if failed else "")
    )
    verdict(capsys, "C4 time-shift probe", not failed, detail)


# =============================================================================
# 5. Downstream direction on order-sensitive classes
# =============================================================================


@pytest.mark.slow
def test_c5_order_sensitive_linear_probe(capsys):
    classes = order_sensitive(roster("default+static"))
    names = [roster("default+static")[c].name for c in classes]
    acc = {}
    for encode in ("none", "crop", "time", "crop+time"):
        vals = []
        for seed in SEEDS:
            train, test = video_features("default+static", encode, seed, DOWNSTREAM_EPOCHS)
            vals.append(linear_probe(restrict(train, classes), restrict(test, classes), names).top1)
        acc[encode] = float(np.mean(vals))
    gain = acc["time"] - acc["none"]
    compose = acc["crop+time"] - max(acc["crop"], acc["time"])
    ok = gain >= 0.03 and compose >= -0.01
    detail = (
        ", ".join(f"{k}={v:.3f}" for k, v in acc.items())
        + f"; time-none={gain * 100:+.1f} pts (need >=+3), crop+time-max={compose * 100:+.1f} pts (need >=-1)"
    )
    verdict(capsys, "C5 order-sensitive linear probe", ok, detail)


# =============================================================================
# 6. Per-class Delta AP structure
# =============================================================================


@pytest.mark.slow
def test_c6_delta_ap_structure(capsys):
    classes = roster("default+static")
    paired = [classes[c].name for c in order_sensitive(classes)]
    static = [c.name for c in classes if c.family == "static"]
    pair_means, static_means = [], []
    for seed in SEEDS:
        ranked = delta_ap_report(full_roster_probe("time", seed), full_roster_probe("none", seed))
        pair_means.append(mean_delta(ranked, paired))
        static_means.append(mean_delta(ranked, static))
    p, s = float(np.mean(pair_means)), float(np.mean(static_means))
    verdict(
        capsys, "C6 delta AP structure", p > s,
        f"mean dAP(time-none) reversed pairs {p:+.4f} vs static {s:+.4f} (3 seeds)",
    )


# =============================================================================
# 7. Retrieval
# =============================================================================


def brute_force(q, g, k):
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    rows = []
    for row in qn:
        d = np.sqrt(((gn - row) ** 2).sum(axis=1))
        rows.append(sorted(range(len(gn)), key=lambda j: (d[j], j))[:k])
    return np.array(rows)


@pytest.mark.slow
def test_c7_retrieval(capsys):
    exact = True
    for seed in range(5):
        rng = np.random.default_rng(seed)
        g, q = rng.standard_normal((100, 8)), rng.standard_normal((100, 8))
        for k in (1, 5, 10, 20, 50):
            exact &= np.array_equal(knn_indices(q, g, k), brute_force(q, g, k))

    ds = video_dataset("default+static")
    train, test = video_features("default+static", "time", 0, DOWNSTREAM_EPOCHS)
    trained = knn_retrieval(train, test)
    cfg = video_config("default+static", "time", "sgn+magnitude", 0, DOWNSTREAM_EPOCHS)
    random_model = CATEModel(cfg.model, seed=0)
    rtrain = extract_features(random_model, ds, "train", cfg.clip_length, cfg.out_size, cfg.probe.windows)
    rtest = extract_features(random_model, ds, "eval", cfg.clip_length, cfg.out_size, cfg.probe.windows)
    baseline = knn_retrieval(rtrain, rtest)
    recalls = [trained.recall[k] for k in sorted(trained.recall)]
    monotone = all(a <= b for a, b in zip(recalls, recalls[1:]))
    better = trained.recall[1] > baseline.recall[1]
    ok = exact and monotone and better
    verdict(
        capsys, "C7 retrieval", ok,
        f"oracle exact={exact}, monotone={monotone}, recall@1 trained {trained.recall[1]:.3f} vs random {baseline.recall[1]:.3f}",
    )


# =============================================================================
# 8. Spatial awareness
# =============================================================================


@functools.lru_cache(maxsize=None)
def spatial_geo_mean(encode: str, seed: int) -> float:
    cfg = spatial_config(encode, seed, SPATIAL_EPOCHS)
    ds = spatial_dataset()
    model = CATEModel(cfg.model, seed=seed)
    pretrain(cfg.train, model, cfg.augment, ds, cfg.clip_length, cfg.out_size)
    train = extract_features(model, ds, "train", 1, cfg.out_size, 1)
    test = extract_features(model, ds, "eval", 1, cfg.out_size, 1)
    return location_probe(train, test).metrics["geo_mean"]


@pytest.mark.slow
def test_c8_spatial_location(capsys):
    acc = {e: float(np.mean([spatial_geo_mean(e, s) for s in SEEDS])) for e in ("none", "crop")}
    gain = acc["crop"] - acc["none"]
    verdict(
        capsys, "C8 spatial location", gain >= 0.02,
        f"geo-mean bin accuracy crop={acc['crop']:.3f} none={acc['none']:.3f}, gain {gain * 100:+.1f} pts (need >=+2)",
    )


# =============================================================================
# 9. Determinism
# =============================================================================

DET_INI = """\
[experiment]
name = det
seed = 5

[data]
n_samples = 24
T = 16
H = 8
W = 8
clip_length = 4
max_time_shift = 4

[model]
image_size = 8
width1 = 3
width2 = 4
feature_dim = 8
hidden = 8
intermediate = 16
n_heads = 2
n_layers = 1
out_dim = 6

[train]
epochs = 2
batch_size = 4

[probe]
pairs_per_video = 2
ks = 1,5
"""


def _digest(root: Path) -> dict[str, str]:
    skip = {"inputs.txt"}  # records the absolute data path
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


def _run_all(root: Path, config: Path, workers: int) -> dict[str, str]:
    def cli(*argv):
        assert cli_main([str(a) for a in argv]) == 0

    data = root / "data.svd"
    cli("gen-data", "--config", config, "--out", data, "--workers", workers)
    cli("pretrain", "--config", config, "--data", data, "--out", root / "run")
    for task in ("linear", "first-frame", "time-shift", "knn"):
        cli("probe", "--task", task, "--checkpoint", root / "run" / "model.ckpt", "--data", data, "--out", root / "reports")
    cli("ablate", "--config", config, "--axis", "time-param", "--data", data, "--out", root / "ablate", "--workers", workers)
    cli("report", root / "run", root / "ablate" / "time-param=sgn", "--out", root / "summary")
    return _digest(root)


@pytest.mark.slow
def test_c9_determinism(tmp_path, capsys):
    config = tmp_path / "det.ini"
    config.write_text(DET_INI)
    a = _run_all(tmp_path / "a", config, workers=1)
    b = _run_all(tmp_path / "b", config, workers=2)
    capsys.readouterr()
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    metric_files = [k for k in a if k.endswith((".json", ".csv"))]
    verdict(
        capsys, "C9 determinism", not differing and len(metric_files) > 0,
        f"{len(a)} files ({len(metric_files)} metric files) hash-identical across reruns with workers 1 vs 2"
        + (f"; differing: {differing}" if differing else ""),
    )
