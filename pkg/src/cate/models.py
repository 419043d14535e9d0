"""Visual encoder f, augmentation encoder e and projection heads g.

The anchor view is projected as ``g(f(v_i), [])`` and the partner view as
``g(f(v_j), e(tau_j - tau_i))``.  Augmentation tokens are keyed by kind and
assembled in the fixed order (crop, time), so their order never matters.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .augment import ENCODABLE, RelativeTransform
from .nn import Conv2d, Conv3d, Embedding, LayerNorm, Linear, Module
from .tensor import DimensionError, Tensor

TOKEN_ROLES = ("cls", "visual", "crop", "time")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    image_size: int = 16
    trunk: str = "factorised"
    width1: int = 8
    width2: int = 16
    feature_dim: int = 128
    temporal_kernel: int = 3
    head: str = "transformer"
    hidden: int = 64
    intermediate: int = 128
    n_heads: int = 4
    n_layers: int = 2
    out_dim: int = 64
    mlp_hidden: int = 128
    encode: str = "time"
    time_param: str = "sgn+magnitude"
    token_dropout: bool = False
    dropout_rate: float = 0.2
    max_time_shift: int = 12

    @property
    def encode_kinds(self) -> tuple[str, ...]:
        return parse_kinds(self.encode)

    def validate(self) -> None:
        if self.trunk not in ("factorised", "conv3d"):
            raise ValueError(f"unknown trunk {self.trunk!r}")
        if self.head not in ("linear", "mlp", "transformer"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.time_param not in ("sgn", "sgn+magnitude"):
            raise ValueError(f"unknown time_param {self.time_param!r}")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")
        if self.hidden % self.n_heads:
            raise ValueError("hidden must be divisible by n_heads")
        self.encode_kinds


def parse_kinds(spec: str) -> tuple[str, ...]:
    """'none' | 'crop' | 'time' | 'crop+time' -> canonical tuple of kinds."""
    spec = spec.strip().lower()
    if spec in ("", "none"):
        return ()
    kinds = {k.strip() for k in spec.split("+")}
    bad = kinds - set(ENCODABLE)
    if bad:
        raise ValueError(f"cannot encode {sorted(bad)}; encodable kinds are {ENCODABLE}")
    return tuple(k for k in ENCODABLE if k in kinds)


class VisualEncoder(Module):
    """Per-frame 2D conv trunk, temporal 1D conv, mean over time.

    Input (B, L, C, S, S) -> (B, D).  The trunk has no normalisation layers:
    per-frame normalisation would cancel object intensity, and batch
    statistics would make features depend on batch composition.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c, s = cfg.in_channels, cfg.image_size
        if cfg.trunk == "conv3d":
            self.conv1 = Conv3d(c, cfg.width1, 3, rng, stride=2)
        else:
            self.conv1 = Conv2d(c, cfg.width1, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(cfg.width1, cfg.width2, 3, rng, stride=2, padding=1)
        flat = cfg.width2 * (s // 4) ** 2
        self.frame_proj = Linear(flat, cfg.feature_dim, rng)
        k = cfg.temporal_kernel
        self.temporal = Conv2d(cfg.feature_dim, cfg.feature_dim, (k, 1), rng, padding=(k // 2, 0))

    def __call__(self, views) -> Tensor:
        views = T.as_tensor(views)
        cfg = self.cfg
        if views.ndim == 4:
            views = views.reshape((1,) + views.shape)
        if views.ndim != 5 or views.shape[2] != cfg.in_channels or views.shape[3:] != (cfg.image_size,) * 2:
            raise DimensionError(
                f"views must be (B, L, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {views.shape}"
            )
        b, length = views.shape[:2]
        if cfg.trunk == "conv3d":
            h = self.conv1(views.transpose(0, 2, 1, 3, 4))
        else:
            h = self.conv1(views.reshape((b * length,) + views.shape[2:]))
        h = T.relu(h)
        h = T.relu(self.conv2(h))
        h = T.relu(self.frame_proj(h.reshape(b * length, -1)))  # (B*L, D)
        h = h.reshape(b, length, cfg.feature_dim).transpose(0, 2, 1).reshape(b, cfg.feature_dim, length, 1)
        h = T.relu(self.temporal(h))  # (B, D, L, 1)
        return h.mean(axis=(2, 3))


class AugmentationEncoder(Module):
    """e(.): crop delta through an affine map; time as sign (+ magnitude) lookups."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.kinds = cfg.encode_kinds
        if "crop" in self.kinds:
            self.crop = Linear(4, cfg.hidden, rng)
        if "time" in self.kinds:
            self.time_sign = Embedding(3, cfg.hidden, rng)
            if cfg.time_param == "sgn+magnitude":
                self.time_magnitude = Embedding(cfg.max_time_shift + 1, cfg.hidden, rng)

    def __call__(
        self,
        deltas: Sequence[RelativeTransform],
        rng: np.random.Generator | None = None,
    ) -> dict[str, Tensor]:
        tokens: dict[str, Tensor] = {}
        if not self.kinds:
            return tokens
        if "crop" in self.kinds:
            if any(d.crop_delta is None for d in deltas):
                raise ValueError("crop encoding requested but a transform has no crop delta")
            tokens["crop"] = self.crop(Tensor(np.array([d.crop_delta for d in deltas], dtype=np.float64)))
        if "time" in self.kinds:
            if any(d.time_delta is None for d in deltas):
                raise ValueError("time encoding requested but a transform has no time delta")
            shifts = np.array([d.time_delta for d in deltas], dtype=np.int64)
            if np.any(np.abs(shifts) > self.cfg.max_time_shift):
                raise IndexError(f"time shift beyond lookup range +-{self.cfg.max_time_shift}: {shifts}")
            tok = self.time_sign(np.sign(shifts) + 1)
            if self.cfg.time_param == "sgn+magnitude":
                tok = tok + self.time_magnitude(np.abs(shifts))
            tokens["time"] = tok
        if self.cfg.token_dropout and self.training:
            tokens = {k: T.dropout(v, self.cfg.dropout_rate, rng, training=True) for k, v in tokens.items()}
        return tokens


class TransformerLayer(Module):
    """Pre-norm encoder layer: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, hidden: int, intermediate: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.ln1 = LayerNorm((-1,), (hidden,))
        self.q = Linear(hidden, hidden, rng)
        self.k = Linear(hidden, hidden, rng)
        self.v = Linear(hidden, hidden, rng)
        self.o = Linear(hidden, hidden, rng)
        self.ln2 = LayerNorm((-1,), (hidden,))
        self.ff1 = Linear(hidden, intermediate, rng)
        self.ff2 = Linear(intermediate, hidden, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + T.multi_head_attention(
            h,
            self.q.weight, self.q.bias,
            self.k.weight, self.k.bias,
            self.v.weight, self.v.bias,
            self.o.weight, self.o.bias,
            self.n_heads,
        )
        return x + self.ff2(T.gelu(self.ff1(self.ln2(x))))


class TransformerHead(Module):
    """Tokens: [CLS], lifted visual feature, augmentation tokens; each plus a type embedding."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.visual_proj = Linear(cfg.feature_dim, cfg.hidden, rng)
        self.cls = Tensor(np.zeros(cfg.hidden), requires_grad=True)
        self.type_embedding = Embedding(len(TOKEN_ROLES), cfg.hidden, rng)
        self.layers = [TransformerLayer(cfg.hidden, cfg.intermediate, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.final_norm = LayerNorm((-1,), (cfg.hidden,))
        self.out = Linear(cfg.hidden, cfg.out_dim, rng)

    def __call__(self, visual: Tensor, tokens: Mapping[str, Tensor]) -> Tensor:
        b = visual.shape[0]
        types = self.type_embedding.weight
        seq = [
            T.reshape(self.cls + types[0], (1, 1, -1)) + Tensor(np.zeros((b, 1, self.cfg.hidden))),
            T.reshape(self.visual_proj(visual) + types[1], (b, 1, -1)),
        ]
        for kind in ENCODABLE:
            if kind in tokens:
                tok = tokens[kind]
                if tok.shape != (b, self.cfg.hidden):
                    raise DimensionError(f"{kind} token shape {tok.shape} != {(b, self.cfg.hidden)}")
                seq.append(T.reshape(tok + types[TOKEN_ROLES.index(kind)], (b, 1, -1)))
        x = T.concat(seq, axis=1)
        for layer in self.layers:
            x = layer(x)
        return self.out(self.final_norm(x[:, 0]))


class LinearHead(Module):
    """Affine map of [visual ; sum of augmentation tokens] (zeros when absent)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = Linear(cfg.feature_dim + cfg.hidden, cfg.out_dim, rng)

    def _inputs(self, visual: Tensor, tokens: Mapping[str, Tensor]) -> Tensor:
        b = visual.shape[0]
        aug = Tensor(np.zeros((b, self.cfg.hidden)))
        for kind in ENCODABLE:
            if kind in tokens:
                aug = aug + tokens[kind]
        return T.concat([visual, aug], axis=1)

    def __call__(self, visual: Tensor, tokens: Mapping[str, Tensor]) -> Tensor:
        return self.proj(self._inputs(visual, tokens))


class MLPHead(LinearHead):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.fc1 = Linear(cfg.feature_dim + cfg.hidden, cfg.mlp_hidden, rng)
        self.fc2 = Linear(cfg.mlp_hidden, cfg.out_dim, rng)

    def __call__(self, visual: Tensor, tokens: Mapping[str, Tensor]) -> Tensor:
        return self.fc2(T.relu(self.fc1(self._inputs(visual, tokens))))


HEADS = {"linear": LinearHead, "mlp": MLPHead, "transformer": TransformerHead}


class CATEModel(Module):
    """f, e and g bundled; only ``encoder`` is used after pretraining."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        # separate streams: toggling an encoded kind leaves f and g init unchanged
        self.encoder = VisualEncoder(cfg, np.random.default_rng([seed, 0]))
        self.augmentation = AugmentationEncoder(cfg, np.random.default_rng([seed, 1]))
        self.head = HEADS[cfg.head](cfg, np.random.default_rng([seed, 2]))

    def encode_visual(self, views) -> Tensor:
        return self.encoder(views)

    def encode_augmentation(self, deltas: Sequence[RelativeTransform], rng=None) -> dict[str, Tensor]:
        return self.augmentation(deltas, rng)

    def project(self, visual: Tensor, tokens: Mapping[str, Tensor] | None = None) -> Tensor:
        return self.head(visual, tokens or {})


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, state: Mapping[str, np.ndarray], manifest: str = "") -> str:
    """Write named float64 tensors plus a manifest echo; returns the file's sha256.

    Layout (little endian): magic "CKPT" | version u32 | n u32 | n records of
    (name length u32 | UTF-8 name | rank u32 | dims u32... | f64 data) |
    manifest length u32 | UTF-8 manifest.
    """
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    for name, value in state.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    text = manifest.encode("utf-8")
    chunks.append(struct.pack("<I", len(text)) + text)
    blob = b"".join(chunks)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    state: dict[str, np.ndarray] = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + ln].decode("utf-8")
        off += ln
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)
        off += 8 * count
    (mlen,) = struct.unpack_from("<I", raw, off)
    manifest = raw[off + 4 : off + 4 + mlen].decode("utf-8")
    return state, manifest


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def model_config_items(cfg: ModelConfig) -> dict[str, object]:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
