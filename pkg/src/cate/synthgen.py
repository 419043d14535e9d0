"""Deterministic synthetic video and image datasets.

Videos show a single hard-edged shape whose position, size or brightness
changes over time.  Classes come in time-reversed pairs (``translate-right``
played backwards is a ``translate-left`` sample), so temporal order is the
only cue separating partners.  Static distractor classes are their own
partner.

Motion is stored as keyframes and interpolated with the symmetric form
``(a * (tb - t) + b * (t - ta)) / (tb - ta)``; reversing the keyframes then
reproduces the reversed frames bit for bit.
"""

from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

MAGIC = b"SVD1"
VIDEO_VERSION = 1
SPATIAL_VERSION = 2
SHAPES = ("square", "disc", "triangle")
N_LOCATION_BINS = 16

# RGB colour per shape; grayscale intensity used when C == 1
SHAPE_COLORS = {
    "square": (1.0, 0.25, 0.25),
    "disc": (0.25, 1.0, 0.25),
    "triangle": (0.25, 0.25, 1.0),
}
SHAPE_GRAY = {"square": 1.0, "disc": 0.8, "triangle": 0.6}
TARGET_COLOR = (1.0, 1.0, 1.0)
DISTRACTOR_COLOR = (0.5, 0.5, 0.0)


class ConfigError(ValueError):
    """Invalid or unsatisfiable generation config."""


# ---------------------------------------------------------------------------
# motion programs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class State:
    x: float
    y: float
    size: float
    intensity: float = 1.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.size, self.intensity])


@dataclass(frozen=True)
class MotionProgram:
    """Piecewise-linear state schedule of one object over ``n_frames`` frames."""

    class_id: int
    family: str
    direction: str
    speed: float
    shape_kind: str
    start_state: State
    keyframes: tuple[tuple[int, State], ...]
    n_frames: int

    def state_at(self, t: int) -> State:
        if not 0 <= t < self.n_frames:
            raise IndexError(f"frame {t} outside [0, {self.n_frames})")
        for (ta, sa), (tb, sb) in zip(self.keyframes[:-1], self.keyframes[1:]):
            if ta <= t <= tb:
                if t == ta:
                    return sa
                if t == tb:
                    return sb
                span = tb - ta
                a, b = sa.as_array(), sb.as_array()
                v = (a * (tb - t) + b * (t - ta)) / span
                return State(*map(float, v))
        return self.keyframes[-1][1]

    def reversed(self, class_id: int, family: str, direction: str) -> MotionProgram:
        last = self.n_frames - 1
        keys = tuple((last - t, s) for t, s in reversed(self.keyframes))
        return MotionProgram(class_id, family, direction, self.speed, self.shape_kind, keys[0][1], keys, self.n_frames)


@dataclass(frozen=True)
class ClassSpec:
    name: str
    family: str
    direction: str
    partner: str
    forward: bool = True
    shape: str | None = None


def _pair(forward: str, backward: str, family: str, fdir: str, bdir: str) -> list[ClassSpec]:
    return [
        ClassSpec(forward, family, fdir, backward, True),
        ClassSpec(backward, family, bdir, forward, False),
    ]


_DEFAULT = (
    _pair("translate-right", "translate-left", "translate", "right", "left")
    + _pair("translate-down", "translate-up", "translate", "down", "up")
    + _pair("grow", "shrink", "scale", "grow", "shrink")
    + _pair("appear", "vanish", "appear", "fade-in", "fade-out")
)
_STATIC = [
    ClassSpec("static-square", "static", "none", "static-square", True, "square"),
    ClassSpec("static-disc", "static", "none", "static-disc", True, "disc"),
]
_COMPOSITE = _pair("right-then-grow", "shrink-then-left", "composite", "right+grow", "shrink+left")

ROSTERS: dict[str, list[ClassSpec]] = {
    "default": list(_DEFAULT),
    "default+static": list(_DEFAULT) + _STATIC,
    "extended": list(_DEFAULT) + _COMPOSITE + _STATIC,
}


def roster(name: str) -> list[ClassSpec]:
    try:
        return ROSTERS[name]
    except KeyError:
        raise ConfigError(f"unknown class roster {name!r}; choose from {sorted(ROSTERS)}") from None


def partner_index(classes: list[ClassSpec], class_id: int) -> int:
    names = [c.name for c in classes]
    return names.index(classes[class_id].partner)


def order_sensitive(classes: list[ClassSpec]) -> list[int]:
    """Class ids whose partner is a different class."""
    return [i for i, c in enumerate(classes) if c.partner != c.name]


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VideoDataConfig:
    n_samples: int = 512
    T: int = 32
    H: int = 32
    W: int = 32
    C: int = 3
    roster: str = "default"
    clip_length: int = 8
    max_time_shift: int = 12
    eval_fraction: float = 0.5
    # frame fractions per frame
    translate_speed: float = 0.02
    scale_speed: float = 0.01
    fade_speed: float = 0.025
    min_size: float = 0.18
    max_size: float = 0.28
    min_intensity: float = 0.2
    # 0: the progress variable (position along the motion, size, intensity)
    # follows a fixed per-class clock; 1: its offset is uniform over the room left
    phase_jitter: float = 0.0
    # same scale for the static coordinates (position across the motion, centre)
    position_jitter: float = 1.0
    shapes: tuple[str, ...] = SHAPES

    def validate(self) -> None:
        for name in ("n_samples", "T", "H", "W", "C", "clip_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.C not in (1, 3):
            raise ConfigError("C must be 1 or 3")
        if self.max_time_shift < 0:
            raise ConfigError("max_time_shift must be >= 0")
        if self.T < 2 * self.max_time_shift + self.clip_length:
            raise ConfigError(
                f"T={self.T} < 2*max_time_shift+clip_length={2 * self.max_time_shift + self.clip_length}"
            )
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ConfigError("eval_fraction must be in [0, 1)")
        if not 0.0 < self.min_size <= self.max_size < 1.0:
            raise ConfigError("need 0 < min_size <= max_size < 1")
        for name in ("phase_jitter", "position_jitter"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if not self.shapes or set(self.shapes) - set(SHAPES):
            raise ConfigError(f"shapes must be a non-empty subset of {SHAPES}")
        classes = roster(self.roster)
        travel = (self.T - 1)
        for c in classes:
            if c.family in ("translate", "composite"):
                span = self.translate_speed * travel * (0.5 if c.family == "composite" else 1.0)
                if span + self.max_size > 1.0:
                    raise ConfigError(f"class {c.name}: travel {span:.3f} plus size {self.max_size} leaves the frame")
            if c.family in ("scale", "composite"):
                growth = self.scale_speed * travel * (0.5 if c.family == "composite" else 1.0)
                if self.max_size + growth >= 1.0:
                    raise ConfigError(f"class {c.name}: grown size {self.max_size + growth:.3f} exceeds the frame")
            if c.family == "appear" and self.min_intensity + self.fade_speed * travel > 1.0 + 1e-9:
                raise ConfigError(f"class {c.name}: fade range exceeds full intensity")


@dataclass(frozen=True)
class SpatialDataConfig:
    n_samples: int = 1024
    H: int = 32
    W: int = 32
    C: int = 3
    max_count: int = 1
    min_size: float = 0.15
    max_size: float = 0.3
    eval_fraction: float = 0.5

    def validate(self) -> None:
        if self.n_samples < 1 or self.H < 4 or self.W < 4:
            raise ConfigError("spatial dataset needs n_samples >= 1 and H, W >= 4")
        if self.C not in (1, 3):
            raise ConfigError("C must be 1 or 3")
        if self.max_count < 1:
            raise ConfigError("max_count must be >= 1")
        if not 0.0 < self.min_size <= self.max_size < 0.5:
            raise ConfigError("need 0 < min_size <= max_size < 0.5")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ConfigError("eval_fraction must be in [0, 1)")


# ---------------------------------------------------------------------------
# seeds and sampling
# ---------------------------------------------------------------------------


def sample_seed(master_seed: int, index: int) -> int:
    """Per-sample seed: first 8 bytes (little endian) of blake2b("master:index")."""
    digest = hashlib.blake2b(f"{master_seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _phase(base: float, lo: float, hi: float, jitter: float, rng: np.random.Generator) -> float:
    """``base`` moved towards a uniform draw from [lo, hi] by ``jitter``."""
    draw = float(rng.uniform(lo, hi))
    return base + jitter * (draw - base)


def _sample_forward(spec: ClassSpec, class_id: int, cfg: VideoDataConfig, rng: np.random.Generator) -> MotionProgram:
    last = cfg.T - 1
    shape = spec.shape or cfg.shapes[int(rng.integers(len(cfg.shapes)))]
    pj = cfg.position_jitter
    size = float(rng.uniform(cfg.min_size, cfg.max_size))
    half = size / 2

    if spec.family == "translate":
        travel = cfg.translate_speed * last
        along = _phase(0.5, half + travel / 2, 1 - half - travel / 2, cfg.phase_jitter, rng)
        across = _phase(0.5, half, 1 - half, pj, rng)
        a, b = along - travel / 2, along + travel / 2
        if spec.direction == "right":
            s0, s1 = State(a, across, size), State(b, across, size)
        else:  # down
            s0, s1 = State(across, a, size), State(across, b, size)
        keys = ((0, s0), (last, s1))
        speed = cfg.translate_speed
    elif spec.family == "scale":
        size = _phase(cfg.min_size, cfg.min_size, cfg.max_size, cfg.phase_jitter, rng)
        end = size + cfg.scale_speed * last
        x, y = (_phase(0.5, end / 2, 1 - end / 2, pj, rng) for _ in range(2))
        keys = ((0, State(x, y, size)), (last, State(x, y, end)))
        speed = cfg.scale_speed
    elif spec.family == "appear":
        x, y = (_phase(0.5, half, 1 - half, pj, rng) for _ in range(2))
        span = cfg.fade_speed * last
        lo = _phase(cfg.min_intensity, cfg.min_intensity, 1.0 - span, cfg.phase_jitter, rng)
        keys = ((0, State(x, y, size, lo)), (last, State(x, y, size, lo + span)))
        speed = cfg.fade_speed
    elif spec.family == "composite":
        mid = last // 2
        travel = cfg.translate_speed * last / 2
        end = size + cfg.scale_speed * last / 2
        ehalf = end / 2
        x0 = float(rng.uniform(ehalf, 1 - ehalf - travel))
        y0 = float(rng.uniform(ehalf, 1 - ehalf))
        keys = (
            (0, State(x0, y0, size)),
            (mid, State(x0 + travel, y0, size)),
            (last, State(x0 + travel, y0, end)),
        )
        speed = cfg.translate_speed
    elif spec.family == "static":
        x, y = (_phase(0.5, half, 1 - half, pj, rng) for _ in range(2))
        keys = ((0, State(x, y, size)), (last, State(x, y, size)))
        speed = 0.0
    else:
        raise ConfigError(f"unknown family {spec.family!r}")
    return MotionProgram(class_id, spec.family, spec.direction, speed, shape, keys[0][1], keys, cfg.T)


def sample_program(class_id: int, cfg: VideoDataConfig, rng: np.random.Generator) -> MotionProgram:
    """Draw a program of ``class_id``; backward classes reverse a forward draw."""
    classes = roster(cfg.roster)
    spec = classes[class_id]
    if spec.forward:
        return _sample_forward(spec, class_id, cfg, rng)
    fwd_id = partner_index(classes, class_id)
    forward = _sample_forward(classes[fwd_id], fwd_id, cfg, rng)
    return forward.reversed(class_id, spec.family, spec.direction)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _mask(shape_kind: str, cx: float, cy: float, size: float, H: int, W: int) -> np.ndarray:
    """Hard rasterisation: a pixel is inside iff its centre is inside the shape."""
    py = (np.arange(H) + 0.5)[:, None]
    px = (np.arange(W) + 0.5)[None, :]
    cxp, cyp = cx * W, cy * H
    hx, hy = size * W / 2, size * H / 2
    if shape_kind == "square":
        return (np.abs(px - cxp) <= hx) & (np.abs(py - cyp) <= hy)
    if shape_kind == "disc":
        return ((px - cxp) / hx) ** 2 + ((py - cyp) / hy) ** 2 <= 1.0
    if shape_kind == "triangle":
        top = cyp - hy
        frac = (py - top) / (2 * hy)
        return (py >= top) & (py <= cyp + hy) & (np.abs(px - cxp) <= hx * frac)
    raise ConfigError(f"unknown shape {shape_kind!r}")


def _colour(shape_kind: str, C: int) -> np.ndarray:
    if C == 1:
        return np.array([SHAPE_GRAY[shape_kind]])
    return np.array(SHAPE_COLORS[shape_kind])


def render_frame(program: MotionProgram, t: int, H: int, W: int, C: int = 3) -> np.ndarray:
    """Render frame ``t`` of ``program`` as a (C, H, W) float64 array in [0, 1]."""
    s = program.state_at(t)
    mask = _mask(program.shape_kind, s.x, s.y, s.size, H, W)
    colour = _colour(program.shape_kind, C) * s.intensity
    return mask[None, :, :] * colour[:, None, None]


def render_video(program: MotionProgram, H: int, W: int, C: int = 3) -> np.ndarray:
    return np.stack([render_frame(program, t, H, W, C) for t in range(program.n_frames)])


def in_frame(program: MotionProgram) -> bool:
    """Every keyframe (hence every frame) keeps the object inside the unit square."""
    for _, s in program.keyframes:
        h = s.size / 2
        if s.x - h < -1e-12 or s.x + h > 1 + 1e-12 or s.y - h < -1e-12 or s.y + h > 1 + 1e-12:
            return False
    return True


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class VideoDataset:
    frames: np.ndarray  # (n, T, C, H, W) float32
    labels: np.ndarray  # (n,) int64
    seeds: np.ndarray  # (n,) uint64
    class_names: list[str] = field(default_factory=list)
    eval_fraction: float = 0.5
    n_classes: int = 0
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.frames.shape[1:])  # T, C, H, W

    def split_indices(self, split: str) -> np.ndarray:
        """Contiguous tail of ``eval_fraction`` samples is the eval split."""
        n = len(self)
        n_eval = int(math.floor(n * self.eval_fraction))
        if split == "train":
            return np.arange(0, n - n_eval)
        if split == "eval":
            return np.arange(n - n_eval, n)
        if split == "all":
            return np.arange(n)
        raise ValueError(f"unknown split {split!r}")


def _video_sample(args) -> tuple[int, int, np.ndarray]:
    cfg, master_seed, index = args
    n_classes = len(roster(cfg.roster))
    label = index % n_classes
    seed = sample_seed(master_seed, index)
    rng = np.random.default_rng(seed)
    program = sample_program(label, cfg, rng)
    return label, seed, render_video(program, cfg.H, cfg.W, cfg.C).astype(np.float32)


def _spatial_sample(args) -> tuple[int, int, int, int, np.ndarray]:
    cfg, master_seed, index = args
    seed = sample_seed(master_seed, index)
    rng = np.random.default_rng(seed)
    count, (bx, by), image = render_spatial(cfg, rng)
    return count, seed, bx, by, image.astype(np.float32)


def _run(fn, cfg, master_seed, n, workers):
    jobs = [(cfg, master_seed, i) for i in range(n)]
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, n // (4 * workers))))


def build_video_dataset(cfg: VideoDataConfig, seed: int, workers: int = 1) -> VideoDataset:
    cfg.validate()
    results = _run(_video_sample, cfg, seed, cfg.n_samples, workers)
    classes = roster(cfg.roster)
    return VideoDataset(
        frames=np.stack([r[2] for r in results]),
        labels=np.array([r[0] for r in results], dtype=np.int64),
        seeds=np.array([r[1] for r in results], dtype=np.uint64),
        class_names=[c.name for c in classes],
        eval_fraction=cfg.eval_fraction,
        n_classes=len(classes),
    )


def location_bin(coord: float, n_bins: int = N_LOCATION_BINS) -> int:
    """Bin of a unit-interval coordinate; 16 equal intervals per axis."""
    return min(int(math.floor(coord * n_bins)), n_bins - 1)


def render_spatial(cfg: SpatialDataConfig, rng: np.random.Generator) -> tuple[int, tuple[int, int], np.ndarray]:
    """One still image with ``count`` non-overlapping objects.

    Object 0 is the location target, drawn in a colour no distractor uses.
    Centres lie on the half-pixel grid, so every symmetric shape's rasterised
    centroid equals its true centre exactly.
    """
    H, W, C = cfg.H, cfg.W, cfg.C
    count = int(rng.integers(1, cfg.max_count + 1))
    image = np.zeros((C, H, W))
    boxes: list[tuple[float, float, float, float]] = []
    target_bins = (0, 0)
    for k in range(count):
        for _ in range(1000):
            size = float(rng.uniform(cfg.min_size, cfg.max_size))
            hx, hy = size * W / 2, size * H / 2
            # half-pixel grid positions keeping the shape inside the frame
            gx = np.arange(math.ceil(2 * hx), math.floor(2 * (W - hx)) + 1) / 2
            gy = np.arange(math.ceil(2 * hy), math.floor(2 * (H - hy)) + 1) / 2
            cxp, cyp = float(gx[rng.integers(gx.size)]), float(gy[rng.integers(gy.size)])
            box = (cxp - hx, cyp - hy, cxp + hx, cyp + hy)
            if all(box[2] < b[0] or box[0] > b[2] or box[3] < b[1] or box[1] > b[3] for b in boxes):
                break
        else:
            raise ConfigError(f"could not place {count} non-overlapping objects")
        boxes.append(box)
        kind = ("square", "disc")[int(rng.integers(2))]
        mask = _mask(kind, cxp / W, cyp / H, size, H, W)
        colour = np.array(TARGET_COLOR[:C] if C == 3 else (1.0,)) if k == 0 else np.array(
            DISTRACTOR_COLOR if C == 3 else (0.5,)
        )
        image = np.where(mask[None], colour[:, None, None], image)
        if k == 0:
            target_bins = (location_bin(cxp / W), location_bin(cyp / H))
    return count, target_bins, image


def build_spatial_dataset(cfg: SpatialDataConfig, seed: int, workers: int = 1) -> VideoDataset:
    cfg.validate()
    results = _run(_spatial_sample, cfg, seed, cfg.n_samples, workers)
    return VideoDataset(
        frames=np.stack([r[4] for r in results])[:, None],
        labels=np.array([r[0] - 1 for r in results], dtype=np.int64),
        seeds=np.array([r[1] for r in results], dtype=np.uint64),
        class_names=[f"count-{i}" for i in range(1, cfg.max_count + 1)],
        eval_fraction=cfg.eval_fraction,
        n_classes=cfg.max_count,
        extra={
            "loc_x": np.array([r[2] for r in results], dtype=np.int64),
            "loc_y": np.array([r[3] for r in results], dtype=np.int64),
        },
    )


# ---------------------------------------------------------------------------
# SVD1 container
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIII")


def write_container(path: str | Path, ds: VideoDataset, manifest: dict[str, object]) -> None:
    """Write the binary container plus a ``<path>.manifest`` key=value sidecar.

    Header: magic | version | n_samples | T | C | H | W | n_classes (u32 LE).
    Per sample: label u32 | seed u64 | [loc_x u32 | loc_y u32, spatial only]
    | frames as little-endian f32, row-major (T, C, H, W).  For spatial files
    the label slot holds the count class index, count - 1.
    """
    path = Path(path)
    spatial = "loc_x" in ds.extra
    n = len(ds)
    T, C, H, W = ds.shape
    version = SPATIAL_VERSION if spatial else VIDEO_VERSION
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, version, n, T, C, H, W, ds.n_classes))
        for i in range(n):
            fh.write(struct.pack("<IQ", int(ds.labels[i]), int(ds.seeds[i])))
            if spatial:
                fh.write(struct.pack("<II", int(ds.extra["loc_x"][i]), int(ds.extra["loc_y"][i])))
            fh.write(np.ascontiguousarray(ds.frames[i], dtype="<f4").tobytes())
    lines = [f"{k}={v}" for k, v in manifest.items()]
    lines.append("class_names=" + ",".join(ds.class_names))
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, str]:
    side = Path(str(path) + ".manifest")
    out: dict[str, str] = {}
    if side.exists():
        for line in side.read_text(encoding="utf-8").splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                out[k] = v
    return out


def read_container(path: str | Path) -> VideoDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, n, T, C, H, W, n_classes = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version not in (VIDEO_VERSION, SPATIAL_VERSION):
        raise ValueError(f"{path}: unsupported version {version}")
    spatial = version == SPATIAL_VERSION
    frame_count = T * C * H * W
    rec = struct.Struct("<IQII" if spatial else "<IQ")
    stride = rec.size + 4 * frame_count
    if len(raw) != _HEADER.size + n * stride:
        raise ValueError(f"{path}: size {len(raw)} does not match header")
    frames = np.empty((n, T, C, H, W), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    seeds = np.empty(n, dtype=np.uint64)
    loc_x = np.empty(n, dtype=np.int64)
    loc_y = np.empty(n, dtype=np.int64)
    off = _HEADER.size
    for i in range(n):
        values = rec.unpack_from(raw, off)
        labels[i], seeds[i] = values[0], values[1]
        if spatial:
            loc_x[i], loc_y[i] = values[2], values[3]
        off += rec.size
        frames[i] = np.frombuffer(raw, dtype="<f4", count=frame_count, offset=off).reshape(T, C, H, W)
        off += 4 * frame_count
    manifest = read_manifest(path)
    names = manifest.get("class_names", "")
    class_names = names.split(",") if names else [str(i) for i in range(n_classes)]
    ds = VideoDataset(
        frames=frames,
        labels=labels,
        seeds=seeds,
        class_names=class_names,
        eval_fraction=float(manifest.get("eval_fraction", 0.5)),
        n_classes=n_classes,
    )
    if spatial:
        ds.extra = {"loc_x": loc_x, "loc_y": loc_y}
    return ds


def config_items(cfg) -> dict[str, object]:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else v
    return out


def generate_dataset(cfg: VideoDataConfig, seed: int, out: str | Path, workers: int = 1) -> VideoDataset:
    """Generate a video dataset and write it to ``out`` (SVD1, version 1)."""
    ds = build_video_dataset(cfg, seed, workers)
    manifest = {"kind": "video", "seed": seed, **config_items(cfg), "seed_rule": "blake2b8(master:index)"}
    write_container(out, ds, manifest)
    return ds


def generate_spatial_dataset(cfg: SpatialDataConfig, seed: int, out: str | Path, workers: int = 1) -> VideoDataset:
    """Generate a still-image location/count dataset (SVD1, version 2)."""
    ds = build_spatial_dataset(cfg, seed, workers)
    manifest = {
        "kind": "spatial",
        "seed": seed,
        **config_items(cfg),
        "n_location_bins": N_LOCATION_BINS,
        "seed_rule": "blake2b8(master:index)",
    }
    write_container(out, ds, manifest)
    return ds


__all__ = [
    "ClassSpec",
    "ConfigError",
    "MotionProgram",
    "SpatialDataConfig",
    "State",
    "VideoDataConfig",
    "VideoDataset",
    "build_spatial_dataset",
    "build_video_dataset",
    "generate_dataset",
    "generate_spatial_dataset",
    "in_frame",
    "location_bin",
    "order_sensitive",
    "partner_index",
    "read_container",
    "render_frame",
    "render_spatial",
    "render_video",
    "roster",
    "sample_program",
    "sample_seed",
    "write_container",
]
