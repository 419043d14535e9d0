"""Parameterised view construction and relative transforms.

A view is ``apply(video, seq)`` for an :class:`AugmentationSequence`
``seq`` holding at most one parameter per kind.  Crop boxes are recorded as
``(x1, y1, h, w)`` fractions of the full frame, so crop deltas are
frame-normalised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

KINDS = ("time", "crop", "color", "blur")
ENCODABLE = ("crop", "time")


class AugmentationError(ValueError):
    """Invalid augmentation parameters or policy."""


@dataclass(frozen=True)
class TimeShift:
    start_frame: int
    kind = "time"


@dataclass(frozen=True)
class SpatialCrop:
    x1: float
    y1: float
    h: float
    w: float
    kind = "crop"

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.h, self.w)

    @property
    def area(self) -> float:
        return self.h * self.w


@dataclass(frozen=True)
class ColorJitter:
    brightness: float
    contrast: float
    kind = "color"


@dataclass(frozen=True)
class Blur:
    radius: float
    kind = "blur"


AugmentationParam = Union[TimeShift, SpatialCrop, ColorJitter, Blur]


class AugmentationSequence(tuple):
    """Ordered parameters, canonical kind order time, crop, color, blur."""

    def __new__(cls, params: Iterable[AugmentationParam] = ()):
        params = list(params)
        kinds = [p.kind for p in params]
        if len(set(kinds)) != len(kinds):
            raise AugmentationError(f"duplicate augmentation kinds in {kinds}")
        params.sort(key=lambda p: KINDS.index(p.kind))
        return super().__new__(cls, params)

    def get(self, kind: str) -> AugmentationParam | None:
        for p in self:
            if p.kind == kind:
                return p
        return None

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(p.kind for p in self)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Which kinds are active and the ranges they are drawn from."""

    time_shift: bool = True
    crop: bool = True
    color_jitter: bool = True
    blur: bool = False
    n_frames: int = 32
    clip_length: int = 8
    max_time_shift: int = 12
    crop_area_min: float = 0.16
    crop_area_max: float = 0.81
    crop_aspect_min: float = 3 / 4
    crop_aspect_max: float = 4 / 3
    brightness: float = 0.2
    contrast: float = 0.2
    blur_radius_max: float = 1.0

    def validate(self) -> None:
        if not (self.time_shift or self.crop):
            raise AugmentationError("policy must activate TimeShift or SpatialCrop")
        if self.clip_length > self.n_frames:
            raise AugmentationError("clip_length exceeds n_frames")
        if not 0 < self.crop_area_min <= self.crop_area_max <= 1:
            raise AugmentationError("crop area range must satisfy 0 < min <= max <= 1")


@dataclass(frozen=True)
class RelativeTransform:
    """tau_j - tau_i restricted to the encodable kinds present in both."""

    crop_delta: tuple[float, float, float, float] | None = None
    time_delta: int | None = None

    @property
    def time_sign(self) -> int | None:
        if self.time_delta is None:
            return None
        return (self.time_delta > 0) - (self.time_delta < 0)

    def __neg__(self) -> RelativeTransform:
        crop = None if self.crop_delta is None else tuple(-v for v in self.crop_delta)
        time = None if self.time_delta is None else -self.time_delta
        return RelativeTransform(crop, time)

    def is_zero(self) -> bool:
        return (self.crop_delta is None or not any(self.crop_delta)) and not self.time_delta


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _sample_crop(policy: AugmentationPolicy, rng: np.random.Generator) -> SpatialCrop:
    log_lo, log_hi = math.log(policy.crop_aspect_min), math.log(policy.crop_aspect_max)
    for _ in range(20):
        area = rng.uniform(policy.crop_area_min, policy.crop_area_max)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = math.sqrt(area * aspect)
        h = math.sqrt(area / aspect)
        if w <= 1.0 and h <= 1.0:
            break
    else:
        w = h = math.sqrt(area)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return SpatialCrop(float(x1), float(y1), float(h), float(w))


def _sample_photometric(policy: AugmentationPolicy, rng: np.random.Generator) -> list[AugmentationParam]:
    out: list[AugmentationParam] = []
    if policy.color_jitter:
        b = rng.uniform(-policy.brightness, policy.brightness)
        c = rng.uniform(-policy.contrast, policy.contrast)
        out.append(ColorJitter(float(b), float(c)))
    if policy.blur:
        out.append(Blur(float(rng.uniform(0.0, policy.blur_radius_max))))
    return out


def sample_augmentations(policy: AugmentationPolicy, rng: np.random.Generator) -> AugmentationSequence:
    """One independently drawn parameter per active kind."""
    policy.validate()
    params: list[AugmentationParam] = []
    if policy.time_shift:
        params.append(TimeShift(int(rng.integers(0, policy.n_frames - policy.clip_length + 1))))
    if policy.crop:
        params.append(_sample_crop(policy, rng))
    params.extend(_sample_photometric(policy, rng))
    return AugmentationSequence(params)


def sample_pair(
    policy: AugmentationPolicy, rng: np.random.Generator
) -> tuple[AugmentationSequence, AugmentationSequence]:
    """Two views' parameters with ``|start_j - start_i| <= max_time_shift``.

    The shift is drawn uniformly from [-max_time_shift, max_time_shift]
    first, then the anchor start uniformly among positions where both clips
    fit.  Every other kind is drawn independently per view.
    """
    policy.validate()
    seqs = []
    starts: tuple[int, int] | None = None
    if policy.time_shift:
        last = policy.n_frames - policy.clip_length
        m = min(policy.max_time_shift, last)
        delta = int(rng.integers(-m, m + 1))
        lo, hi = max(0, -delta), min(last, last - delta)
        si = int(rng.integers(lo, hi + 1))
        starts = (si, si + delta)
    for k in range(2):
        params: list[AugmentationParam] = []
        if starts is not None:
            params.append(TimeShift(starts[k]))
        if policy.crop:
            params.append(_sample_crop(policy, rng))
        params.extend(_sample_photometric(policy, rng))
        seqs.append(AugmentationSequence(params))
    return seqs[0], seqs[1]


# ---------------------------------------------------------------------------
# application
# ---------------------------------------------------------------------------


def _interp_matrix(offset: float, extent: float, n_in: int, n_out: int) -> np.ndarray:
    """Bilinear sampling weights (n_out, n_in) for the window [offset, offset+extent)."""
    centres = (offset + (np.arange(n_out) + 0.5) / n_out * extent) * n_in - 0.5
    centres = np.clip(centres, 0.0, n_in - 1)
    lo = np.floor(centres).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = centres - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def crop_resize_matrices(crop: SpatialCrop | None, H: int, W: int, out_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column sampling matrices shared by every frame of a clip."""
    x1, y1, h, w = crop.box if crop is not None else (0.0, 0.0, 1.0, 1.0)
    return _interp_matrix(y1, h, H, out_size), _interp_matrix(x1, w, W, out_size)


def _gaussian_kernel(radius: float) -> np.ndarray:
    if radius <= 0:
        return np.ones(1)
    half = max(1, int(math.ceil(2 * radius)))
    x = np.arange(-half, half + 1)
    k = np.exp(-0.5 * (x / radius) ** 2)
    return k / k.sum()


def _blur(clip: np.ndarray, radius: float) -> np.ndarray:
    k = _gaussian_kernel(radius)
    if k.size == 1:
        return clip
    half = k.size // 2
    pad = np.pad(clip, [(0, 0)] * (clip.ndim - 2) + [(half, half), (half, half)], mode="edge")
    n = clip.shape[-1]
    rows = sum(k[i] * pad[..., i : i + clip.shape[-2], half : half + n] for i in range(k.size))
    padr = np.pad(rows, [(0, 0)] * (clip.ndim - 2) + [(0, 0), (half, half)], mode="edge")
    return sum(k[i] * padr[..., :, i : i + n] for i in range(k.size))


def validate_for(seq: AugmentationSequence, n_frames: int, clip_length: int) -> None:
    shift = seq.get("time")
    if shift is not None and not 0 <= shift.start_frame <= n_frames - clip_length:
        raise AugmentationError(f"start_frame {shift.start_frame} out of range for T={n_frames}, clip={clip_length}")
    if shift is None and clip_length > n_frames:
        raise AugmentationError("clip_length exceeds video length")
    crop = seq.get("crop")
    if crop is not None:
        x1, y1, h, w = crop.box
        if min(x1, y1) < 0 or h <= 0 or w <= 0 or x1 + w > 1 + 1e-12 or y1 + h > 1 + 1e-12:
            raise AugmentationError(f"crop box {crop.box} leaves the unit square")


def apply(video: np.ndarray, seq: AugmentationSequence, clip_length: int, out_size: int) -> np.ndarray:
    """Build the view ``t(video; seq)`` of shape (clip_length, C, out_size, out_size).

    Frames [start, start + clip_length) are selected, the same crop box is
    cut from each and resized bilinearly, then photometric changes are
    applied with identical constants to every frame.
    """
    video = np.asarray(video, dtype=np.float64)
    T, C, H, W = video.shape
    validate_for(seq, T, clip_length)
    shift = seq.get("time")
    start = shift.start_frame if shift is not None else 0
    clip = video[start : start + clip_length]
    ry, rx = crop_resize_matrices(seq.get("crop"), H, W, out_size)
    view = np.einsum("oh,tchw,pw->tcop", ry, clip, rx, optimize=True)
    blur = seq.get("blur")
    if blur is not None:
        view = _blur(view, blur.radius)
    jitter = seq.get("color")
    if jitter is not None:
        m = view.mean()
        view = np.clip((view - m) * (1.0 + jitter.contrast) + m + jitter.brightness, 0.0, 1.0)
    return view


def relative(tau_j: AugmentationSequence, tau_i: AugmentationSequence) -> RelativeTransform:
    """Encodable part of tau_j - tau_i (crop box and start-frame differences)."""
    kinds_i, kinds_j = set(tau_i.kinds), set(tau_j.kinds)
    if kinds_i != kinds_j:
        raise AugmentationError(f"sequences disagree on kinds: {sorted(kinds_j)} vs {sorted(kinds_i)}")
    crop = None
    if "crop" in kinds_i:
        bj, bi = tau_j.get("crop").box, tau_i.get("crop").box
        crop = tuple(a - b for a, b in zip(bj, bi))
    time = None
    if "time" in kinds_i:
        time = tau_j.get("time").start_frame - tau_i.get("time").start_frame
    return RelativeTransform(crop, time)
