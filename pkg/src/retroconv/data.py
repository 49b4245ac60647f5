"""Synthetic change-detection clips, clip files and the training-sample protocol.

Scenes are moving rectangles and disks over one of three backgrounds:
``static-texture`` (fixed smooth texture), ``dynamic-sinusoid`` (texture plus
a travelling luminance wave, i.e. background motion that is not change) and
``noise-field`` (texture plus a smooth random field redrawn every frame).

A pixel is labelled as change when some moving object covered it at some but
not all of the rendered times. Objects that do not move never contribute.
"""
from __future__ import annotations

import io
import logging
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (ConfigError, FormatError, MagicError, SamplingError, ShapeError, SpecError,
                     TruncatedError)
from .tensor import bilinear_resize

log = logging.getLogger(__name__)

BACKGROUNDS = ("static-texture", "dynamic-sinusoid", "noise-field")
SHAPES = ("rect", "disk")
STATIC_SUFFIX = "-static"
CLIP_MAGIC = b"RCCLIP1"


# --- scenes ----------------------------------------------------------------

@dataclass(frozen=True)
class ObjectSpec:
    shape: str                          # rect | disk
    size: int                           # side length or diameter, px
    top: float                          # position at t = 0
    left: float
    velocity: tuple[float, float] = (0.0, 0.0)  # px per frame, (rows, cols)
    intensity: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def position(self, t: float) -> tuple[float, float]:
        return self.top + self.velocity[0] * t, self.left + self.velocity[1] * t


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple[int, int] = (64, 64)
    background: str = "dynamic-sinusoid"
    objects: tuple[ObjectSpec, ...] = ()
    drift: float = 0.0          # brightness change per frame
    noise_sigma: float = 0.0
    seed: int = 0
    tag: str | None = None      # scenario name, defaults to the background kind

    def validate(self):
        h, w = self.canvas
        if h < 1 or w < 1:
            raise SpecError(f"canvas must be positive, got {self.canvas}")
        if self.background not in BACKGROUNDS:
            raise SpecError(f"background must be one of {BACKGROUNDS}, got {self.background!r}")
        for o in self.objects:
            if o.shape not in SHAPES:
                raise SpecError(f"object shape must be one of {SHAPES}, got {o.shape!r}")
            if o.size < 1:
                raise SpecError(f"object size must be >= 1, got {o.size}")
            if abs(o.velocity[0]) > h / 2 or abs(o.velocity[1]) > w / 2:
                raise SpecError(f"velocity {o.velocity} exceeds half the canvas per frame")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be >= 0")
        return self


@dataclass(eq=False)
class ClipSample:
    clip: np.ndarray    # (1, 3, L, H, W) float32 in [0, 1]
    mask: np.ndarray    # (H, W) uint8, change labels for the current frame
    tag: str

    def __post_init__(self):
        if self.clip.ndim != 5 or self.clip.shape[0] != 1:
            raise ShapeError(f"sample clip must be (1, C, L, H, W), got {self.clip.shape}")
        if self.mask.shape != self.clip.shape[3:]:
            raise ShapeError(f"mask {self.mask.shape} does not match clip {self.clip.shape}")

    @property
    def fg_ratio(self) -> float:
        return float(self.mask.mean())

    @property
    def is_static(self) -> bool:
        return self.tag.endswith(STATIC_SUFFIX)


def footprint(obj: ObjectSpec, t: float, canvas) -> np.ndarray:
    h, w = canvas
    top, left = obj.position(t)
    i = np.arange(h)[:, None]
    j = np.arange(w)[None, :]
    if obj.shape == "rect":
        return (i >= top) & (i < top + obj.size) & (j >= left) & (j < left + obj.size)
    r = obj.size / 2.0
    return (i - (top + r - 0.5)) ** 2 + (j - (left + r - 0.5)) ** 2 <= r * r


def _check_inside(obj: ObjectSpec, times, canvas):
    h, w = canvas
    for t in times:
        top, left = obj.position(t)
        if top < 0 or left < 0 or top + obj.size > h or left + obj.size > w:
            raise SpecError(f"{obj.shape} of size {obj.size} leaves the {h}x{w} canvas at t={t} "
                            f"(top-left {top:.1f}, {left:.1f})")


def _texture(rng, h, w):
    """Smooth colour texture in roughly [0.25, 0.75]."""
    i = np.arange(h)[:, None] / h
    j = np.arange(w)[None, :] / w
    out = np.empty((3, h, w))
    for c in range(3):
        acc = np.zeros((h, w))
        for _ in range(4):
            fy, fx = rng.uniform(0.5, 3.0, size=2) * rng.choice([-1, 1], size=2)
            acc += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fy * i + fx * j) + rng.uniform(0, 2 * np.pi))
        out[c] = 0.5 + 0.25 * acc / np.abs(acc).max()
    return out


def _smooth_field(rng, h, w, amp):
    coarse = rng.standard_normal((1, 1, 1, max(2, h // 8), max(2, w // 8)))
    return amp * bilinear_resize(coarse, h, w)[0, 0, 0]


def _background(spec: SceneSpec, t: float, base, wave):
    h, w = spec.canvas
    if spec.background == "static-texture":
        return base.copy()
    if spec.background == "dynamic-sinusoid":
        amp, fy, fx, omega, phase = wave
        i = np.arange(h)[:, None]
        j = np.arange(w)[None, :]
        return base + amp * np.sin(fy * i + fx * j + omega * t + phase)
    # noise-field: a new smooth field per time step, keyed by (seed, t) so any time is reproducible
    frng = np.random.default_rng([spec.seed, 1, int(round(t * 1000))])
    return base + _smooth_field(frng, h, w, 0.08)


def change_mask(spec: SceneSpec, times) -> np.ndarray:
    """Union minus intersection of every moving object's footprints over ``times``."""
    mask = np.zeros(spec.canvas, dtype=bool)
    for obj in spec.objects:
        if obj.velocity[0] == 0 and obj.velocity[1] == 0:
            continue
        feet = [footprint(obj, t, spec.canvas) for t in times]
        mask |= np.logical_or.reduce(feet) & ~np.logical_and.reduce(feet)
    return mask.astype(np.uint8)


def generate_clip(spec: SceneSpec, L: int, times=None) -> ClipSample:
    """Render a clip whose frames sit at ``times`` (default 0..L-1); the last is current."""
    spec.validate()
    if L < 2:
        raise SpecError(f"clips need L >= 2, got {L}")
    times = np.arange(L, dtype=np.float64) if times is None else np.asarray(times, dtype=np.float64)
    if times.shape != (L,):
        raise SpecError(f"expected {L} frame times, got {times.shape}")
    for obj in spec.objects:
        _check_inside(obj, times, spec.canvas)
    h, w = spec.canvas
    rng = np.random.default_rng(spec.seed)
    base = _texture(rng, h, w)
    wave = (rng.uniform(0.08, 0.15), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4),
            rng.uniform(0.5, 1.2), rng.uniform(0, 2 * np.pi))
    frames = np.empty((3, L, h, w))
    for k, t in enumerate(times):
        f = _background(spec, t, base, wave)
        for obj in spec.objects:
            f[:, footprint(obj, t, spec.canvas)] = np.asarray(obj.intensity)[:, None]
        f = f + spec.drift * t
        if spec.noise_sigma:
            nrng = np.random.default_rng([spec.seed, 2, int(round(t * 1000))])
            f = f + nrng.normal(0.0, spec.noise_sigma, f.shape)
        frames[:, k] = f
    clip = np.clip(frames, 0.0, 1.0).astype(np.float32)[None]
    return ClipSample(clip, change_mask(spec, times), spec.tag or spec.background)


# --- random scenario generation ----------------------------------------------

@dataclass
class ScenarioConfig:
    """Distribution over scenes for one scenario of a synthetic corpus."""
    name: str = "dynamic-sinusoid"
    background: str = "dynamic-sinusoid"
    count: int = 100
    objects: tuple[int, int] = (1, 3)          # inclusive range of moving objects
    size: tuple[int, int] = (10, 20)
    speed: tuple[float, float] = (1.0, 3.0)    # px per frame
    still_object_prob: float = 0.25            # chance of one extra zero-velocity object
    drift: float = 0.0
    noise_sigma: float = 0.01


def _contrasting_colour(rng):
    while True:
        c = rng.uniform(0.0, 1.0, size=3)
        if abs(c.mean() - 0.5) > 0.3 or np.ptp(c) > 0.6:
            return tuple(float(v) for v in c)


def _place(rng, shape, size, velocity, times, canvas):
    """Random start position keeping the object inside the canvas at every time, or None."""
    h, w = canvas
    t0, t1 = float(min(times)), float(max(times))
    lo, hi = [], []
    for v, extent in zip(velocity, (h, w)):
        a, b = v * t0, v * t1
        lo.append(-min(a, b))
        hi.append(extent - size - max(a, b))
    if hi[0] < lo[0] or hi[1] < lo[1]:
        return None
    return ObjectSpec(shape, size, float(np.floor(rng.uniform(lo[0], hi[0] + 1))) if hi[0] > lo[0] else lo[0],
                      float(np.floor(rng.uniform(lo[1], hi[1] + 1))) if hi[1] > lo[1] else lo[1],
                      velocity, _contrasting_colour(rng))


def random_scene(cfg: ScenarioConfig, rng: np.random.Generator, canvas, times) -> SceneSpec:
    objs = []
    n_moving = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    attempts = 0
    while len(objs) < n_moving:
        attempts += 1
        if attempts > 1000:
            raise SpecError(f"scenario {cfg.name!r}: cannot place objects of size {cfg.size} moving at "
                            f"{cfg.speed} px/frame on a {canvas[0]}x{canvas[1]} canvas")
        size = int(rng.integers(cfg.size[0], cfg.size[1] + 1))
        speed = rng.uniform(*cfg.speed)
        ang = rng.uniform(0, 2 * np.pi)
        vel = (float(np.round(speed * np.sin(ang))), float(np.round(speed * np.cos(ang))))
        if vel == (0.0, 0.0):
            continue
        o = _place(rng, str(rng.choice(SHAPES)), size, vel, times, canvas)
        if o is not None:
            objs.append(o)
    if rng.random() < cfg.still_object_prob:
        size = int(rng.integers(cfg.size[0], cfg.size[1] + 1))
        still = _place(rng, str(rng.choice(SHAPES)), size, (0.0, 0.0), times, canvas)
        if still is not None:
            objs.insert(0, still)
    return SceneSpec(tuple(canvas), cfg.background, tuple(objs), cfg.drift, cfg.noise_sigma,
                     int(rng.integers(2**31)), cfg.name)


def synth_corpus(scenarios, L: int, canvas, interval_range=(1, 2), seed: int = 0) -> list[ClipSample]:
    """Render every scenario's clips with temporally jittered frame spacing.

    Each clip is cut from a virtual sequence long enough for the largest
    interval; the interval is drawn by :func:`temporal_jitter_pick`.
    """
    rng = np.random.default_rng(seed)
    current = (L - 1) * interval_range[1]
    frames = range(current + 1)
    out = []
    for sc in scenarios:
        for _ in range(sc.count):
            times = temporal_jitter_pick(frames, current, L, interval_range, rng)
            out.append(generate_clip(random_scene(sc, rng, canvas, times), L, times))
    return out


# --- static synthesis, jitter, cropping, balancing ----------------------------

def synthesize_static(sample: ClipSample) -> ClipSample:
    """Every frame becomes a copy of the current frame; the label becomes all background."""
    clip = np.repeat(sample.clip[:, :, -1:], sample.clip.shape[2], axis=2)
    tag = sample.tag if sample.is_static else sample.tag + STATIC_SUFFIX
    return ClipSample(clip, np.zeros_like(sample.mask), tag)


def temporal_jitter_pick(frames, current_index: int, L: int, interval_range, rng) -> list[int]:
    """Indices ``current - (L-1)k, ..., current - k, current`` with k drawn uniformly.

    When the history is too short for the upper end of the range the range is
    clamped to the largest interval that still fits.
    """
    lo, hi = interval_range
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad interval range {interval_range}")
    if not 0 <= current_index < len(frames):
        raise SamplingError(f"current index {current_index} outside sequence of {len(frames)} frames")
    if current_index < L - 1:
        raise SamplingError(f"only {current_index + 1} frames up to the current one, need {L}")
    hi = min(hi, current_index // (L - 1))
    lo = min(lo, hi)
    k = int(rng.integers(lo, hi + 1))
    return [current_index - (L - 1 - i) * k for i in range(L)]


@dataclass
class CropSpec:
    scales: tuple[float, ...] = (1.0,)
    crop: tuple[int, int] = (64, 64)     # (h, w)
    stride: tuple[int, int] = (32, 32)


def crop_count(h: int, w: int, spec: CropSpec) -> int:
    total = 0
    for s in spec.scales:
        sh, sw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        if sh >= spec.crop[0] and sw >= spec.crop[1]:
            total += ((sh - spec.crop[0]) // spec.stride[0] + 1) * ((sw - spec.crop[1]) // spec.stride[1] + 1)
    return total


def _resize_mask(mask, h, w):
    if mask.shape == (h, w):
        return mask.copy()
    m = bilinear_resize(mask[None, None, None].astype(np.float32), h, w)[0, 0, 0]
    return (m >= 0.5).astype(np.uint8)


def multi_scale_crop(sample: ClipSample, spec: CropSpec) -> list[ClipSample]:
    """Resize to each scale, then tile without padding; partial tiles are dropped."""
    ch, cw = spec.crop
    h, w = sample.mask.shape
    out = []
    for s in spec.scales:
        sh, sw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        if sh < ch or sw < cw:
            raise ShapeError(f"crop {ch}x{cw} larger than {sh}x{sw} at scale {s}")
        clip = bilinear_resize(sample.clip, sh, sw)
        mask = _resize_mask(sample.mask, sh, sw)
        for i in range(0, sh - ch + 1, spec.stride[0]):
            for j in range(0, sw - cw + 1, spec.stride[1]):
                out.append(ClipSample(np.ascontiguousarray(clip[..., i:i + ch, j:j + cw]),
                                      mask[i:i + ch, j:j + cw].copy(), sample.tag))
    return out


def class_balance_filter(samples, lo: float = 0.05, hi: float = 0.60) -> list[ClipSample]:
    """Keep samples with lo <= fg_ratio <= hi; synthesized static samples always pass."""
    if not 0 <= lo < hi <= 1:
        raise ConfigError(f"need 0 <= lo < hi <= 1, got ({lo}, {hi})")
    return [s for s in samples if s.is_static or lo <= s.fg_ratio <= hi]


def group_by_tag(samples) -> dict[str, list[ClipSample]]:
    groups = defaultdict(list)
    for s in samples:
        groups[s.tag].append(s)
    return dict(groups)


def scenario_balanced_iter(groups: dict, rng: np.random.Generator):
    """Endless stream: a scenario uniformly, then a member uniformly (with replacement)."""
    if not groups:
        raise ConfigError("no scenarios to sample from")
    names = sorted(groups)
    for n in names:
        if not groups[n]:
            raise ConfigError(f"scenario {n!r} has no samples")

    def stream():
        while True:
            g = groups[names[int(rng.integers(len(names)))]]
            yield g[int(rng.integers(len(g)))]
    return stream()


# --- augmentation -------------------------------------------------------------

@dataclass
class AugmentConfig:
    hflip: float = 0.5                          # probability
    vflip: float = 0.5
    contrast: tuple[float, float] | None = (0.8, 1.2)
    brightness: tuple[float, float] | None = (-0.1, 0.1)
    noise_sigma: float = 0.01

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, None, None, 0.0)


def hflip(sample: ClipSample) -> ClipSample:
    return replace(sample, clip=sample.clip[..., ::-1].copy(), mask=sample.mask[:, ::-1].copy())


def vflip(sample: ClipSample) -> ClipSample:
    return replace(sample, clip=sample.clip[..., ::-1, :].copy(), mask=sample.mask[::-1].copy())


def augment(sample: ClipSample, cfg: AugmentConfig, rng: np.random.Generator) -> ClipSample:
    """Flips hit frames and mask together; photometric jitter touches frames only."""
    # draw everything up front so the stream does not depend on which toggles fire
    u = rng.random(2)
    c = rng.uniform(*cfg.contrast) if cfg.contrast else 1.0
    b = rng.uniform(*cfg.brightness) if cfg.brightness else 0.0
    out = sample
    if u[0] < cfg.hflip:
        out = hflip(out)
    if u[1] < cfg.vflip:
        out = vflip(out)
    if cfg.contrast or cfg.brightness or cfg.noise_sigma:
        x = (out.clip - 0.5) * c + 0.5 + b
        if cfg.noise_sigma:
            x = x + rng.normal(0.0, cfg.noise_sigma, x.shape)
        out = replace(out, clip=np.clip(x, 0.0, 1.0).astype(np.float32))
    return out


# --- sampler -----------------------------------------------------------------

@dataclass
class SamplerConfig:
    fg_bounds: tuple[float, float] = (0.05, 0.60)
    interval_range: tuple[int, int] = (1, 2)
    scenario_weights: dict = field(default_factory=dict)   # empty means uniform
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    crop: CropSpec | None = None

    def __post_init__(self):
        lo, hi = self.fg_bounds
        if not 0 <= lo < hi <= 1:
            raise ConfigError(f"fg bounds need 0 <= lo < hi <= 1, got {self.fg_bounds}")
        if self.interval_range[0] < 1 or self.interval_range[1] < self.interval_range[0]:
            raise ConfigError(f"bad interval range {self.interval_range}")


class Sampler:
    """Turns a corpus into an endless, seed-deterministic stream of training batches."""

    def __init__(self, samples, cfg: SamplerConfig | None = None, seed: int = 0):
        self.cfg = cfg or SamplerConfig()
        pool = []
        for s in samples:
            pool.extend(multi_scale_crop(s, self.cfg.crop) if self.cfg.crop else [s])
        pool = class_balance_filter(pool, *self.cfg.fg_bounds)
        if not pool:
            raise SamplingError("no training samples survive the foreground-ratio filter")
        self.groups = group_by_tag(pool)
        self.rng = np.random.default_rng(seed)
        self._stream = self._weighted_stream() if self.cfg.scenario_weights else scenario_balanced_iter(self.groups, self.rng)

    def _weighted_stream(self):
        names = sorted(self.groups)
        w = np.array([float(self.cfg.scenario_weights.get(n, 0.0)) for n in names])
        if w.sum() <= 0:
            raise ConfigError("scenario weights must give some scenario positive weight")
        p = w / w.sum()
        while True:
            g = self.groups[names[int(self.rng.choice(len(names), p=p))]]
            yield g[int(self.rng.integers(len(g)))]

    def draw(self) -> ClipSample:
        return augment(next(self._stream), self.cfg.augment, self.rng)

    def batch(self, size: int, static_synthesis: bool):
        """(clips (B,3,L,H,W), masks (B,H,W)); with static synthesis the second half mirrors the first."""
        if static_synthesis:
            if size % 2:
                raise ConfigError(f"static synthesis needs an even batch size, got {size}")
            native = [self.draw() for _ in range(size // 2)]
            items = native + [synthesize_static(s) for s in native]
        else:
            items = [self.draw() for _ in range(size)]
        return (np.concatenate([s.clip for s in items], axis=0),
                np.stack([s.mask for s in items]))


# --- RCCLIP1 files and manifests ---------------------------------------------

def clip_to_bytes(sample: ClipSample) -> bytes:
    _, c, L, h, w = sample.clip.shape
    tag = sample.tag.encode("utf-8")
    return b"".join([
        CLIP_MAGIC,
        struct.pack("<4I", L, h, w, c),
        np.ascontiguousarray(sample.clip[0].transpose(1, 2, 3, 0), dtype="<f4").tobytes(),
        np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes(),
        struct.pack("<I", len(tag)),
        tag,
    ])


def clip_from_bytes(data: bytes) -> ClipSample:
    f = io.BytesIO(data)

    def take(n, what):
        pos = f.tell()
        buf = f.read(n)
        if len(buf) != n:
            raise TruncatedError(f"truncated clip while reading {what}", pos)
        return buf

    magic = take(len(CLIP_MAGIC), "magic")
    if magic != CLIP_MAGIC:
        raise MagicError(f"not an RCCLIP1 file (magic {magic!r})", 0)
    L, h, w, c = struct.unpack("<4I", take(16, "header"))
    if min(L, h, w, c) < 1:
        raise FormatError(f"zero dimension in header L={L} H={h} W={w} C={c}", len(CLIP_MAGIC))
    n = L * h * w * c
    frames = np.frombuffer(take(4 * n, "frames"), dtype="<f4").astype(np.float32).reshape(L, h, w, c)
    pos = f.tell()
    mask = np.frombuffer(take(h * w, "mask"), dtype=np.uint8).reshape(h, w).copy()
    if mask.max() > 1:
        raise FormatError("mask bytes must be 0 or 1", pos)
    (tl,) = struct.unpack("<I", take(4, "tag length"))
    pos = f.tell()
    try:
        tag = take(tl, "tag").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("scenario tag is not UTF-8", pos) from None
    if f.read(1):
        raise FormatError("trailing bytes after tag", f.tell() - 1)
    return ClipSample(np.ascontiguousarray(frames.transpose(3, 0, 1, 2))[None], mask, tag)


def save_clip(path, sample: ClipSample) -> None:
    Path(path).write_bytes(clip_to_bytes(sample))


def load_clip(path) -> ClipSample:
    return clip_from_bytes(Path(path).read_bytes())


MANIFEST_NAME = "manifest.txt"


def read_manifest(path) -> list[Path]:
    """Clip paths listed in a manifest, resolved against its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    root = path.parent
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(root / line)
    return out


def write_corpus(directory, samples) -> Path:
    """Write ``clips/NNNNN.rcclip`` files plus a manifest; returns the manifest path."""
    d = Path(directory)
    (d / "clips").mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(samples))))
    names = []
    for i, s in enumerate(samples):
        name = f"clips/{i:0{width}d}.rcclip"
        save_clip(d / name, s)
        names.append(name)
    manifest = d / MANIFEST_NAME
    manifest.write_text("# RCCLIP1 corpus\n" + "".join(n + "\n" for n in names), encoding="utf-8")
    return manifest


def load_corpus(path):
    """Returns (samples, failures) where failures lists (path, error) for unreadable clips."""
    samples, failures = [], []
    for p in read_manifest(path):
        try:
            samples.append(load_clip(p))
        except (OSError, FormatError, ShapeError) as e:
            log.warning("skipping unreadable clip %s: %s", p, e)
            failures.append((p, e))
    return samples, failures


def fg_histogram(samples, bins: int = 10) -> list[int]:
    counts = [0] * bins
    for s in samples:
        counts[min(bins - 1, int(math.floor(s.fg_ratio * bins)))] += 1
    return counts
