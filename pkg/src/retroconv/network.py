"""Change-detection network assembly, inference and RCNET1 checkpoints.

Layout built by :func:`build_model`::

    input -> [stage 0 convs] -> tap 0 -> maxpool -> [stage 1 convs] -> tap 1 -> ...
    tap i -> change module i (retro / ARPP / 3D-conv pair) -> one-slice feature map
    top level -> (deconv 2x2 -> concat with level below -> 3x3 conv + ReLU) per decoder
    -> 1x1 conv -> sigmoid

With ``backbone="raw-input"`` the single tap is the RGB clip itself and there
are no decoders.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import ops
from .autodiff import INPUT, OpGraph
from .errors import (ConfigError, DimMismatchError, FormatError, MagicError, ShapeError,
                     TemporalLengthError, TruncatedError, VersionError)
from .tensor import bilinear_resize, check_tensor5, read_tensor, write_tensor

BACKBONES = ("raw-input", "simple-3layer", "stacked-k-blocks")
CHANGE_MODULES = ("conv3d-pair", "retro", "arpp")

CHECKPOINT_MAGIC = b"RCNET1"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    backbone: str = "simple-3layer"
    backbone_widths: tuple[int, ...] = (16, 32, 64)
    convs_per_stage: int = 1
    change_module: str = "arpp"
    arpp_dilations: tuple[int, ...] = (1, 3)
    change_widths: tuple[int, ...] = (16, 32, 64)
    decoder_levels: int = 2
    input_length_hint: int = 4
    in_channels: int = 3
    kernel_size: int = 3

    @property
    def stages(self) -> int:
        return 0 if self.backbone == "raw-input" else len(self.backbone_widths)

    @property
    def levels(self) -> int:
        return max(self.stages, 1)

    @property
    def spatial_multiple(self) -> int:
        return 2 ** self.stages

    def violations(self) -> list[str]:
        v = []
        if self.backbone not in BACKBONES:
            v.append(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.change_module not in CHANGE_MODULES:
            v.append(f"change_module must be one of {CHANGE_MODULES}, got {self.change_module!r}")
        if self.backbone == "simple-3layer" and (len(self.backbone_widths) != 3 or self.convs_per_stage != 1):
            v.append("simple-3layer needs exactly 3 backbone widths and convs_per_stage=1")
        if self.backbone != "raw-input" and not self.backbone_widths:
            v.append("backbone_widths must be nonempty")
        if any(w < 1 for w in self.backbone_widths) or any(w < 1 for w in self.change_widths):
            v.append("all widths must be positive")
        if self.convs_per_stage < 1:
            v.append("convs_per_stage must be >= 1")
        if len(self.change_widths) != self.levels:
            v.append(f"need one change width per tapped level ({self.levels}), got {len(self.change_widths)}")
        if self.decoder_levels != self.levels - 1:
            v.append(f"decoder_levels must be {self.levels - 1} for {self.levels} tapped level(s), got {self.decoder_levels}")
        if self.change_module == "arpp":
            if not self.arpp_dilations:
                v.append("arpp needs nonempty arpp_dilations")
            elif len(set(self.arpp_dilations)) != len(self.arpp_dilations) or min(self.arpp_dilations) < 1:
                v.append(f"arpp_dilations must be distinct positive integers, got {self.arpp_dilations}")
            else:
                m = len(self.arpp_dilations)
                v.extend(f"change width {n} not divisible by {m} branches" for n in self.change_widths if n % m)
        elif self.arpp_dilations:
            v.append("arpp_dilations must be empty unless change_module=arpp")
        if self.input_length_hint < 2:
            v.append("input_length_hint must be >= 2")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            v.append("kernel_size must be odd")
        return v

    def validate(self) -> "ModelConfig":
        v = self.violations()
        if v:
            raise ConfigError("invalid model config: " + "; ".join(v))
        return self

    # key=value round trip, shared by checkpoints and run configs
    def to_lines(self) -> list[str]:
        out = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(x) for x in val)
            out.append(f"{f.name}={val}")
        return out

    @classmethod
    def from_mapping(cls, mapping) -> "ModelConfig":
        kwargs = {}
        names = {f.name: f for f in fields(cls)}
        for key, raw in mapping.items():
            if key not in names:
                raise ConfigError(f"unknown model config key {key!r}")
            default = names[key].default
            raw = str(raw).strip()
            try:
                if isinstance(default, tuple):
                    kwargs[key] = tuple(int(p) for p in raw.split(",") if p.strip())
                elif isinstance(default, int):
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = raw
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**kwargs)

    @classmethod
    def from_lines(cls, lines) -> "ModelConfig":
        mapping = {}
        for line in lines:
            if line.strip():
                key, _, val = line.partition("=")
                mapping[key.strip()] = val
        return cls.from_mapping(mapping)


def default_config() -> ModelConfig:
    """Desk-scale default: 3 stages (16, 32, 64), ARPP {1, 3}, L=4."""
    return ModelConfig()


@dataclass
class Model:
    config: ModelConfig
    graph: OpGraph
    seed: int
    format_version: int = FORMAT_VERSION

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.graph.params

    def copy(self) -> "Model":
        g = OpGraph(self.graph.nodes, {k: v.copy() for k, v in self.graph.params.items()}, self.graph.input_channels)
        return Model(self.config, g, self.seed, self.format_version)


# --- construction ----------------------------------------------------------

class _Builder:
    def __init__(self, rng):
        self.g = OpGraph()
        self.rng = rng

    def conv(self, name, src, c_in, c_out, k=3, lk=1, t_pad=0, act=True):
        w = self.g.add_param(f"{name}.w", ops.glorot_uniform((c_out, c_in, lk, k, k), self.rng))
        b = self.g.add_param(f"{name}.b", np.zeros(c_out, np.float32))
        pad = ops.same_padding(k)
        out = self.g.add(name, "conv3d", src, (w, b), padding=(pad, pad), t_pad=t_pad)
        return self.g.add(f"{name}.relu", "relu", out) if act else out

    def retro(self, name, src, c_in, c_out, k, dilation):
        w = self.g.add_param(f"{name}.w", ops.glorot_uniform((c_out, c_in, 2, k, k), self.rng))
        b = self.g.add_param(f"{name}.b", np.zeros(c_out, np.float32))
        out = self.g.add(name, "retro_conv", src, (w, b), dilation=dilation)
        return self.g.add(f"{name}.relu", "relu", out)

    def retro_module(self, name, src, c_in, n, k, dilation):
        y = self.retro(f"{name}.retro", src, c_in, n, k, dilation)
        y = self.conv(f"{name}.c0", y, n, n, k)
        y = self.conv(f"{name}.c1", y, n, n, k)
        return self.g.add(f"{name}.pool", "temporal_avg_pool", y)

    def change_module(self, cfg: ModelConfig, name, src, c_in, n):
        k = cfg.kernel_size
        if cfg.change_module == "retro":
            return self.retro_module(name, src, c_in, n, k, 1)
        if cfg.change_module == "arpp":
            m = len(cfg.arpp_dilations)
            out = None
            for i, d in enumerate(cfg.arpp_dilations):
                y = self.retro_module(f"{name}.br{i}", src, c_in, n // m, k, d)
                out = y if out is None else self.g.add(f"{name}.cat{i}", "concat_channels", (out, y))
            return out
        # two cascaded 3x3x3 3D convs, temporally padded, then full-length pooling
        y = self.conv(f"{name}.c3d0", src, c_in, n, k, lk=3, t_pad=1)
        y = self.conv(f"{name}.c3d1", y, n, n, k, lk=3, t_pad=1)
        return self.g.add(f"{name}.pool", "temporal_avg_pool", y)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    cfg.validate()
    b = _Builder(np.random.default_rng(seed))
    k = cfg.kernel_size

    taps = []  # (node name, channels)
    if cfg.backbone == "raw-input":
        taps.append((INPUT, cfg.in_channels))
    else:
        src, c = INPUT, cfg.in_channels
        for s, width in enumerate(cfg.backbone_widths):
            if s > 0:
                src = b.g.add(f"bb.s{s}.pool", "maxpool2", src)
            for j in range(cfg.convs_per_stage):
                src = b.conv(f"bb.s{s}.c{j}", src, c, width, k)
                c = width
            taps.append((src, c))

    feats = [b.change_module(cfg, f"lvl{i}", node, c, cfg.change_widths[i]) for i, (node, c) in enumerate(taps)]

    top, c_top = feats[-1], cfg.change_widths[-1]
    for i in range(len(feats) - 2, -1, -1):
        n = cfg.change_widths[i]
        w = b.g.add_param(f"dec{i}.up.w", ops.glorot_uniform((n, c_top, 2, 2), b.rng))
        bias = b.g.add_param(f"dec{i}.up.b", np.zeros(n, np.float32))
        up = b.g.add(f"dec{i}.up", "deconv2x2", top, (w, bias))
        cat = b.g.add(f"dec{i}.cat", "concat_channels", (up, feats[i]))
        top, c_top = b.conv(f"dec{i}.conv", cat, 2 * n, n, k), n

    logits = b.conv("head", top, c_top, 1, k=1, act=False)
    b.g.add("prob", "sigmoid", logits)
    b.g.input_channels = cfg.in_channels
    return Model(cfg, b.g, seed)


def decoder_node_count(model: Model) -> int:
    return sum(1 for n in model.graph.nodes if n.name.startswith("dec"))


# --- inference ---------------------------------------------------------------

def check_clip_for(model: Model, clip: np.ndarray) -> None:
    check_tensor5(clip, "clip")
    if clip.shape[2] < 2:
        raise TemporalLengthError(f"clips need at least 2 frames, got L={clip.shape[2]}")
    m = model.config.spatial_multiple
    if clip.shape[3] % m or clip.shape[4] % m:
        raise ShapeError(f"spatial dims {clip.shape[3]}x{clip.shape[4]} must be divisible by {m}")


def infer(model: Model, clip: np.ndarray) -> np.ndarray:
    """Per-pixel change probability, shape (N, 1, 1, H, W)."""
    check_clip_for(model, clip)
    return model.graph.forward(clip.astype(np.float32, copy=False), cache=False)


def scaled_size(h: int, w: int, scale: float) -> tuple[int, int]:
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def infer_multiscale(model: Model, clip: np.ndarray, scales) -> np.ndarray:
    """Mean of per-scale probability maps, each resized back to the native size."""
    scales = list(scales)
    if not scales:
        raise ConfigError("infer_multiscale needs at least one scale")
    h, w = clip.shape[3:]
    total = None
    for s in scales:
        nh, nw = scaled_size(h, w, s)
        prob = infer(model, bilinear_resize(clip, nh, nw))
        prob = bilinear_resize(prob, h, w)
        total = prob if total is None else total + prob
    return total / len(scales)


# --- checkpoints -------------------------------------------------------------

def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HQ", model.format_version, model.seed))
    cfg_text = "\n".join(model.config.to_lines()).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_text)))
    buf.write(cfg_text)
    params = model.graph.trainable()
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def _take(f, n, what):
    start = f.tell()
    data = f.read(n)
    if len(data) != n:
        raise TruncatedError(f"truncated checkpoint while reading {what}", start)
    return data


def model_from_bytes(data: bytes) -> Model:
    f = io.BytesIO(data)
    magic = _take(f, len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise MagicError(f"not an RCNET1 checkpoint (magic {magic!r})", 0)
    version, seed = struct.unpack("<HQ", _take(f, 10, "header"))
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}", 6)
    (n,) = struct.unpack("<I", _take(f, 4, "config length"))
    try:
        cfg = ModelConfig.from_lines(_take(f, n, "config").decode("utf-8").splitlines())
        model = build_model(cfg, seed)
    except (ConfigError, UnicodeDecodeError) as e:
        raise FormatError(f"bad config block: {e}", 20) from None
    expected = model.graph.trainable()
    (count,) = struct.unpack("<I", _take(f, 4, "tensor count"))
    if count != len(expected):
        raise DimMismatchError(f"checkpoint has {count} tensors, config implies {len(expected)}", f.tell() - 4)
    loaded = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", _take(f, 2, "name length"))
        name = _take(f, ln, "tensor name").decode("utf-8")
        pos = f.tell()
        arr = read_tensor(f)
        if name not in expected:
            raise DimMismatchError(f"unexpected tensor {name!r}", pos)
        want = expected[name].shape
        if arr.shape[5 - len(want):] != want or any(d != 1 for d in arr.shape[:5 - len(want)]):
            raise DimMismatchError(f"tensor {name!r} has dims {arr.shape}, config implies {want}", pos)
        loaded[name] = arr.reshape(want)
    if f.read(1):
        raise FormatError("trailing bytes after last tensor", f.tell() - 1)
    model.graph.params.update(loaded)
    return model


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
