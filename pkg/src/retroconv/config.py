"""Run configuration as INI text: [model], [data], [scene.<name>], [train], [loss], [eval]."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import AugmentConfig, CropSpec, SamplerConfig, ScenarioConfig
from .errors import ConfigError
from .network import ModelConfig
from .train import LossConfig, OptimConfig


@dataclass
class DataConfig:
    length: int = 4
    canvas: tuple[int, int] = (64, 64)
    interval_range: tuple[int, int] = (1, 2)
    fg_bounds: tuple[float, float] = (0.05, 0.60)
    corpus_seed: int = 0
    aug_hflip: float = 0.5
    aug_vflip: float = 0.5
    aug_contrast: tuple[float, float] | None = (0.8, 1.2)
    aug_brightness: tuple[float, float] | None = (-0.1, 0.1)
    aug_noise_sigma: float = 0.01
    crop_scales: tuple[float, ...] | None = None   # None disables cropping
    crop_size: tuple[int, int] = (64, 64)
    crop_stride: tuple[int, int] = (32, 32)


@dataclass
class TrainConfig:
    seed: int = 0
    static_synthesis: bool = True
    log_every: int = 50


@dataclass
class EvalConfig:
    scales: tuple[float, ...] = (1.0,)
    threshold: float = 0.5
    workers: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scenarios: list[ScenarioConfig] = field(default_factory=lambda: [ScenarioConfig()])
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sampler_config(self) -> SamplerConfig:
        d = self.data
        aug = AugmentConfig(d.aug_hflip, d.aug_vflip, d.aug_contrast, d.aug_brightness, d.aug_noise_sigma)
        crop = CropSpec(d.crop_scales, d.crop_size, d.crop_stride) if d.crop_scales else None
        return SamplerConfig(d.fg_bounds, d.interval_range, {}, aug, crop)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return f"{v:g}" if isinstance(v, float) else str(v)


def _parse(raw: str, default, name: str):
    raw = raw.strip()
    try:
        if raw.lower() == "none" and (default is None or isinstance(default, tuple)):
            return None
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple) or default is None:
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            kinds = {type(x) for x in default} if default else {float}
            cast = int if kinds == {int} else float
            return tuple(cast(p) for p in parts)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def _section(cls, items: dict, where: str, **fixed):
    defaults = cls(**fixed) if fixed else cls()
    names = {f.name for f in fields(cls)}
    kwargs = dict(fixed)
    for key, raw in items.items():
        if key not in names:
            raise ConfigError(f"[{where}] unknown key {key!r}")
        kwargs[key] = _parse(raw, getattr(defaults, key), f"{where}.{key}")
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from None
    known = {"model", "data", "train", "loss", "eval"}
    for s in cp.sections():
        if s not in known and not s.startswith("scene."):
            raise ConfigError(f"unknown section [{s}]")
    get = lambda s: dict(cp[s]) if cp.has_section(s) else {}  # noqa: E731
    model = ModelConfig.from_mapping(get("model"))
    model.validate()
    scenarios = [_section(ScenarioConfig, dict(cp[s]), s, name=s[len("scene."):])
                 for s in cp.sections() if s.startswith("scene.")]
    train_items = get("train")
    optim_keys = {f.name for f in fields(OptimConfig)}
    optim = _section(OptimConfig, {k: v for k, v in train_items.items() if k in optim_keys}, "train")
    trn = _section(TrainConfig, {k: v for k, v in train_items.items() if k not in optim_keys}, "train")
    cfg = RunConfig(model, _section(DataConfig, get("data"), "data"), scenarios or [ScenarioConfig()],
                    optim, trn, _section(LossConfig, get("loss"), "loss"), _section(EvalConfig, get("eval"), "eval"))
    cfg.sampler_config()  # validates bounds
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def to_ini(cfg: RunConfig) -> str:
    def block(name, obj, skip=()):
        rows = [f"[{name}]"] + [f"{f.name} = {_fmt(getattr(obj, f.name))}" for f in fields(obj) if f.name not in skip]
        return "\n".join(rows)
    parts = [block("model", cfg.model), block("data", cfg.data)]
    parts += [block(f"scene.{s.name}", s, skip=("name",)) for s in cfg.scenarios]
    train = block("train", cfg.optim) + "\n" + "\n".join(block("x", cfg.train).splitlines()[1:])
    parts += [train, block("loss", cfg.loss), block("eval", cfg.eval)]
    return "\n\n".join(parts) + "\n"
