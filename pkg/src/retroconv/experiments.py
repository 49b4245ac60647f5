"""Desk-scale training experiments shared by ``scripts/`` and the acceptance suite.

Every run is described by a :class:`ToyRun`. Trained checkpoints and their
metrics are cached under a key that hashes the run description together with
the package source, so an edit to any numeric module invalidates old results.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Sampler, SamplerConfig, ScenarioConfig, synth_corpus, synthesize_static
from .network import Model, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .train import LossConfig, OptimConfig, evaluate, predict, prf, train

SRC_DIR = Path(__file__).resolve().parent
# modules whose code determines a trained model and its metrics
NUMERIC_MODULES = ("tensor.py", "ops.py", "autodiff.py", "network.py", "data.py", "train.py")
DEFAULT_CACHE = Path(os.environ.get("RETROCONV_CACHE", Path.cwd() / ".cache" / "experiments"))

TOY_SCENARIO = ScenarioConfig(name="dynamic-sinusoid", background="dynamic-sinusoid")
TOY_LENGTH = 4
TOY_CANVAS = (64, 64)
TOY_INTERVALS = (1, 2)


def toy_corpus(n_train: int = 400, n_test: int = 100, seed: int = 0):
    """Moving shapes over dynamic-sinusoid backgrounds, 64x64, L=4; disjoint seeds for the two splits."""
    def split(n, s):
        sc = ScenarioConfig(**{**asdict(TOY_SCENARIO), "count": n})
        return synth_corpus([sc], TOY_LENGTH, TOY_CANVAS, TOY_INTERVALS, seed=s)
    return split(n_train, 2 * seed + 1), split(n_test, 2 * seed + 2)


def arm_config(change_module: str) -> ModelConfig:
    if change_module == "arpp":
        return ModelConfig()
    return ModelConfig(change_module=change_module, arpp_dilations=())


@dataclass
class ToyRun:
    change_module: str = "arpp"
    seed: int = 0
    static_synthesis: bool = True
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    corpus_seed: int = 0
    n_train: int = 400
    n_test: int = 100

    def describe(self) -> dict:
        return asdict(self)

    def key(self) -> str:
        h = hashlib.sha256(json.dumps(self.describe(), sort_keys=True).encode())
        for p in sorted(SRC_DIR / m for m in NUMERIC_MODULES):
            h.update(p.name.encode())
            h.update(p.read_bytes())
        return h.hexdigest()[:16]

    def name(self) -> str:
        tag = "static" if self.static_synthesis else "nostatic"
        return f"{self.change_module}-s{self.seed}-{tag}-{self.optim.max_iters}it"


@dataclass
class RunResult:
    run: ToyRun
    model: Model
    f_measure: float
    precision: float
    recall: float
    static_mean_prob: float
    static_fg_rate: float
    train_seconds: float
    final_loss: float
    cached: bool = False

    def line(self) -> str:
        return (f"{self.run.name():<28} F {self.f_measure:.4f} P {self.precision:.4f} R {self.recall:.4f} "
                f"static_prob {self.static_mean_prob:.4f} static_fg {self.static_fg_rate:.4f} "
                f"train_s {self.train_seconds:.0f}")


def static_response(model: Model, samples, count: int = 50, threshold: float = 0.5):
    """Mean foreground probability and foreground-pixel rate on synthesized static clips."""
    statics = [synthesize_static(s) for s in samples[:count]]
    probs = predict(model, statics)
    return float(np.mean(probs)), float(np.mean([(p >= threshold).mean() for p in probs]))


def execute(run: ToyRun, emit=None) -> RunResult:
    train_set, test_set = toy_corpus(run.n_train, run.n_test, run.corpus_seed)
    model = build_model(arm_config(run.change_module), run.seed)
    sampler = Sampler(train_set, SamplerConfig(), seed=run.seed)
    t0 = time.perf_counter()
    res = train(model, sampler, run.loss, run.optim, run.static_synthesis, log_every=100, emit=emit)
    seconds = time.perf_counter() - t0
    return _measure(run, res.model, test_set, seconds, float(np.mean(res.losses[-50:])) if res.losses else float("nan"))


def _measure(run, model, test_set, seconds, final_loss, cached=False) -> RunResult:
    p, r, f = prf(evaluate(model, test_set).overall)
    prob, rate = static_response(model, test_set)
    return RunResult(run, model, f, p, r, prob, rate, seconds, final_loss, cached)


def run_cached(run: ToyRun, cache_dir=None, fresh: bool = False, emit=None) -> RunResult:
    """Train (or reuse a checkpoint trained by the identical code and settings) and measure."""
    cache = Path(cache_dir or DEFAULT_CACHE)
    stem = cache / f"{run.name()}-{run.key()}"
    ckpt, meta = stem.with_suffix(".rcnet"), stem.with_suffix(".json")
    fresh = fresh or os.environ.get("RETROCONV_FRESH") == "1"
    if not fresh and ckpt.exists() and meta.exists():
        info = json.loads(meta.read_text())
        _, test_set = toy_corpus(run.n_train, run.n_test, run.corpus_seed)
        return _measure(run, load_checkpoint(ckpt), test_set, info["train_seconds"], info["final_loss"], cached=True)
    result = execute(run, emit)
    cache.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, ckpt)
    meta.write_text(json.dumps({"run": run.describe(), "train_seconds": result.train_seconds,
                                "final_loss": result.final_loss, "f_measure": result.f_measure,
                                "static_mean_prob": result.static_mean_prob,
                                "static_fg_rate": result.static_fg_rate}, indent=2) + "\n")
    return result
