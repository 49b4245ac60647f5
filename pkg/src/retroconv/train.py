"""Weighted cross-entropy, momentum SGD, the training loop and pixel metrics."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ClipSample, Sampler
from .errors import ConfigError, NumericAbort, ShapeError
from .network import Model, infer_multiscale

log = logging.getLogger(__name__)


# --- loss --------------------------------------------------------------------

@dataclass
class LossConfig:
    alpha: float = 4.0      # weight on the foreground term
    epsilon: float = 1e-7   # probability clamp

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.epsilon < 0.5:
            raise ConfigError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")


def weighted_bce(pred: np.ndarray, target: np.ndarray, cfg: LossConfig | None = None):
    """Loss ``-mean(a*y*log p + (1-y)*log(1-p))`` and its gradient w.r.t. ``pred``.

    ``pred`` is (N, 1, 1, H, W) or anything with the same element count
    layout as ``target`` (N, H, W). Probabilities are clamped to
    [eps, 1 - eps]; the gradient is evaluated at the clamped value.
    """
    cfg = cfg or LossConfig()
    if pred.size != target.size or pred.shape[-2:] != target.shape[-2:] or pred.shape[0] != target.shape[0]:
        raise ShapeError(f"prediction {pred.shape} does not match target {target.shape}")
    p = np.clip(pred.astype(np.float64).reshape(target.shape), cfg.epsilon, 1 - cfg.epsilon)
    y = target.astype(np.float64)
    n = y.size
    loss = -float(np.mean(cfg.alpha * y * np.log(p) + (1 - y) * np.log1p(-p)))
    grad = -(cfg.alpha * y / p - (1 - y) / (1 - p)) / n
    return loss, grad.reshape(pred.shape).astype(pred.dtype)


# --- optimiser ---------------------------------------------------------------

@dataclass
class OptimConfig:
    base_lr: float = 0.02
    lr_decay_factor: float = 0.1
    decay_every_iters: int = 1500
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    max_iters: int = 2000

    def __post_init__(self):
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr, momentum and weight_decay must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.decay_every_iters < 1 or self.batch_size < 1 or self.max_iters < 0:
            raise ConfigError("decay_every_iters and batch_size must be >= 1, max_iters >= 0")

    def lr_at(self, iteration: int) -> float:
        return self.base_lr * self.lr_decay_factor ** (iteration // self.decay_every_iters)


@dataclass
class TrainState:
    params: dict[str, np.ndarray]                  # updated in place
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0

    def __post_init__(self):
        for k, v in self.params.items():
            if v is not None and k not in self.velocity:
                self.velocity[k] = np.zeros_like(v)


def sgd_step(state: TrainState, grads, cfg: OptimConfig) -> TrainState:
    """``v = mu*v + g + wd*p``; ``p -= lr(iter)*v``; then the iteration counter advances."""
    gp = grads.params if hasattr(grads, "params") else grads
    for name, g in gp.items():
        if not np.isfinite(g).all():
            bad = np.abs(g[np.isfinite(g)]).max(initial=0.0)
            raise NumericAbort(f"non-finite gradient for {name!r} at iteration {state.iteration} "
                               f"(max finite |g| = {bad:.3e}, {int((~np.isfinite(g)).sum())} bad entries)")
    lr = cfg.lr_at(state.iteration)
    for name, p in state.params.items():
        if p is None:
            continue
        g = gp[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        v = state.velocity[name]
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            v += cfg.weight_decay * p
        p -= (lr * v).astype(p.dtype)
    state.iteration += 1
    return state


# --- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    log_lines: list[str]
    state: TrainState


def train(model: Model, sampler: Sampler, loss_cfg: LossConfig, optim_cfg: OptimConfig,
          static_synthesis: bool = True, log_every: int = 50, emit=None) -> TrainResult:
    """SGD on a copy of ``model``. ``emit`` receives each log line as it is produced."""
    model = model.copy()
    g = model.graph
    state = TrainState(g.params)
    losses, lines = [], []
    for it in range(1, optim_cfg.max_iters + 1):
        clips, masks = sampler.batch(optim_cfg.batch_size, static_synthesis)
        pred = g.forward(clips)
        loss, grad = weighted_bce(pred, masks, loss_cfg)
        if not np.isfinite(loss):
            raise NumericAbort(f"non-finite loss at iteration {it}")
        lr = optim_cfg.lr_at(state.iteration)
        sgd_step(state, g.backward(grad), optim_cfg)
        losses.append(loss)
        if it == 1 or it % log_every == 0 or it == optim_cfg.max_iters:
            line = f"iter {it} lr {lr:.6g} loss {loss:.6f}"
            lines.append(line)
            if emit:
                emit(line)
    return TrainResult(model, losses, lines, state)


# --- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class EvalCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "EvalCounts") -> "EvalCounts":
        return EvalCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, mask: np.ndarray, threshold: float = 0.5) -> EvalCounts:
    """Pixel counts with ``pred >= threshold`` as the positive call."""
    p = np.asarray(pred).reshape(-1) >= threshold
    if p.size != mask.size:
        raise ShapeError(f"prediction has {p.size} pixels, mask {mask.size}")
    y = np.asarray(mask).reshape(-1).astype(bool)
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    return EvalCounts(tp, fp, fn, y.size - tp - fp - fn)


def _ratio(a, b):
    return a / b if b else 0.0


def prf(c: EvalCounts) -> tuple[float, float, float]:
    """Precision, recall, F-measure; every 0/0 is taken as 0."""
    p = _ratio(c.tp, c.tp + c.fp)
    r = _ratio(c.tp, c.tp + c.fn)
    return p, r, _ratio(2 * p * r, p + r)


@dataclass
class EvalReport:
    scenarios: dict[str, EvalCounts]
    scales: tuple[float, ...]
    threshold: float = 0.5
    skipped: int = 0

    @property
    def overall(self) -> EvalCounts:
        total = EvalCounts()
        for c in self.scenarios.values():
            total = total + c
        return total

    @property
    def f_measure(self) -> float:
        return prf(self.overall)[2]

    def header(self) -> list[str]:
        scales = ",".join(f"{s:g}" for s in self.scales)
        return [f"# scales {scales} threshold {self.threshold:g} skipped {self.skipped}",
                "# aggregation: pixel counts pooled over clips per scenario; Average pools all counts; 0/0 := 0"]

    def render(self) -> str:
        rows = self.header() + [f"{'scenario':<28} {'P':>7} {'R':>7} {'F':>7}"]
        for name in sorted(self.scenarios):
            p, r, f = prf(self.scenarios[name])
            rows.append(f"{name:<28} {p:7.4f} {r:7.4f} {f:7.4f}")
        p, r, f = prf(self.overall)
        rows.append(f"{'Average':<28} {p:7.4f} {r:7.4f} {f:7.4f}")
        return "\n".join(rows)

    def to_dict(self) -> dict:
        def entry(c):
            p, r, f = prf(c)
            return {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn, "precision": p, "recall": r, "f_measure": f}
        return {"scales": list(self.scales), "threshold": self.threshold, "skipped": self.skipped,
                "aggregation": "pooled-counts",
                "scenarios": {k: entry(v) for k, v in sorted(self.scenarios.items())},
                "average": entry(self.overall)}


def predict(model: Model, samples, scales=(1.0,), workers: int = 1) -> list[np.ndarray]:
    """Probability maps (H, W) for each sample, in input order."""
    def one(s: ClipSample):
        return infer_multiscale(model, s.clip, scales)[0, 0, 0]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(one, samples))
    return [one(s) for s in samples]


def evaluate(model: Model, samples, scales=(1.0,), threshold: float = 0.5, workers: int = 1,
             skipped: int = 0) -> EvalReport:
    samples = list(samples)
    if not samples:
        raise ConfigError("evaluation corpus is empty")
    per = {}
    for s, prob in zip(samples, predict(model, samples, scales, workers)):
        per[s.tag] = per.get(s.tag, EvalCounts()) + confusion(prob, s.mask, threshold)
    return EvalReport(per, tuple(scales), threshold, skipped)
