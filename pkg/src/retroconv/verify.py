"""Gradient-check suite: one small graph per registered op kind plus a full model."""
from __future__ import annotations

import numpy as np

from .autodiff import INPUT, OPS, GradCheckReport, OpGraph, grad_check
from .network import ModelConfig, build_model

# small 3-stage model, every op kind appears in it
GRADCHECK_MODEL = ModelConfig(backbone_widths=(3, 4, 4), arpp_dilations=(1, 2), change_widths=(4, 4, 4))


def op_case(op: str, rng: np.random.Generator):
    """(graph, input) exercising ``op`` in float64; parameterised ops get random weights and biases."""
    g = OpGraph()
    shape = (2, 2, 3, 6, 6)
    if op == "conv3d":
        g.add_param("w", rng.standard_normal((3, 2, 2, 3, 3)))
        g.add_param("b", rng.standard_normal(3))
        g.add("n", op, INPUT, ("w", "b"), padding=(1, 1), t_pad=1)
    elif op == "retro_conv":
        g.add_param("w", rng.standard_normal((3, 2, 2, 3, 3)))
        g.add_param("b", rng.standard_normal(3))
        g.add("n", op, INPUT, ("w", "b"), dilation=2)
    elif op == "deconv2x2":
        shape = (2, 2, 1, 3, 4)
        g.add_param("w", rng.standard_normal((3, 2, 2, 2)))
        g.add_param("b", rng.standard_normal(3))
        g.add("n", op, INPUT, ("w", "b"))
    elif op == "concat_channels":
        g.add_param("w", rng.standard_normal((2, 2, 1, 1, 1)))
        g.add_param("b", None)
        g.add("a", "conv3d", INPUT, ("w", "b"))
        g.add("n", op, ("a", INPUT))
    else:
        g.add("n", op, INPUT)
    return g, rng.standard_normal(shape)


def run_gradcheck(fd_dtype=np.float64, epsilon: float = 1e-5, tolerance: float = 1e-4, seed: int = 0,
                  model_cfg: ModelConfig | None = None) -> list[tuple[str, GradCheckReport]]:
    """Reports for each registered op kind (sorted by name), then for the full model."""
    rng = np.random.default_rng(seed)
    out = []
    for op in sorted(OPS):
        g, x = op_case(op, rng)
        out.append((op, grad_check(g, x, epsilon, tolerance, samples=50, seed=seed, fd_dtype=fd_dtype)))
    model = build_model(model_cfg or GRADCHECK_MODEL, seed)
    # zero biases leave dead channels sitting exactly on a ReLU kink; a trained model has none
    for name, p in model.graph.trainable().items():
        if name.endswith(".b"):
            p[:] = rng.uniform(0.05, 0.2, p.shape)
    x = rng.random((1, 3, 3, 8, 8))
    out.append(("model", grad_check(model.graph, x, epsilon, tolerance, samples=50, seed=seed, fd_dtype=fd_dtype)))
    return out


def summary_lines(results) -> list[str]:
    lines = []
    for name, rep in results:
        verdict = "PASS" if rep.passed else "FAIL"
        kind = "model" if name == "model" else "op"
        lines.append(f"{kind} {name} max_rel {rep.max_rel:.3e} tensors {len(rep.entries)} {verdict}")
    return lines
