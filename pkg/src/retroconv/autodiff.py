"""Reverse-mode differentiation over a static operator graph.

A graph is a topologically ordered list of :class:`Node` objects. Each node
names an operator from :data:`OPS`, the nodes it reads, and the parameters it
owns. ``forward`` records a tape of per-node caches; ``backward`` walks the
tape in reverse and returns gradients for every parameter and the input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import ops
from .errors import GraphError, RetroConvError, ShapeError, StateError
from .tensor import check_tensor5, concat_channels

INPUT = "input"


class OpDef(NamedTuple):
    forward: Callable   # (inputs, params, **attrs) -> (out, cache)
    backward: Callable  # (gout, cache, **attrs) -> (input grads, param grads)


OPS: dict[str, OpDef] = {}


def register(name: str, forward: Callable, backward: Callable) -> None:
    OPS[name] = OpDef(forward, backward)


def _conv_fwd(inputs, params, stride=(1, 1), padding=(0, 0), t_pad=0):
    w, b = params
    return ops.conv3d_forward(inputs[0], w, b, stride, padding, 1, t_pad)


def _conv_bwd(g, cache, **_):
    gx, gw, gb = ops.conv3d_backward(g, cache)
    return [gx], [gw, gb]


def _retro_fwd(inputs, params, dilation=1):
    w, b = params
    return ops.retro_forward(inputs[0], w, b, dilation)


def _retro_bwd(g, cache, **_):
    gx, gw, gb = ops.retro_backward(g, cache)
    return [gx], [gw, gb]


def _deconv_fwd(inputs, params):
    w, b = params
    return ops.deconv2x2_forward(inputs[0], w, b)


def _deconv_bwd(g, cache):
    gx, gw, gb = ops.deconv2x2_backward(g, cache)
    return [gx], [gw, gb]


def _concat_fwd(inputs, params):
    a, b = inputs
    return concat_channels(a, b), a.shape[1]


def _unary(fwd, bwd):
    return (lambda inputs, params: fwd(inputs[0]),
            lambda g, cache: ([bwd(g, cache)], []))


register("identity", lambda inputs, params: (inputs[0], None), lambda g, cache: ([g], []))
register("conv3d", _conv_fwd, _conv_bwd)
register("retro_conv", _retro_fwd, _retro_bwd)
register("deconv2x2", _deconv_fwd, _deconv_bwd)
register("temporal_avg_pool", *_unary(ops.temporal_avg_pool_forward, ops.temporal_avg_pool_backward))
register("relu", *_unary(ops.relu_forward, ops.relu_backward))
register("sigmoid", *_unary(ops.sigmoid_forward, ops.sigmoid_backward))
register("maxpool2", *_unary(ops.maxpool2_forward, ops.maxpool2_backward))
register("concat_channels", _concat_fwd, lambda g, c: ([g[:, :c], g[:, c:]], []))


@dataclass
class Node:
    name: str
    op: str
    inputs: tuple[str, ...]
    params: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)


@dataclass
class GradStore:
    params: dict[str, np.ndarray]
    input: np.ndarray | None = None

    def __getitem__(self, name):
        return self.params[name]


class OpGraph:
    """A static DAG of operators with a shared parameter store.

    ``params`` maps parameter names to arrays; ``None`` entries are allowed
    for absent biases and are skipped by the optimiser and gradient checks.
    """

    def __init__(self, nodes=(), params=None, input_channels: int | None = None):
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = dict(params or {})
        self.input_channels = input_channels
        self._tape = None
        for n in nodes:
            self._append(n)

    def _append(self, node: Node):
        known = {INPUT} | {n.name for n in self.nodes}
        if node.name in known:
            raise GraphError(f"duplicate node name {node.name!r}")
        if node.op not in OPS:
            raise GraphError(f"node {node.name!r}: unknown op {node.op!r}")
        for i in node.inputs:
            if i not in known:
                raise GraphError(f"node {node.name!r}: input {i!r} is not defined before it")
        for p in node.params:
            if p not in self.params:
                raise GraphError(f"node {node.name!r}: parameter {p!r} does not exist")
        self.nodes.append(node)

    def add(self, name, op, inputs, params=(), **attrs) -> str:
        if isinstance(inputs, str):
            inputs = (inputs,)
        self._append(Node(name, op, tuple(inputs), tuple(params), attrs))
        return name

    def add_param(self, name: str, value) -> str:
        if name in self.params:
            raise GraphError(f"duplicate parameter {name!r}")
        self.params[name] = value
        return name

    @property
    def output(self) -> str:
        return self.nodes[-1].name if self.nodes else INPUT

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if v is not None}

    def astype(self, dtype) -> "OpGraph":
        """Copy of the graph with every parameter cast to ``dtype``."""
        params = {k: None if v is None else v.astype(dtype) for k, v in self.params.items()}
        return OpGraph(self.nodes, params, self.input_channels)

    # --- execution -------------------------------------------------------

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        """Evaluate the graph. With ``cache=False`` nothing is stored, so concurrent calls are safe."""
        try:
            check_tensor5(x, "graph input")
        except RetroConvError as e:
            raise GraphError(f"node {INPUT!r}: {e}") from e
        if self.input_channels is not None and x.shape[1] != self.input_channels:
            raise GraphError(f"node {INPUT!r}: expected {self.input_channels} input channels, got {x.shape[1]}")
        values = {INPUT: x}
        caches = {}
        for node in self.nodes:
            opdef = OPS[node.op]
            inputs = [values[i] for i in node.inputs]
            params = [self.params[p] for p in node.params]
            try:
                out, c = opdef.forward(inputs, params, **node.attrs)
            except (RetroConvError, ValueError) as e:
                raise GraphError(f"node {node.name!r} ({node.op}): {e}") from e
            values[node.name] = out
            if cache:
                caches[node.name] = c
        if cache:
            self._tape = caches
        return values[self.output]

    def backward(self, loss_grad: np.ndarray) -> GradStore:
        if self._tape is None:
            raise StateError("backward called before forward")
        grads: dict[str, np.ndarray] = {self.output: loss_grad}
        pgrads = {k: np.zeros_like(v) for k, v in self.trainable().items()}
        for node in reversed(self.nodes):
            g = grads.pop(node.name, None)
            if g is None:
                continue
            gin, gpar = OPS[node.op].backward(g, self._tape[node.name], **node.attrs)
            for pname, gp in zip(node.params, gpar):
                if gp is not None and self.params[pname] is not None:
                    pgrads[pname] += gp
            for iname, gi in zip(node.inputs, gin):
                if iname in grads:
                    grads[iname] = grads[iname] + gi
                else:
                    grads[iname] = gi
        return GradStore(pgrads, grads.get(INPUT))

    def kink_signature(self):
        """Activation patterns of every non-smooth node on the last taped forward."""
        sig = []
        for node in self.nodes:
            c = self._tape[node.name]
            if node.op == "relu":
                sig.append(c)
            elif node.op == "maxpool2":
                sig.append(c[0])
        return sig


def forward(g: OpGraph, x: np.ndarray) -> np.ndarray:
    return g.forward(x)


def backward(g: OpGraph, loss_grad: np.ndarray) -> GradStore:
    return g.backward(loss_grad)


# --- finite-difference verification ---------------------------------------

@dataclass
class TensorCheck:
    name: str
    max_rel: float
    mean_rel: float
    checked: int
    skipped: int


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[TensorCheck]

    @property
    def max_rel(self) -> float:
        return max((e.max_rel for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.checked > 0 and e.max_rel <= self.tolerance for e in self.entries)

    def lines(self, prefix: str = "") -> list[str]:
        out = []
        for e in self.entries:
            verdict = "PASS" if e.checked > 0 and e.max_rel <= self.tolerance else "FAIL"
            out.append(f"{prefix}{e.name} max_rel {e.max_rel:.3e} mean_rel {e.mean_rel:.3e} "
                       f"checked {e.checked} skipped {e.skipped} {verdict}")
        return out

    def __str__(self):
        return "\n".join(self.lines())


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def grad_check(g: OpGraph, x: np.ndarray, epsilon: float = 1e-5, tolerance: float = 1e-4,
               samples: int = 50, seed: int = 0, check_input: bool = True,
               fd_dtype=np.float64) -> GradCheckReport:
    """Compare reverse-mode gradients of ``mean(output)`` with central differences.

    Analytic gradients are computed in float64 on a copy of the graph. The
    perturbed forwards run in ``fd_dtype``; pass ``np.longdouble`` to push FD
    roundoff below float64 analytic error (needed for exactness checks on
    linear maps). Coordinates whose perturbation flips any ReLU gate or
    max-pool choice are non-differentiable there and skipped.
    """
    rng = np.random.default_rng(seed)
    g64 = g.astype(np.float64)
    out = g64.forward(np.array(x, dtype=np.float64))
    grads = g64.backward(np.full(out.shape, 1.0 / out.size))

    g = g.astype(fd_dtype)
    x = np.array(x, dtype=fd_dtype)
    g.forward(x)
    base_sig = g.kink_signature()

    targets = [(name, arr, grads.params[name]) for name, arr in g.trainable().items()]
    if check_input:
        targets.append((INPUT, x, grads.input))

    def f():
        y = g.forward(x, cache=True).copy()
        return y, g.kink_signature()

    entries = []
    for name, arr, analytic in targets:
        flat = arr.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        errs, skipped = [], 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            yp, sp = f()
            flat[i] = orig - epsilon
            ym, sm = f()
            flat[i] = orig
            if not (_same_pattern(sp, base_sig) and _same_pattern(sm, base_sig)):
                skipped += 1
                continue
            # difference before reducing: same quantity as mean(yp) - mean(ym), less cancellation
            numeric = float(np.mean(yp - ym) / (2 * epsilon))
            errs.append(relative_error(float(analytic.reshape(-1)[i]), numeric))
        entries.append(TensorCheck(name, max(errs, default=0.0), float(np.mean(errs)) if errs else 0.0,
                                   len(errs), skipped))
    return GradCheckReport(tolerance, entries)
