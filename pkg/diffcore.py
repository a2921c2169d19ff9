"""
diffcore.py  ·  Expression graphs with differentiable gradients
===============================================================

Two layers:

* tensor ops (``segment_sum`` … ``dropout``) that the graph network calls
  directly on torch tensors, and
* a tiny immutable expression-graph API (``leaf``, ``matmul``, ``silu`` …)
  whose ``gradient`` is itself an expression graph, so gradients of
  gradients come for free. Evaluation runs on torch autograd with
  ``create_graph=True``; everything is float64.
"""
from __future__ import annotations

import contextlib
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import torch

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

DTYPE = torch.float64
Shape = Tuple[int, ...]


# ────────────────────────────────────────────────────────────────────────────
# ERRORS
# ────────────────────────────────────────────────────────────────────────────
class DiffcoreError(ValueError):
    """Base class for expression-graph failures."""


class ShapeMismatch(DiffcoreError):
    pass


class UnboundLeaf(DiffcoreError):
    def __init__(self, name: str) -> None:
        super().__init__(f"leaf {name!r} has no binding")
        self.name = name


class NonScalarOutput(DiffcoreError):
    pass


class NonDifferentiableOp(DiffcoreError):
    pass


# ────────────────────────────────────────────────────────────────────────────
# TENSOR OPS
# ────────────────────────────────────────────────────────────────────────────
def _check_segments(x: torch.Tensor, segments: torch.Tensor, num_segments: int) -> None:
    if segments.dim() != 1 or segments.shape[0] != x.shape[0]:
        raise ShapeMismatch(
            f"segment ids of shape {tuple(segments.shape)} do not index rows of {tuple(x.shape)}"
        )
    if segments.numel() and (int(segments.min()) < 0 or int(segments.max()) >= num_segments):
        raise ShapeMismatch(f"segment ids fall outside [0, {num_segments})")


def _expand_ids(segments: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    shape = (-1,) + (1,) * (like.dim() - 1)
    return segments.view(shape).expand_as(like)


def segment_sum(x: torch.Tensor, segments: torch.Tensor, num_segments: int) -> torch.Tensor:
    _check_segments(x, segments, num_segments)
    out = x.new_zeros((num_segments,) + tuple(x.shape[1:]))
    return out.index_add(0, segments, x)


def segment_counts(segments: torch.Tensor, num_segments: int) -> torch.Tensor:
    return torch.bincount(segments, minlength=num_segments)


def segment_mean(x: torch.Tensor, segments: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Row mean per segment; empty segments give zeros."""
    total = segment_sum(x, segments, num_segments)
    counts = segment_counts(segments, num_segments).clamp(min=1).to(x.dtype)
    return total / counts.view((-1,) + (1,) * (x.dim() - 1))


def segment_max(x: torch.Tensor, segments: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Row max per segment; empty segments give zeros."""
    _check_segments(x, segments, num_segments)
    out = x.new_zeros((num_segments,) + tuple(x.shape[1:]))
    return out.scatter_reduce(0, _expand_ids(segments, x), x, reduce="amax", include_self=False)


def segment_softmax(scores: torch.Tensor, segments: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of *scores* within each segment (sums to one per non-empty segment)."""
    peak = segment_max(scores.detach(), segments, num_segments)
    shifted = torch.exp(scores - peak.index_select(0, segments))
    norm = segment_sum(shifted, segments, num_segments).index_select(0, segments)
    return shifted / norm


def dropout(
    x: torch.Tensor,
    p: float,
    generator: Optional[torch.Generator] = None,
    training: bool = True,
) -> torch.Tensor:
    """Inverted dropout with a mask drawn from *generator*; the mask is a constant."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


# ────────────────────────────────────────────────────────────────────────────
# EXPRESSION GRAPH
# ────────────────────────────────────────────────────────────────────────────
_ids = itertools.count()


@dataclass(frozen=True, eq=False)
class Node:
    """One op record. Leaves carry a ``name``; everything else is built by the helpers below."""

    op: str
    inputs: Tuple["Node", ...] = ()
    attrs: Mapping[str, Any] = field(default_factory=dict)
    uid: int = field(default_factory=lambda: next(_ids))

    @property
    def name(self) -> Optional[str]:
        return self.attrs.get("name")

    def __add__(self, other: "Node") -> "Node":
        return add(self, _lift(other))

    def __mul__(self, other: "Node") -> "Node":
        return multiply(self, _lift(other))

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f":{self.name}" if self.name else ""
        return f"Node({self.op}{label}#{self.uid})"


class ExpressionGraph:
    """Immutable DAG rooted at *output*, held in topological order."""

    def __init__(self, output: Node) -> None:
        self.output = output
        order: List[Node] = []
        seen = set()
        stack: List[Tuple[Node, bool]] = [(output, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if node.uid in seen:
                continue
            seen.add(node.uid)
            stack.append((node, True))
            for parent in reversed(node.inputs):
                if parent.uid not in seen:
                    stack.append((parent, False))
        self.nodes: Tuple[Node, ...] = tuple(order)
        names: List[str] = []
        for node in self.nodes:
            if node.op in ("leaf", "index") and node.name not in names:
                names.append(node.name)
        self.leaves: Tuple[str, ...] = tuple(names)
        self.index_leaves = frozenset(n.name for n in self.nodes if n.op == "index")
        self.shapes: Dict[int, Optional[Shape]] = {}
        for node in self.nodes:
            self.shapes[node.uid] = _static_shape(node, [self.shapes[p.uid] for p in node.inputs])

    @property
    def output_shape(self) -> Optional[Shape]:
        """Shape of the output when it follows from declared leaf shapes, else None."""
        return self.shapes[self.output.uid]

    def __len__(self) -> int:
        return len(self.nodes)

    def __repr__(self) -> str:
        return f"ExpressionGraph(nodes={len(self.nodes)}, leaves={list(self.leaves)})"


@dataclass
class BatchNormState:
    """Running statistics shared by every evaluation of one batchnorm node."""

    num_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: torch.Tensor = None  # type: ignore[assignment]
    running_var: torch.Tensor = None   # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.running_mean is None:
            self.running_mean = torch.zeros(self.num_features, dtype=DTYPE)
        if self.running_var is None:
            self.running_var = torch.ones(self.num_features, dtype=DTYPE)


# ---- node builders ----------------------------------------------------------
def leaf(name: str, shape: Optional[Sequence[int]] = None) -> Node:
    """Named input. A declared *shape* lets ``gradient`` reject non-scalar outputs before evaluation."""
    attrs: Dict[str, Any] = {"name": name}
    if shape is not None:
        attrs["shape"] = tuple(int(d) for d in shape)
    return Node("leaf", attrs=attrs)


def index_leaf(name: str) -> Node:
    """Integer leaf (segment ids); never differentiable."""
    return Node("index", attrs={"name": name})


def constant(value: Any) -> Node:
    return Node("const", attrs={"value": torch.as_tensor(value, dtype=DTYPE)})


def _lift(value: Any) -> Node:
    return value if isinstance(value, Node) else constant(value)


def matmul(a: Node, b: Node) -> Node:
    return Node("matmul", (a, b))


def add(a: Node, b: Node) -> Node:
    return Node("add", (a, b))


def multiply(a: Node, b: Node) -> Node:
    return Node("multiply", (a, b))


def concat(parts: Sequence[Node], axis: int = -1) -> Node:
    return Node("concat", tuple(parts), {"axis": axis})


def slice_(x: Node, start: int, stop: int, axis: int = -1) -> Node:
    return Node("slice", (x,), {"start": start, "stop": stop, "axis": axis})


def seg_sum(x: Node, segments: Node, num_segments: int) -> Node:
    return Node("segment_sum", (x, segments), {"num_segments": num_segments})


def seg_mean(x: Node, segments: Node, num_segments: int) -> Node:
    return Node("segment_mean", (x, segments), {"num_segments": num_segments})


def seg_max(x: Node, segments: Node, num_segments: int) -> Node:
    return Node("segment_max", (x, segments), {"num_segments": num_segments})


def seg_softmax(x: Node, segments: Node, num_segments: int) -> Node:
    return Node("segment_softmax", (x, segments), {"num_segments": num_segments})


def relu(x: Node) -> Node:
    return Node("relu", (x,))


def silu_(x: Node) -> Node:
    return Node("silu", (x,))


def sigmoid(x: Node) -> Node:
    return Node("sigmoid", (x,))


def batchnorm(x: Node, gamma: Node, beta: Node, state: BatchNormState) -> Node:
    return Node("batchnorm", (x, gamma, beta), {"state": state})


def dropout_(x: Node, p: float) -> Node:
    return Node("dropout", (x,), {"p": p})


def sum_(x: Node, axis: Optional[int] = None) -> Node:
    return Node("sum", (x,), {"axis": axis})


def mean(x: Node, axis: Optional[int] = None) -> Node:
    return Node("mean", (x,), {"axis": axis})


def square(x: Node) -> Node:
    return Node("square", (x,))


def l2_norm(x: Node, axis: Optional[int] = None) -> Node:
    return Node("l2_norm", (x,), {"axis": axis})


def call(fn: Callable[..., torch.Tensor], *inputs: Node, label: str = "call") -> Node:
    """Wrap any torch callable (e.g. an ``nn.Module``) as a single op."""
    return Node("call", tuple(inputs), {"fn": fn, "label": label})


# ---- static shapes ----------------------------------------------------------
_ELEMENTWISE = frozenset({"relu", "silu", "sigmoid", "square", "dropout", "batchnorm", "segment_softmax"})


def _numel(shape: Shape) -> int:
    return math.prod(shape)


def _static_shape(node: Node, inputs: List[Optional[Shape]]) -> Optional[Shape]:
    """Output shape known before evaluation; None wherever an undeclared leaf or a ``call`` is involved."""
    op = node.op
    if op in ("leaf", "index"):
        return node.attrs.get("shape")
    if op == "const":
        return tuple(node.attrs["value"].shape)
    if op in ("sum", "mean", "l2_norm"):
        axis = node.attrs.get("axis")
        if axis is None:
            return ()
        if inputs[0] is None or not -len(inputs[0]) <= axis < len(inputs[0]):
            return None
        dims = list(inputs[0])
        del dims[axis]
        return tuple(dims)
    if op == "grad":
        return inputs[1]
    if op in _ELEMENTWISE:
        return inputs[0]
    if op in ("segment_sum", "segment_mean", "segment_max"):
        # segment ids never change the shape
        return None if inputs[0] is None else (node.attrs["num_segments"],) + inputs[0][1:]
    if any(shape is None for shape in inputs):
        return None
    axis = node.attrs.get("axis")
    if axis is not None and any(not -len(shape) <= axis < len(shape) for shape in inputs):
        return None
    if op in ("add", "multiply"):
        a, b = inputs
        if a == b or _numel(b) == 1:
            return a
        return b if _numel(a) == 1 else (a if len(b) == 1 and a and a[-1] == b[0] else None)
    if op == "matmul":
        a, b = inputs
        if len(a) in (1, 2) and len(b) in (1, 2) and a[-1] == b[0]:
            return a[:-1] + b[1:]
        return None
    if op == "concat":
        first = list(inputs[0])
        first[axis] = sum(shape[axis] for shape in inputs)
        return tuple(first)
    if op == "slice":
        dims = list(inputs[0])
        dims[node.attrs["axis"]] = node.attrs["stop"] - node.attrs["start"]
        return tuple(dims)
    return None


# ---- forward rules ----------------------------------------------------------
@dataclass
class _Context:
    training: bool
    seed: int
    values: Dict[str, torch.Tensor]


def _same_or_row(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if a.shape == b.shape or b.numel() == 1 or a.numel() == 1:
        return
    if b.dim() == 1 and a.dim() >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise ShapeMismatch(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not match")


def _f_matmul(node: Node, args: List[torch.Tensor], ctx: _Context) -> torch.Tensor:
    a, b = args
    if a.dim() not in (1, 2) or b.dim() not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not chain")
    return a @ b


def _f_add(node: Node, args: List[torch.Tensor], ctx: _Context) -> torch.Tensor:
    _same_or_row(args[0], args[1], "add")
    return args[0] + args[1]


def _f_multiply(node: Node, args: List[torch.Tensor], ctx: _Context) -> torch.Tensor:
    _same_or_row(args[0], args[1], "multiply")
    return args[0] * args[1]


def _f_concat(node: Node, args: List[torch.Tensor], ctx: _Context) -> torch.Tensor:
    axis = node.attrs["axis"]
    try:
        return torch.cat(args, dim=axis)
    except RuntimeError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None


def _f_slice(node: Node, args: List[torch.Tensor], ctx: _Context) -> torch.Tensor:
    (x,) = args
    axis, start, stop = node.attrs["axis"], node.attrs["start"], node.attrs["stop"]
    size = x.shape[axis]
    if not 0 <= start < stop <= size:
        raise ShapeMismatch(f"slice [{start}:{stop}] out of range for axis of size {size}")
    return x.narrow(axis, start, stop - start)


def _segment_rule(fn: Callable[..., torch.Tensor]):
    def rule(node: Node, args: List[torch.Tensor], ctx: _Context) -> torch.Tensor:
        x, segments = args
        return fn(x, segments.long(), node.attrs["num_segments"])
    return rule


def _f_batchnorm(node: Node, args: List[torch.Tensor], ctx: _Context) -> torch.Tensor:
    x, gamma, beta = args
    state: BatchNormState = node.attrs["state"]
    if x.dim() != 2 or x.shape[1] != state.num_features:
        raise ShapeMismatch(f"batchnorm expects (n, {state.num_features}), got {tuple(x.shape)}")
    if ctx.training:
        if x.shape[0] < 2:
            raise ShapeMismatch("batchnorm in training mode needs at least two rows")
        mu = x.mean(dim=0)
        var = x.var(dim=0, unbiased=False)
        with torch.no_grad():
            unbiased = x.var(dim=0, unbiased=True)
            state.running_mean.mul_(1 - state.momentum).add_(state.momentum * mu.detach())
            state.running_var.mul_(1 - state.momentum).add_(state.momentum * unbiased.detach())
    else:
        mu, var = state.running_mean, state.running_var
    return (x - mu) / torch.sqrt(var + state.eps) * gamma + beta


def _f_dropout(node: Node, args: List[torch.Tensor], ctx: _Context) -> torch.Tensor:
    gen = torch.Generator()
    gen.manual_seed(ctx.seed * 1_000_003 + node.uid)
    return dropout(args[0], node.attrs["p"], gen, training=ctx.training)


def _reduce(torch_fn: Callable[..., torch.Tensor]):
    def rule(node: Node, args: List[torch.Tensor], ctx: _Context) -> torch.Tensor:
        axis = node.attrs.get("axis")
        return torch_fn(args[0]) if axis is None else torch_fn(args[0], dim=axis)
    return rule


def _l2(x: torch.Tensor, dim: Optional[int] = None) -> torch.Tensor:
    if dim is None:
        return torch.sqrt(torch.sum(x * x))
    return torch.sqrt(torch.sum(x * x, dim=dim))


def _f_call(node: Node, args: List[torch.Tensor], ctx: _Context) -> torch.Tensor:
    return node.attrs["fn"](*args)


def _f_grad(node: Node, args: List[torch.Tensor], ctx: _Context) -> torch.Tensor:
    out, _ = args
    wrt = ctx.values[node.attrs["wrt"]]
    if out.numel() != 1:
        raise NonScalarOutput(f"gradient needs a scalar output, got shape {tuple(out.shape)}")
    if not out.requires_grad:
        return torch.zeros_like(wrt)
    (grad,) = torch.autograd.grad(out.reshape(()), wrt, create_graph=True, allow_unused=True)
    return torch.zeros_like(wrt) if grad is None else grad


_FORWARD: Dict[str, Callable[[Node, List[torch.Tensor], _Context], torch.Tensor]] = {
    "matmul": _f_matmul,
    "add": _f_add,
    "multiply": _f_multiply,
    "concat": _f_concat,
    "slice": _f_slice,
    "segment_sum": _segment_rule(segment_sum),
    "segment_mean": _segment_rule(segment_mean),
    "segment_max": _segment_rule(segment_max),
    "segment_softmax": _segment_rule(segment_softmax),
    "relu": lambda node, args, ctx: torch.relu(args[0]),
    "silu": lambda node, args, ctx: silu(args[0]),
    "sigmoid": lambda node, args, ctx: torch.sigmoid(args[0]),
    "batchnorm": _f_batchnorm,
    "dropout": _f_dropout,
    "sum": _reduce(torch.sum),
    "mean": _reduce(torch.mean),
    "square": lambda node, args, ctx: args[0] * args[0],
    "l2_norm": _reduce(_l2),
    "call": _f_call,
    "grad": _f_grad,
}


# ────────────────────────────────────────────────────────────────────────────
# EVALUATION AND DIFFERENTIATION
# ────────────────────────────────────────────────────────────────────────────
def evaluate(
    graph: ExpressionGraph,
    bindings: Mapping[str, Any],
    training: bool = False,
    seed: int = 0,
) -> torch.Tensor:
    """
    Forward value of *graph*. Leaves are looked up by name in *bindings*.
    ``training`` switches batchnorm to batch statistics and enables dropout,
    whose masks depend only on *seed* and the node.
    """
    wrt_names = {node.attrs["wrt"] for node in graph.nodes if node.op == "grad"}
    values: Dict[str, torch.Tensor] = {}
    for name in graph.leaves:
        if name not in bindings:
            raise UnboundLeaf(name)
        if name in graph.index_leaves:
            values[name] = torch.as_tensor(bindings[name], dtype=torch.long)
            continue
        tensor = torch.as_tensor(bindings[name], dtype=DTYPE)
        if name in wrt_names and not tensor.requires_grad:
            tensor = tensor.detach().clone().requires_grad_(True)
        values[name] = tensor

    ctx = _Context(training=training, seed=int(seed), values=values)
    env: Dict[int, torch.Tensor] = {}
    with torch.enable_grad() if wrt_names else contextlib.nullcontext():
        for node in graph.nodes:
            if node.op in ("leaf", "index"):
                env[node.uid] = values[node.name]
            elif node.op == "const":
                env[node.uid] = node.attrs["value"]
            else:
                args = [env[parent.uid] for parent in node.inputs]
                env[node.uid] = _FORWARD[node.op](node, args, ctx)
    return env[graph.output.uid]


def gradient(graph: ExpressionGraph, wrt: str, output: Optional[Node] = None) -> ExpressionGraph:
    """
    A new graph computing d(output)/d(wrt). The result is an ordinary
    ExpressionGraph, so it can be combined with other ops and differentiated
    again. Dropout masks are constants and relu has derivative 0 at 0.
    A non-scalar output is rejected here when its shape is known statically
    and at evaluation otherwise.
    """
    output = graph.output if output is None else output
    if wrt in graph.index_leaves:
        raise NonDifferentiableOp(f"{wrt!r} is an integer index leaf")
    shape = graph.shapes[output.uid] if output.uid in graph.shapes else ExpressionGraph(output).output_shape
    if shape is not None and _numel(shape) != 1:
        raise NonScalarOutput(f"gradient needs a scalar output, got shape {shape}")
    declared = next((n.attrs.get("shape") for n in graph.nodes if n.op == "leaf" and n.name == wrt), None)
    return ExpressionGraph(Node("grad", (output, leaf(wrt, declared)), {"wrt": wrt}))


def gradients(graph: ExpressionGraph, wrt: Sequence[str]) -> Dict[str, ExpressionGraph]:
    return {name: gradient(graph, name) for name in wrt}


def check_gradient(
    graph: ExpressionGraph,
    leaf_name: str,
    at: Any,
    h: float = 1e-5,
    bindings: Optional[Mapping[str, Any]] = None,
) -> float:
    """
    Max relative error between ``gradient`` and a central finite difference
    evaluated at *at*: max |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    base = dict(bindings or {})
    point = torch.as_tensor(at, dtype=DTYPE).detach().clone()
    base[leaf_name] = point
    analytic = evaluate(gradient(graph, leaf_name), base).detach()

    numeric = torch.zeros_like(point)
    flat = point.view(-1)
    for i in range(flat.numel()):
        plus = flat.clone()
        plus[i] += h
        minus = flat.clone()
        minus[i] -= h
        f_plus = float(evaluate(graph, {**base, leaf_name: plus.view_as(point)}))
        f_minus = float(evaluate(graph, {**base, leaf_name: minus.view_as(point)}))
        numeric.view(-1)[i] = (f_plus - f_minus) / (2.0 * h)

    if numeric.numel() == 0:
        return 0.0
    err = (analytic - numeric).abs() / analytic.abs().clamp(min=1.0)
    worst = float(err.max())
    logger.debug("check_gradient(%s): max relative error %.3e", leaf_name, worst)
    return worst if math.isfinite(worst) else float("inf")
