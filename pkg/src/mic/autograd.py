"""Reverse-mode automatic differentiation over dense numpy arrays.

Graphs are built define-by-run: every op wraps its numpy result in a
Tensor that remembers the op name and input tensors. Backward functions
live in a module-level registry keyed by op name, so differentiating an
op without a registered backward is a hard error rather than a silent
zero. The same registry is the hook point for corrupted-gradient
negative controls in the test suite.

Also hosts the finite-difference harness used to certify every gradient
path, including exact detection of hinge-boundary crossings (a central
difference that straddles a kink is excluded and flagged, not failed).
"""

from __future__ import annotations

import contextlib
import json
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DeterminismError, UnregisteredOpError

DEFAULT_DTYPE = np.float64

# Guard against 0/0 in the sqrt backward when the forward value is exactly
# zero. The true derivative is unbounded there; callers that care sample
# away from it.
_SQRT_GRAD_FLOOR = 1e-150

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block. Forward values only."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class KinkMonitor:
    """Records which side of each kink every element landed on.

    relu, abs and maximum_const report the sign pattern of their inputs
    relative to the kink whenever a monitor is active. Two forward passes
    of the same graph produce signatures of identical structure, so a
    coordinate perturbation that pushes any element across a kink is
    detected exactly by comparing signatures.
    """

    def __init__(self) -> None:
        self.signature: list[np.ndarray] = []

    def record(self, side: np.ndarray) -> None:
        self.signature.append(side)


@contextlib.contextmanager
def watch_kinks(monitor: KinkMonitor):
    prev = getattr(_state, "kink_monitor", None)
    _state.kink_monitor = monitor
    try:
        yield monitor
    finally:
        _state.kink_monitor = prev


def _record_kink(side: np.ndarray) -> None:
    monitor = getattr(_state, "kink_monitor", None)
    if monitor is not None:
        monitor.record(side)


def signatures_equal(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


class Tensor:
    """Dense array node. Remembers its producing op while grads are enabled."""

    __slots__ = ("data", "requires_grad", "grad", "op", "inputs", "ctx")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.inputs: tuple[Tensor, ...] = ()
        self.ctx = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- sugar -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ContractError(".T is defined for 2-d tensors only")
        return swapaxes(self, 0, 1)

    def __repr__(self) -> str:
        grad_flag = ", grad" if self.requires_grad else ""
        op = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={self.shape}{grad_flag}{op})"


_BACKWARDS: dict[str, Callable[[Tensor, np.ndarray], tuple]] = {}


def backward_of(op: str):
    def deco(fn):
        _BACKWARDS[op] = fn
        return fn
    return deco


def _from_op(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], ctx=None) -> Tensor:
    track = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        if op not in _BACKWARDS:
            raise UnregisteredOpError(op)
        out.op = op
        out.inputs = inputs
        out.ctx = ctx
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that numpy broadcasting introduced or stretched."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g


def _split(x) -> tuple[np.ndarray, Tensor | None]:
    if isinstance(x, Tensor):
        return x.data, x
    return x, None


# -- elementwise binary ops -----------------------------------------------


def _binary(op: str, a, b, data: np.ndarray) -> Tensor:
    av, at = _split(a)
    bv, bt = _split(b)
    inputs = tuple(t for t in (at, bt) if t is not None)
    ctx = (at is not None, bt is not None, av, bv)
    return _from_op(op, data, inputs, ctx)


def add(a, b):
    av = a.data if isinstance(a, Tensor) else a
    bv = b.data if isinstance(b, Tensor) else b
    return _binary("add", a, b, av + bv)


@backward_of("add")
def _add_bwd(out: Tensor, g: np.ndarray):
    a_in, b_in, av, bv = out.ctx
    grads = []
    if a_in:
        grads.append(_unbroadcast(g, np.shape(av)))
    if b_in:
        grads.append(_unbroadcast(g, np.shape(bv)))
    return tuple(grads)


def sub(a, b):
    av = a.data if isinstance(a, Tensor) else a
    bv = b.data if isinstance(b, Tensor) else b
    return _binary("sub", a, b, av - bv)


@backward_of("sub")
def _sub_bwd(out: Tensor, g: np.ndarray):
    a_in, b_in, av, bv = out.ctx
    grads = []
    if a_in:
        grads.append(_unbroadcast(g, np.shape(av)))
    if b_in:
        grads.append(_unbroadcast(-g, np.shape(bv)))
    return tuple(grads)


def mul(a, b):
    av = a.data if isinstance(a, Tensor) else a
    bv = b.data if isinstance(b, Tensor) else b
    return _binary("mul", a, b, av * bv)


@backward_of("mul")
def _mul_bwd(out: Tensor, g: np.ndarray):
    a_in, b_in, av, bv = out.ctx
    grads = []
    if a_in:
        grads.append(_unbroadcast(g * bv, np.shape(av)))
    if b_in:
        grads.append(_unbroadcast(g * av, np.shape(bv)))
    return tuple(grads)


def div(a, b):
    av = a.data if isinstance(a, Tensor) else a
    bv = b.data if isinstance(b, Tensor) else b
    return _binary("div", a, b, av / bv)


@backward_of("div")
def _div_bwd(out: Tensor, g: np.ndarray):
    a_in, b_in, av, bv = out.ctx
    grads = []
    if a_in:
        grads.append(_unbroadcast(g / bv, np.shape(av)))
    if b_in:
        grads.append(_unbroadcast(-g * av / (bv * bv), np.shape(bv)))
    return tuple(grads)


# -- elementwise unary ops -------------------------------------------------


def pow_const(a: Tensor, p) -> Tensor:
    if isinstance(p, Tensor):
        raise ContractError("pow supports constant exponents only")
    return _from_op("pow_const", a.data ** p, (a,), ctx=(a.data, float(p)))


@backward_of("pow_const")
def _pow_bwd(out: Tensor, g: np.ndarray):
    av, p = out.ctx
    return (g * p * av ** (p - 1.0),)


def exp(a: Tensor) -> Tensor:
    return _from_op("exp", np.exp(a.data), (a,))


@backward_of("exp")
def _exp_bwd(out: Tensor, g: np.ndarray):
    return (g * out.data,)


def log(a: Tensor) -> Tensor:
    return _from_op("log", np.log(a.data), (a,), ctx=a.data)


@backward_of("log")
def _log_bwd(out: Tensor, g: np.ndarray):
    return (g / out.ctx,)


def sqrt(a: Tensor) -> Tensor:
    return _from_op("sqrt", np.sqrt(a.data), (a,))


@backward_of("sqrt")
def _sqrt_bwd(out: Tensor, g: np.ndarray):
    return (g * 0.5 / np.maximum(out.data, _SQRT_GRAD_FLOOR),)


def tanh(a: Tensor) -> Tensor:
    return _from_op("tanh", np.tanh(a.data), (a,))


@backward_of("tanh")
def _tanh_bwd(out: Tensor, g: np.ndarray):
    return (g * (1.0 - out.data * out.data),)


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    _record_kink(sign.astype(np.int8))
    return _from_op("abs", np.abs(a.data), (a,), ctx=sign)


@backward_of("abs")
def _abs_bwd(out: Tensor, g: np.ndarray):
    # Subgradient 0 exactly at the kink: sign(0) == 0.
    return (g * out.ctx,)


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    _record_kink(active)
    return _from_op("relu", np.where(active, a.data, 0.0), (a,), ctx=active)


@backward_of("relu")
def _relu_bwd(out: Tensor, g: np.ndarray):
    return (g * out.ctx,)


def maximum_const(a: Tensor, c: float) -> Tensor:
    above = a.data > c
    _record_kink(above)
    return _from_op("maximum_const", np.where(above, a.data, c), (a,), ctx=above)


@backward_of("maximum_const")
def _maximum_const_bwd(out: Tensor, g: np.ndarray):
    return (g * out.ctx,)


# -- reductions and shape ops ----------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    return _from_op("sum", data, (a,), ctx=(a.data.shape, axis, keepdims))


@backward_of("sum")
def _sum_bwd(out: Tensor, g: np.ndarray):
    shape, axis, keepdims = out.ctx
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(ax % len(shape) for ax in axes):
            g = np.expand_dims(g, ax)
    return (np.broadcast_to(g, shape),)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _from_op("reshape", a.data.reshape(shape), (a,), ctx=a.data.shape)


@backward_of("reshape")
def _reshape_bwd(out: Tensor, g: np.ndarray):
    return (g.reshape(out.ctx),)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _from_op("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,), ctx=(ax1, ax2))


@backward_of("swapaxes")
def _swapaxes_bwd(out: Tensor, g: np.ndarray):
    ax1, ax2 = out.ctx
    return (np.swapaxes(g, ax1, ax2),)


def matmul(a, b) -> Tensor:
    av, at = _split(a)
    bv, bt = _split(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ContractError("matmul operands must have ndim >= 2")
    inputs = tuple(t for t in (at, bt) if t is not None)
    ctx = (at is not None, bt is not None, av, bv)
    return _from_op("matmul", av @ bv, inputs, ctx)


@backward_of("matmul")
def _matmul_bwd(out: Tensor, g: np.ndarray):
    a_in, b_in, av, bv = out.ctx
    grads = []
    if a_in:
        ga = g @ np.swapaxes(bv, -1, -2)
        grads.append(_unbroadcast(ga, av.shape))
    if b_in:
        gb = np.swapaxes(av, -1, -2) @ g
        grads.append(_unbroadcast(gb, bv.shape))
    return tuple(grads)


def getitem(a: Tensor, key) -> Tensor:
    return _from_op("getitem", a.data[key], (a,), ctx=(a.data.shape, a.data.dtype, key))


@backward_of("getitem")
def _getitem_bwd(out: Tensor, g: np.ndarray):
    shape, dtype, key = out.ctx
    gz = np.zeros(shape, dtype=dtype)
    np.add.at(gz, key, g)
    return (gz,)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    return _from_op("concat", data, tuple(tensors), ctx=(axis, sizes))


@backward_of("concat")
def _concat_bwd(out: Tensor, g: np.ndarray):
    axis, sizes = out.ctx
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def embedding(weight: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)
    return _from_op("embedding", weight.data[idx], (weight,), ctx=(idx, weight.data.shape, weight.data.dtype))


@backward_of("embedding")
def _embedding_bwd(out: Tensor, g: np.ndarray):
    idx, shape, dtype = out.ctx
    gz = np.zeros(shape, dtype=dtype)
    np.add.at(gz, idx, g)
    return (gz,)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# -- tape traversal ----------------------------------------------------------


class GradTape:
    """Topologically ordered view of the graph below a root tensor.

    nodes lists every reachable grad-requiring tensor exactly once, with
    inputs before consumers, so one reversed sweep propagates gradients.
    """

    def __init__(self, root: Tensor):
        self.root = root
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
        self.nodes = order

    def ops(self) -> list[str]:
        return sorted({n.op for n in self.nodes if n.op is not None})


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(leaf) to every reachable leaf tensor.

    root must be scalar. Gradients accumulate into each leaf's .grad
    (adding to any prior content) and are also returned keyed by tensor.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root does not require grad")
    tape = GradTape(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            node.grad = g if node.grad is None else node.grad + g
            leaf_grads[node] = g
            continue
        fn = _BACKWARDS.get(node.op)
        if fn is None:
            raise UnregisteredOpError(node.op)
        in_grads = fn(node, g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi
    return leaf_grads


# -- finite-difference certification ----------------------------------------


@dataclass
class GradCheckEntry:
    """Per-parameter outcome of one finite-difference sweep.

    excluded_kink lists coordinates whose perturbation crossed a hinge;
    excluded_noise lists coordinates where the disagreement sits inside
    the rounding-noise budget of the central difference itself, so no
    verdict is possible at this step size.
    """

    name: str
    n_checked: int
    max_rel: float
    max_abs: float
    coords: list[int] = field(default_factory=list)
    excluded_kink: list[int] = field(default_factory=list)
    excluded_noise: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_checked": self.n_checked,
            "max_rel": self.max_rel,
            "max_abs": self.max_abs,
            "coords": self.coords,
            "excluded_kink": self.excluded_kink,
            "excluded_noise": self.excluded_noise,
        }


@dataclass
class GradCheckReport:
    """Result of certifying one scalar loss against central differences."""

    h: float
    entries: list[GradCheckEntry]
    ops: list[str] = field(default_factory=list)

    @property
    def max_rel(self) -> float:
        return max((e.max_rel for e in self.entries), default=0.0)

    @property
    def n_checked(self) -> int:
        return sum(e.n_checked for e in self.entries)

    @property
    def n_excluded(self) -> int:
        return sum(len(e.excluded_kink) + len(e.excluded_noise) for e in self.entries)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.n_checked > 0 and self.max_rel < tol

    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.max_rel, default=None)

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "max_rel": self.max_rel,
            "n_checked": self.n_checked,
            "n_excluded": self.n_excluded,
            "ops": self.ops,
            "entries": [e.to_dict() for e in self.entries],
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
    rel_floor: float = 1e-8,
    tol: float = 1e-4,
    noise_factor: float = 4.0,
) -> GradCheckReport:
    """Certify reverse-mode gradients of loss_fn against central differences.

    loss_fn must rebuild its graph from params on every call and be
    deterministic; this is asserted up front with two evaluations. For
    tensors larger than max_coords a seeded coordinate subsample is
    checked and recorded in the report.

    Two kinds of coordinate are excluded rather than failed, both
    recorded in the report: perturbations that push a hinge input across
    its kink (the central difference brackets a non-differentiability),
    and disagreements smaller than noise_factor times the rounding-noise
    budget eps * max|f| / 2h of the difference quotient itself, which no
    comparison at this step size can adjudicate. A genuinely wrong
    gradient produces disagreement at the scale of the gradient, far
    above that budget.
    """

    def eval_loss() -> tuple[float, list[np.ndarray]]:
        monitor = KinkMonitor()
        with no_grad(), watch_kinks(monitor):
            value = loss_fn()
        return float(value.data), monitor.signature

    f0, _ = eval_loss()
    f1, _ = eval_loss()
    if f0 != f1:
        raise DeterminismError(f"loss_fn not deterministic: {f0!r} != {f1!r}")

    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    tape_ops = GradTape(loss).ops()
    backward(loss)

    eps_mach = float(np.finfo(np.float64).eps)
    rng = np.random.default_rng(seed)
    entries: list[GradCheckEntry] = []
    for name, p in sorted(params.items()):
        if p.grad is None:
            g_ad = np.zeros_like(p.data)
        else:
            g_ad = p.grad
        n = p.data.size
        if n <= max_coords:
            coords = list(range(n))
        else:
            coords = sorted(rng.choice(n, size=max_coords, replace=False).tolist())
        flat = p.data.reshape(-1)
        max_rel = 0.0
        max_abs = 0.0
        checked = 0
        excluded_kink: list[int] = []
        excluded_noise: list[int] = []
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus, sig_plus = eval_loss()
            flat[c] = orig - h
            f_minus, sig_minus = eval_loss()
            flat[c] = orig
            if not signatures_equal(sig_plus, sig_minus):
                excluded_kink.append(c)
                continue
            g_fd = (f_plus - f_minus) / (2.0 * h)
            g = float(g_ad.reshape(-1)[c])
            abs_err = abs(g - g_fd)
            rel_err = abs_err / max(abs(g), abs(g_fd), rel_floor)
            if rel_err >= tol:
                noise_budget = noise_factor * eps_mach * max(abs(f_plus), abs(f_minus)) / (2.0 * h)
                if abs_err <= noise_budget:
                    excluded_noise.append(c)
                    continue
            max_rel = max(max_rel, rel_err)
            max_abs = max(max_abs, abs_err)
            checked += 1
        entries.append(
            GradCheckEntry(name, checked, max_rel, max_abs, coords, excluded_kink, excluded_noise)
        )
    return GradCheckReport(h=h, entries=entries, ops=tape_ops)
