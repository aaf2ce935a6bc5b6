"""
PA-EWC Desk Lab - Tensor and Reverse-Mode Autodiff Module

Dense float64 tensors backed by numpy with an eager, tape-based reverse mode.
Every op computes its value immediately; when a Tape is active on the current
thread and any input requires grad, the op appends a node to that tape.
Tape.backward() replays the nodes in reverse exactly once.

Backward rules live in GRADIENT_RULES, keyed by op name, so each rule can be
inspected or replaced on its own (the self-check uses this to inject faults).
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, DimensionError, DomainError, InputError, NumericError, StateError

logger = logging.getLogger(__name__)

DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> List[Optional["Tape"]]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def current_tape() -> Optional["Tape"]:
    """Tape that ops on this thread currently record to (None when not recording)"""
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_tape:
    """Context manager that suspends recording on the current thread"""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _tape_stack().pop()


class Tensor:
    """
    Dense n-dimensional float64 array participating in the gradient tape

    Leaf tensors (model parameters, inputs) are created directly; every other
    tensor is produced by an op. Op outputs are read-only so values recorded on
    a tape can be shared between threads.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "tape")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.tape: Optional["Tape"] = None

    @classmethod
    def _from_op(cls, value: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(value, dtype=DTYPE)
        out.data.setflags(write=False)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out.tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def flat(self) -> np.ndarray:
        """Row-major flat view of the values"""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f", name='{self.name}'" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Arithmetic
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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # Method forms
    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        return log_softmax(self, axis)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence]


@dataclass
class Node:
    """One recorded op: output, inputs and whatever the backward rule needs"""
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    ctx: Dict[str, Any] = field(default_factory=dict)


class Tape:
    """
    Ordered record of ops for one forward pass

    Usage:
        with Tape() as tape:
            loss = f(params)
        grads = tape.backward(loss, params)

    Nodes are appended in execution order, so inputs always precede the ops
    that consume them. A tape supports exactly one backward pass.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.consumed = False
        self._leaves: Dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise StateError("tape already consumed; start a new Tape for a new forward pass")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self):
        return len(self.nodes)

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], ctx: Dict[str, Any]):
        if self.consumed:
            raise StateError("cannot record onto a consumed tape")
        for tensor in inputs:
            if tensor.tape is None and tensor.requires_grad:
                self._leaves[id(tensor)] = tensor
        output.tape = self
        self.nodes.append(Node(op, output, inputs, ctx))

    def backward(self, loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> Dict[str, np.ndarray]:
        """
        Propagate d(loss)/d(.) back through the recorded nodes

        Args:
            loss: scalar tensor produced on this tape
            params: optional named parameters; when given, the result has one
                entry per name (zeros for parameters the loss does not reach)

        Returns:
            Map from leaf name to gradient array (same shape as the leaf)
        """
        if self.consumed:
            raise StateError("backward already ran on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ContractError("loss was not produced on this tape")
        self.consumed = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            rule = GRADIENT_RULES[node.op]
            input_grads = rule(node, upstream)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        result: Dict[str, np.ndarray] = {}
        for key, leaf in self._leaves.items():
            grad = np.array(grads.get(key, np.zeros_like(leaf.data)), dtype=DTYPE).reshape(leaf.shape)
            leaf.grad = grad
            if leaf.name is not None:
                result[leaf.name] = grad
        if params is not None:
            named = {}
            for name, tensor in params.items():
                named[name] = result.get(name, np.zeros_like(tensor.data))
            result = named
        self.nodes.clear()
        return result


def backward(loss: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    """Run backward on the tape that produced `loss`"""
    if loss.tape is None:
        raise ContractError("loss has no forward tape (was it computed inside `with Tape():`?)")
    return loss.tape.backward(loss, params)


# ---------------------------------------------------------------------------
# Op plumbing
# ---------------------------------------------------------------------------

def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _emit(op: str, value: np.ndarray, inputs: Tuple[Tensor, ...], **ctx) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._from_op(value, requires_grad)
    tape = current_tape()
    if requires_grad and tape is not None:
        tape.record(op, out, inputs, ctx)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum grad over the axes that broadcasting expanded to reach `shape`"""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op: str, a: TensorLike, b: TensorLike, fn: Callable) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = fn(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform ({e})")
    return _emit(op, value, (a, b))


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    return _binary("add", a, b, np.add)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    return _binary("sub", a, b, np.subtract)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    return _binary("mul", a, b, np.multiply)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    b_tensor = as_tensor(b)
    if np.any(b_tensor.data == 0.0):
        raise DomainError("div: zero in denominator")
    return _binary("div", a, b_tensor, np.divide)


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with >= 2 dims, got {a.shape} @ {b.shape}")
    try:
        value = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform ({e})")
    return _emit("matmul", value, (a, b))


def power(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _emit("power", a.data ** exponent, (a,), exponent=float(exponent))


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _emit("relu", np.maximum(a.data, 0.0), (a,))


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _emit("sigmoid", 0.5 * (1.0 + np.tanh(0.5 * a.data)), (a,))


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _emit("exp", np.exp(a.data), (a,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    return _emit("log", np.log(a.data), (a,))


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or not -a.ndim <= axis < a.ndim:
        raise DomainError(f"softmax axis {axis} invalid for shape {a.shape}")
    if a.shape[axis] == 0:
        raise DomainError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return _emit("softmax", e / e.sum(axis=axis, keepdims=True), (a,), axis=axis)


def log_softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or not -a.ndim <= axis < a.ndim:
        raise DomainError(f"log_softmax axis {axis} invalid for shape {a.shape}")
    if a.shape[axis] == 0:
        raise DomainError("log_softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    value = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _emit("log_softmax", value, (a,), axis=axis)


def tsum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    return _emit("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), axes=axes, keepdims=keepdims)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise DomainError("mean over an empty axis")
    return _emit("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), axes=axes, keepdims=keepdims, count=count)


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)} ({e})")
    return _emit("reshape", value, (a,))


def transpose(a: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose axes {tuple(axes)} invalid for shape {a.shape}")
    axes = tuple(ax % a.ndim for ax in axes)
    return _emit("transpose", a.data.transpose(axes), (a,), axes=axes)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    try:
        value = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}")
    sizes = [t.shape[axis] for t in parts]
    return _emit("concat", value, parts, axis=axis, sizes=sizes)


def embedding(table: TensorLike, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; ids is an integer array of any shape"""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(f"embedding ids out of range [0, {table.shape[0]})")
    return _emit("embedding", table.data[ids], (table,), ids=ids.astype(np.int64))


def getitem(a: TensorLike, index) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.data[index]
    except IndexError as e:
        raise DimensionError(f"index {index!r} invalid for shape {a.shape} ({e})")
    return _emit("getitem", np.array(value), (a,), index=index)


def upsample_nearest(a: TensorLike, factor: int) -> Tensor:
    """Repeat each entry of the last two axes `factor` times along both"""
    a = as_tensor(a)
    if a.ndim < 2 or factor < 1:
        raise DimensionError(f"upsample_nearest needs >= 2 dims and factor >= 1, got {a.shape}, {factor}")
    value = np.repeat(np.repeat(a.data, factor, axis=-2), factor, axis=-1)
    return _emit("upsample_nearest", value, (a,), factor=int(factor))


# ---------------------------------------------------------------------------
# Backward rules: rule(node, upstream) -> one gradient (or None) per input
# ---------------------------------------------------------------------------

def _add_backward(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_backward(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_backward(node, g):
    a, b = node.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _div_backward(node, g):
    a, b = node.inputs
    return (_unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape))


def _neg_backward(node, g):
    return (-g,)


def _matmul_backward(node, g):
    a, b = node.inputs
    grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
    grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
    return (None if grad_a is None else _unbroadcast(grad_a, a.shape),
            None if grad_b is None else _unbroadcast(grad_b, b.shape))


def _power_backward(node, g):
    (a,) = node.inputs
    p = node.ctx["exponent"]
    return (g * p * a.data ** (p - 1.0),)


def _relu_backward(node, g):
    (a,) = node.inputs
    return (g * (a.data > 0.0),)


def _sigmoid_backward(node, g):
    s = node.output.data
    return (g * s * (1.0 - s),)


def _exp_backward(node, g):
    return (g * node.output.data,)


def _log_backward(node, g):
    (a,) = node.inputs
    return (g / a.data,)


def _softmax_backward(node, g):
    s = node.output.data
    axis = node.ctx["axis"]
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def _log_softmax_backward(node, g):
    axis = node.ctx["axis"]
    s = np.exp(node.output.data)
    return (g - s * g.sum(axis=axis, keepdims=True),)


def _sum_backward(node, g):
    (a,) = node.inputs
    if not node.ctx["keepdims"]:
        g = np.expand_dims(g, node.ctx["axes"])
    return (np.broadcast_to(g, a.shape),)


def _mean_backward(node, g):
    (a,) = node.inputs
    if not node.ctx["keepdims"]:
        g = np.expand_dims(g, node.ctx["axes"])
    return (np.broadcast_to(g / node.ctx["count"], a.shape),)


def _reshape_backward(node, g):
    (a,) = node.inputs
    return (g.reshape(a.shape),)


def _transpose_backward(node, g):
    return (g.transpose(np.argsort(node.ctx["axes"])),)


def _concat_backward(node, g):
    splits = np.cumsum(node.ctx["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=node.ctx["axis"]))


def _embedding_backward(node, g):
    (table,) = node.inputs
    grad = np.zeros_like(table.data)
    np.add.at(grad, node.ctx["ids"], g)
    return (grad,)


def _getitem_backward(node, g):
    (a,) = node.inputs
    grad = np.zeros_like(a.data)
    np.add.at(grad, node.ctx["index"], g)
    return (grad,)


def _upsample_nearest_backward(node, g):
    (a,) = node.inputs
    f = node.ctx["factor"]
    h, w = a.shape[-2], a.shape[-1]
    blocks = g.reshape(g.shape[:-2] + (h, f, w, f))
    return (blocks.sum(axis=(-3, -1)),)


GRADIENT_RULES: Dict[str, Callable[[Node, np.ndarray], Tuple[Optional[np.ndarray], ...]]] = {
    "add": _add_backward,
    "sub": _sub_backward,
    "mul": _mul_backward,
    "div": _div_backward,
    "neg": _neg_backward,
    "matmul": _matmul_backward,
    "power": _power_backward,
    "relu": _relu_backward,
    "sigmoid": _sigmoid_backward,
    "exp": _exp_backward,
    "log": _log_backward,
    "softmax": _softmax_backward,
    "log_softmax": _log_softmax_backward,
    "sum": _sum_backward,
    "mean": _mean_backward,
    "reshape": _reshape_backward,
    "transpose": _transpose_backward,
    "concat": _concat_backward,
    "embedding": _embedding_backward,
    "getitem": _getitem_backward,
    "upsample_nearest": _upsample_nearest_backward,
}


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def _scalar_value(value: Any) -> float:
    data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=DTYPE)
    if data.size != 1:
        raise ContractError(f"objective must be scalar, got shape {data.shape}")
    result = float(data.reshape(-1)[0])
    if not np.isfinite(result):
        raise NumericError(f"objective evaluated to {result}")
    return result


def _coordinates(params: Mapping[str, Tensor], max_coords: Optional[int],
                 rng: Optional[np.random.Generator]) -> Iterator[Tuple[str, int]]:
    coords = [(name, k) for name, tensor in params.items() for k in range(tensor.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        picked = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in picked]
    return iter(coords)


def finite_diff_check(f: Callable[[Mapping[str, Tensor]], Tensor],
                      params: Mapping[str, Tensor],
                      h: float = 1e-5,
                      abs_floor: float = 1e-12,
                      max_coords: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> float:
    """
    Compare reverse-mode gradients of `f` against central differences

    Args:
        f: deterministic map from named parameters to a scalar tensor
        params: named parameter tensors (perturbed in place, then restored)
        h: central-difference step
        abs_floor: added to |analytic| in the denominator of the relative error
        max_coords: check a random subset of this many coordinates (None = all)
        rng: generator used to pick the subset

    Returns:
        max over checked coordinates of
        |analytic - (f(θ+h e_k) - f(θ-h e_k)) / 2h| / (|analytic| + abs_floor)
    """
    if h <= 0:
        raise InputError(f"finite-difference step must be positive, got {h}")

    with Tape() as tape:
        loss = f(params)
    if not isinstance(loss, Tensor):
        raise ContractError("objective must return a Tensor")
    if loss.tape is tape:
        analytic = tape.backward(loss, params)
    else:
        _scalar_value(loss)
        analytic = {name: np.zeros_like(tensor.data) for name, tensor in params.items()}

    worst = 0.0
    with no_tape():
        for name, k in _coordinates(params, max_coords, rng):
            tensor = params[name]
            original = tensor.data
            try:
                shifted = original.copy()
                shifted.reshape(-1)[k] += h
                tensor.data = shifted
                f_plus = _scalar_value(f(params))
                shifted = original.copy()
                shifted.reshape(-1)[k] -= h
                tensor.data = shifted
                f_minus = _scalar_value(f(params))
            finally:
                tensor.data = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            exact = float(analytic[name].reshape(-1)[k])
            error = abs(exact - numeric) / (abs(exact) + abs_floor)
            if error > worst:
                worst = error
                logger.debug(f"finite-diff worst so far: {name}[{k}] analytic={exact:.6e} numeric={numeric:.6e}")
    return worst
