"""Dense tensors with reverse-mode differentiation and an Adam optimizer.

Tensors hold rank-0..2 float32/float64 numpy buffers. Each op records a
vector-Jacobian closure on its output; ``backward()`` walks the graph in
reverse topological order, accumulates gradients on leaf tensors, and frees
the graph eagerly. Graphs are built per forward pass and are confined to one
thread; ``no_grad()`` suppresses graph recording for inference paths.

``AllocationTracker`` measures buffer bytes allocated by tensor creation.
It assumes the measured path creates fresh buffers (true for every op here);
tensors sharing a buffer via ``detach`` would be counted twice.
"""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DataError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "AllocationTracker",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "narrow",
    "gather_rows",
    "scatter_rows",
    "sum_all",
    "mean_all",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax_axis",
    "bce_with_logits",
    "AdamState",
    "adam_step",
    "Adam",
    "grad_check",
]

_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording on the current thread."""

    def __enter__(self) -> "no_grad":
        self._prev = _grad_enabled()
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc) -> bool:
        _local.grad_enabled = self._prev
        return False


class AllocationTracker:
    """Records live/peak/total bytes of tensor buffers created in the context.

    ``live_bytes`` decreases when a tracked tensor is garbage collected, so
    the peak reflects the high-water mark of simultaneously live buffers.
    """

    def __init__(self) -> None:
        self.live_bytes = 0
        self.peak_bytes = 0
        self.max_single_bytes = 0
        self.total_bytes = 0

    def __enter__(self) -> "AllocationTracker":
        _local.tracker = self
        return self

    def __exit__(self, *exc) -> bool:
        _local.tracker = None
        return False

    def _note(self, owner: "Tensor", nbytes: int) -> None:
        self.total_bytes += nbytes
        self.live_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        self.max_single_bytes = max(self.max_single_bytes, nbytes)
        weakref.finalize(owner, self._release, nbytes)

    def _release(self, nbytes: int) -> None:
        self.live_bytes -= nbytes


def _tracker() -> AllocationTracker | None:
    return getattr(_local, "tracker", None)


# vjp: upstream gradient ndarray -> one gradient ndarray (or None) per parent
_Vjp = Callable[[np.ndarray], tuple]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are rank <= 2, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._ctx: tuple[tuple["Tensor", ...], _Vjp] | None = None
        t = _tracker()
        if t is not None:
            t._note(self, arr.nbytes)

    @property
    def shape(self) -> tuple:
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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def validate(self, name: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise DataError(f"{name} contains non-finite values")
        return self

    def backward(self) -> None:
        """Accumulate reverse-mode gradients on every reachable leaf."""
        if self.size != 1:
            raise ContractError(f"backward() requires a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for p in node._ctx[0]:
                    if id(p) not in visited:
                        stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parents, vjp = node._ctx
            for p, pg in zip(parents, vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
            node._ctx = None  # graph is single-use; free as we go

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _from_op(data: np.ndarray, parents: Sequence[Tensor], vjp: _Vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._ctx = (tuple(parents), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to the given (broadcast-source) shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- elementwise and linear-algebra ops -------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    asha, bsha = a.shape, b.shape
    return _from_op(data, (a, b), lambda g: (_unbroadcast(g, asha), _unbroadcast(g, bsha)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    asha, bsha = a.shape, b.shape
    return _from_op(data, (a, b), lambda g: (_unbroadcast(g, asha), _unbroadcast(-g, bsha)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    ad, bd, asha, bsha = a.data, b.data, a.shape, b.shape
    return _from_op(data, (a, b), lambda g: (_unbroadcast(g * bd, asha), _unbroadcast(g * ad, bsha)))


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _from_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _from_op(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(data, tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`."""
    if axis not in (0, 1) or a.ndim != 2:
        raise ShapeError(f"narrow expects a rank-2 tensor and axis 0/1, got {a.shape}, axis {axis}")
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow range [{start}, {start + length}) outside axis of size {a.shape[axis]}")
    idx = (slice(start, start + length), slice(None)) if axis == 0 else (slice(None), slice(start, start + length))
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _from_op(a.data[idx].copy(), (a,), vjp)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows by integer index; backward scatter-adds."""
    if a.ndim != 2:
        raise ShapeError(f"gather_rows expects a rank-2 tensor, got {a.shape}")
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _from_op(a.data[index].copy(), (a,), vjp)


def scatter_rows(src: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
    """Place src rows at unique positions of a zero-filled (num_rows, d) tensor."""
    if src.ndim != 2:
        raise ShapeError(f"scatter_rows expects a rank-2 tensor, got {src.shape}")
    index = np.asarray(index, dtype=np.intp)
    if len(np.unique(index)) != len(index):
        raise ContractError("scatter_rows requires unique target rows")
    data = np.zeros((num_rows, src.shape[1]), dtype=src.dtype)
    data[index] = src.data
    return _from_op(data, (src,), lambda g: (g[index],))


def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return _from_op(np.asarray(a.data.sum(), dtype=dt), (a,), lambda g: (np.full(shape, g, dtype=dt),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    shape, dt = a.shape, a.dtype
    return _from_op(np.asarray(a.data.mean(), dtype=dt), (a,), lambda g: (np.full(shape, g / n, dtype=dt),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _from_op(np.log(ad), (a,), lambda g: (g / ad,))


_AXIS = {"row": 1, "col": 0, "column": 0}


def softmax_axis(a: Tensor, axis: str) -> Tensor:
    """Numerically stabilized softmax along rows or columns.

    For rank-1 input, "row" normalizes the whole vector.
    """
    if axis not in _AXIS:
        raise ContractError(f"axis must be 'row' or 'col', got {axis!r}")
    if a.ndim == 1:
        if axis != "row":
            raise ShapeError("column softmax of a rank-1 tensor is undefined")
        ax = 0
    else:
        ax = _AXIS[axis]
    if a.shape == () or a.shape[ax] == 0:
        raise ShapeError(f"softmax over an empty axis, shape {a.shape}")
    x = a.data
    e = np.exp(x - x.max(axis=ax, keepdims=True))
    out = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return ((g - dot) * out,)

    return _from_op(out, (a,), vjp)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy from logits, log-sum-exp stabilized."""
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits shape mismatch: {logits.shape} vs {y.shape}")
    x = logits.data
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = np.asarray(loss.mean(), dtype=logits.dtype)
    sig = _stable_sigmoid(x)

    def vjp(g):
        return (g * (sig - y) / n,)

    return _from_op(out, (logits,), vjp)


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second-moment accumulators keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; pure in (params, grads, state).

    `params` and `grads` map names to ndarrays; returns new arrays and state.
    """
    t = state.step + 1
    new = AdamState(step=t)
    out: dict = {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise DataError(f"non-finite gradient for parameter {name!r}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        new.m[name] = m
        new.v[name] = v
        mh = m / c1
        vh = v / c2
        out[name] = p - (lr * mh / (np.sqrt(vh) + eps)).astype(p.dtype)
    return out, new


class Adam:
    """Optimizer over a named parameter dict; missing grads count as zero."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        values = {n: p.data for n, p in self.params.items()}
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.params.items()}
        new, self.state = adam_step(values, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        for n, p in self.params.items():
            p.data = new[n]


def grad_check(f: Callable[[Tensor], Tensor], theta: Tensor, h: float = 1e-6) -> float:
    """Max relative error between backward() and central finite differences.

    Perturbs theta in place coordinate by coordinate; theta should be float64
    for the default step size.
    """
    theta.grad = None
    out = f(theta)
    out.backward()
    analytic = theta.grad.astype(np.float64) if theta.grad is not None else np.zeros(theta.shape)
    numeric = np.zeros(theta.shape, dtype=np.float64)
    flat_data = theta.data.reshape(-1)
    flat_num = numeric.reshape(-1)
    with no_grad():
        for i in range(flat_data.size):
            orig = flat_data[i]
            flat_data[i] = orig + h
            fp = float(f(theta).data)
            flat_data[i] = orig - h
            fm = float(f(theta).data)
            flat_data[i] = orig
            flat_num[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
