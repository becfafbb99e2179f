"""Dense float64 tensors with a tape-based reverse-mode differentiation engine.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient; outside a tape every op is a plain numpy
computation, which is what evaluation code relies on for speed.

Example:
    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss)
    >>> w.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from hierflow.errors import ContractError, DimensionError

_TAPES: list["Tape"] = []


class Tensor:
    """A dense real array that may take part in reverse-mode differentiation."""

    __array_priority__ = 100

    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._recorded = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)

    def backward(self) -> None:
        backward(self)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block are
    appended in execution order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        if self.consumed:
            raise ContractError("tape already consumed by backward(); open a new Tape")
        out._recorded = True
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise ContractError("backward() called twice on the same tape")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
        if not any(n.out is loss for n in self.nodes):
            raise ContractError("loss was not produced on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._recorded:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        self.nodes.clear()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
    for tape in reversed(_TAPES):
        if any(n.out is loss for n in tape.nodes):
            tape.backward(loss)
            return
    raise ContractError("loss is not recorded on any active tape")


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = True
        out.grad = None
        out._recorded = False
        tape.record(out, inputs, vjp)
        return out
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._recorded = False
    return out


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {list(a.shape)} x {list(b.shape)}")
    A, B = a.data, b.data

    def vjp(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _emit(A @ B, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with the bias added to every row."""
    x, weight = constant(x), constant(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: {list(x.shape)} x {list(weight.shape)}")
    X, W = x.data, weight.data
    out = X @ W
    if bias is None:
        def vjp(g):
            return (g @ W.T if x.requires_grad else None, X.T @ g if weight.requires_grad else None)
        return _emit(out, (x, weight), vjp)

    bias = constant(bias)
    if bias.shape != (W.shape[1],):
        raise DimensionError(f"bias shape {list(bias.shape)} does not match output width {W.shape[1]}")
    out = out + bias.data

    def vjp_b(g):
        return (
            g @ W.T if x.requires_grad else None,
            X.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _emit(out, (x, weight, bias), vjp_b)


# ---------------------------------------------------------------------------
# elementwise

def _pair(a, b) -> tuple[Tensor, Tensor]:
    a, b = constant(a), constant(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"incompatible shapes {list(a.shape)} and {list(b.shape)}")
    return a, b


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum())


def _scalar_view(t: Tensor, other: Tensor) -> np.ndarray:
    # size-1 operand broadcast against a larger tensor
    if t.size == 1 and t.shape != other.shape:
        return t.data.reshape(())
    return t.data


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _scalar_view(a, b) + _scalar_view(b, a)

    def vjp(g):
        return (_unbroadcast(g, a) if a.requires_grad else None,
                _unbroadcast(g, b) if b.requires_grad else None)

    return _emit(np.asarray(out, dtype=np.float64), (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _scalar_view(a, b) - _scalar_view(b, a)

    def vjp(g):
        return (_unbroadcast(g, a) if a.requires_grad else None,
                _unbroadcast(-g, b) if b.requires_grad else None)

    return _emit(np.asarray(out, dtype=np.float64), (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    A, B = _scalar_view(a, b), _scalar_view(b, a)

    def vjp(g):
        return (_unbroadcast(g * B, a) if a.requires_grad else None,
                _unbroadcast(g * A, b) if b.requires_grad else None)

    return _emit(np.asarray(A * B, dtype=np.float64), (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    A, B = _scalar_view(a, b), _scalar_view(b, a)
    out = np.asarray(A / B, dtype=np.float64)

    def vjp(g):
        return (_unbroadcast(g / B, a) if a.requires_grad else None,
                _unbroadcast(-g * out / B, b) if b.requires_grad else None)

    return _emit(out, (a, b), vjp)


def _unary(x, fwd: Callable[[np.ndarray], np.ndarray],
           dfn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Tensor:
    x = constant(x)
    X = x.data
    out = fwd(X)

    def vjp(g):
        return (g * dfn(X, out),)

    return _emit(out, (x,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    return _unary(x, _sigmoid, lambda X, y: y * (1.0 - y))


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda X, y: 1.0 - y * y)


def relu(x) -> Tensor:
    return _unary(x, lambda X: np.maximum(X, 0.0), lambda X, y: (X > 0).astype(np.float64))


def square(x) -> Tensor:
    return _unary(x, np.square, lambda X, y: 2.0 * X)


ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "sigmoid": sigmoid, "tanh": tanh, "relu": relu, "square": square,
}


def elementwise(op: str, *inputs) -> Tensor:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# reductions

def sum_(x) -> Tensor:
    x = constant(x)
    shape = x.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return _emit(np.asarray(x.data.sum()), (x,), vjp)


def mean(x) -> Tensor:
    x = constant(x)
    shape, n = x.shape, x.size

    def vjp(g):
        return (np.full(shape, float(g) / n),)

    return _emit(np.asarray(x.data.mean()), (x,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = constant(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {list(x.shape)} ({x.size} elements) to {list(shape)}")
    old = x.shape

    def vjp(g):
        return (g.reshape(old),)

    return _emit(x.data.reshape(shape), (x,), vjp)


def flatten(x) -> Tensor:
    """Collapse all but the leading axis: ``[R, a, b, ...] -> [R, a*b*...]``."""
    x = constant(x)
    if x.ndim == 1:
        return reshape(x, (1, x.size))
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = constant(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _emit(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(constant(t) for t in tensors)
    if not ts:
        raise DimensionError("concat needs at least one tensor")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax):
            raise DimensionError(
                f"concat on axis {axis}: shapes {[list(t.shape) for t in ts]} disagree off-axis")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        out = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            idx = [slice(None)] * ndim
            idx[ax] = slice(int(lo), int(hi))
            out.append(g[tuple(idx)])
        return tuple(out)

    return _emit(np.concatenate([t.data for t in ts], axis=ax), ts, vjp)


def slice_(x, key) -> Tensor:
    """Basic (slice/int) indexing; the gradient lands only in the selected region."""
    x = constant(x)
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (slice, int, np.integer)) and k is not Ellipsis:
            raise ContractError("slice_ supports basic indexing only; use take_rows for gathers")
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _emit(np.array(x.data[key]), (x,), vjp)


def take_rows(x, index) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate in the gradient."""
    x = constant(x)
    idx = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(x.data[idx], (x,), vjp)


def conv1d_same(x, kernel) -> Tensor:
    """Cross-correlate every row of ``x`` (last axis) with a shared 1-D kernel.

    Zero padding keeps the last axis length unchanged; for even kernel
    widths the extra zero goes on the right.
    """
    x, kernel = constant(x), constant(kernel)
    if kernel.ndim != 1:
        raise DimensionError(f"kernel must be 1-D, got {list(kernel.shape)}")
    q, d = kernel.shape[0], x.shape[-1]
    if q > d:
        raise DimensionError(f"kernel width {q} exceeds row length {d}")
    left = (q - 1) // 2
    right = q - 1 - left
    pad = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    xp = np.pad(x.data, pad)
    K = kernel.data
    out = np.zeros(x.shape)
    for j in range(q):
        out += K[j] * xp[..., j:j + d]

    def vjp(g):
        gx = gk = None
        if x.requires_grad:
            gp = np.zeros(xp.shape)
            for j in range(q):
                gp[..., j:j + d] += K[j] * g
            gx = gp[..., left:left + d]
        if kernel.requires_grad:
            gk = np.array([(g * xp[..., j:j + d]).sum() for j in range(q)])
        return gx, gk

    return _emit(out, (x, kernel), vjp)


# ---------------------------------------------------------------------------
# parameters

class ParameterStore:
    """Named, ordered collection of trainable tensors keyed by dotted path."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, path: str, value) -> Tensor:
        if path in self._params:
            raise ContractError(f"duplicate parameter path {path!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._params[k]) for k in sorted(self._params)]

    def subset(self, prefixes: Iterable[str]) -> "ParameterStore":
        prefixes = tuple(prefixes)
        sub = ParameterStore()
        for k, t in self.items():
            if k.startswith(prefixes):
                sub._params[k] = t
        return sub

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            if k not in self._params:
                raise ContractError(f"snapshot has unknown parameter {k!r}")
            if v.shape != self._params[k].shape:
                raise DimensionError(
                    f"snapshot shape {list(v.shape)} for {k!r} != {list(self._params[k].shape)}")
            self._params[k].data = np.array(v, dtype=np.float64)

    def to_json(self) -> str:
        return dump_arrays(self.snapshot())

    def load_json(self, text: str) -> None:
        self.restore(load_arrays(text))

    def save(self, path) -> None:
        from hierflow.io import write_atomic
        write_atomic(path, self.to_json())

    def load(self, path) -> None:
        with open(path) as fh:
            self.load_json(fh.read())


def dump_arrays(arrays: dict[str, np.ndarray]) -> str:
    """Serialize arrays as ``{path: {shape, data}}`` with 17 significant digits."""
    parts = []
    for k in sorted(arrays):
        a = np.asarray(arrays[k], dtype=np.float64)
        data = ", ".join(_fmt(v) for v in a.reshape(-1))
        parts.append(f"  {json.dumps(k)}: {{\"shape\": {json.dumps(list(a.shape))}, \"data\": [{data}]}}")
    return "{\n" + ",\n".join(parts) + "\n}\n"


def _fmt(v: float) -> str:
    if not np.isfinite(v):
        raise ContractError(f"cannot serialize non-finite value {v}")
    return format(float(v), ".17g")


def load_arrays(text: str) -> dict[str, np.ndarray]:
    raw = json.loads(text)
    out = {}
    for k, entry in raw.items():
        a = np.array(entry["data"], dtype=np.float64)
        out[k] = a.reshape(entry["shape"])
    return out


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction; parameters are visited in sorted path order."""

    def __init__(self, params: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        items = self.params.items()
        for path, p in items:
            if p.grad is None:
                raise ContractError(f"parameter {path!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for path, p in items:
            g = p.grad
            m = self.m.get(path)
            v = self.v.get(path)
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            self.m[path], self.v[path] = m, v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        out = {"__t__": np.array([float(self.t)])}
        for k in self.m:
            out["m." + k] = self.m[k]
            out["v." + k] = self.v[k]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["__t__"][0])
        self.m = {k[2:]: v.copy() for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: v.copy() for k, v in state.items() if k.startswith("v.")}


def optimizer_step(optimizer: Adam) -> None:
    optimizer.step()


def global_grad_norm(params: ParameterStore) -> float:
    return float(np.sqrt(sum(float(np.sum(t.grad * t.grad)) for _, t in params.items()
                             if t.grad is not None)))


def clip_grad_norm(params: ParameterStore, max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, t in params.items():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm
