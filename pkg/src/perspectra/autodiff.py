"""Dense reverse-mode automatic differentiation on float64 numpy arrays.

Operations record themselves on the innermost active :class:`Graph`. Outside
of a graph, ops are plain numpy computations and nothing is retained, which
is what inference uses.

    >>> w = Tensor([3.0], requires_grad=True)
    >>> with Graph() as g:
    ...     loss = (w * w).sum()
    >>> g.backward(loss)[w].tolist()
    [6.0]
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "set_checked",
    "is_checked",
    "checked",
    "concat",
    "relu",
    "tanh",
    "log_softmax",
    "softmax",
    "dropout",
    "cross_entropy_weighted",
    "weighted_nll",
    "gradcheck",
]


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


_CHECKED = False


def set_checked(flag: bool) -> None:
    """Toggle NaN/Inf scanning of every constructed tensor and op output."""
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


@contextlib.contextmanager
def checked(flag: bool = True):
    prev = _CHECKED
    set_checked(flag)
    try:
        yield
    finally:
        set_checked(prev)


def _scan(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {where}")


class Graph:
    """Tape of op records in execution (hence topological) order."""

    _stack: list["Graph"] = []

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Graph":
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Graph._stack.remove(self)

    def _record(self, node: "Tensor") -> None:
        for p in node._parents:
            if p.requires_grad and p._backward is None:
                self._leaves[id(p)] = p
        self.nodes.append(node)

    def backward(self, loss: "Tensor") -> "Gradients":
        if loss.data.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        index = {id(n): i for i, n in enumerate(self.nodes)}
        if id(loss) not in index:
            raise AutodiffError("backward before forward: loss was not produced inside this graph")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: index[id(loss)] + 1]):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self.gradients = {}
        reached = set()
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            else:
                reached.add(key)
            leaf.grad = g
            self.gradients[key] = g
        return Gradients(self.gradients, self._leaves, reached)


class Gradients:
    """Read-only mapping leaf tensor -> gradient array."""

    def __init__(self, grads: dict[int, np.ndarray], leaves: dict[int, "Tensor"], reached=frozenset()):
        self._grads = grads
        self._leaves = leaves
        self._reached = frozenset(reached)

    def reached(self, t: "Tensor") -> bool:
        """Whether any path from the loss led to ``t`` (its zero fill is then not structural)."""
        return id(t) in self._reached

    def __getitem__(self, t: "Tensor") -> np.ndarray:
        return self._grads[id(t)]

    def get(self, t: "Tensor", default=None):
        return self._grads.get(id(t), default)

    def __contains__(self, t: "Tensor") -> bool:
        return id(t) in self._grads

    def __len__(self) -> int:
        return len(self._grads)


def _active_graph() -> Graph | None:
    return Graph._stack[-1] if Graph._stack else None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if _CHECKED:
            _scan(arr, f"construction of {name or 'tensor'}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        out._parents = ()
        out._backward = None
        out.requires_grad = False
        if _CHECKED:
            _scan(data, f"op '{op}'")
        graph = _active_graph()
        if graph is not None and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            graph._record(out)
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- elementwise arithmetic ------------------------------------------
    def _binary_shapes(self, other: "Tensor", op: str) -> None:
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError:
            raise ShapeError(f"{op}: shapes {self.shape} and {other.shape} do not broadcast") from None

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        self._binary_shapes(other, "add")
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._result(a.data + b.data, (a, b), back, "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        self._binary_shapes(other, "sub")
        a, b = self, other

        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._result(a.data - b.data, (a, b), back, "sub")

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        self._binary_shapes(other, "mul")
        a, b = self, other

        def back(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._result(a.data * b.data, (a, b), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        self._binary_shapes(other, "div")
        a, b = self, other

        def back(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._result(a.data / b.data, (a, b), back, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self
        p = float(exponent)

        def back(g):
            return (g * p * np.power(a.data, p - 1.0),)

        return Tensor._result(np.power(a.data, p), (a,), back, "pow")

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return Tensor._result(out_data, (self,), lambda g: (g * out_data,), "exp")

    def log(self) -> "Tensor":
        a = self
        # non-positive inputs are reported by checked mode, not by numpy warnings
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a.data)
        return Tensor._result(out, (a,), lambda g: (g / a.data,), "log")

    def relu(self) -> "Tensor":
        mask = self.data > 0.0
        # subgradient at exactly 0 is 0
        return Tensor._result(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)
        return Tensor._result(out_data, (self,), lambda g: (g * (1.0 - out_data * out_data),), "tanh")

    # -- linear algebra ---------------------------------------------------
    def __matmul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self, other
        if a.ndim not in (1, 2) or b.ndim not in (1, 2):
            raise ShapeError(f"matmul: only 1-D/2-D operands supported, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

        def back(g):
            ad, bd = a.data, b.data
            if ad.ndim == 1 and bd.ndim == 1:
                return g * bd, g * ad
            if ad.ndim == 1:
                return bd @ g, np.outer(ad, g)
            if bd.ndim == 1:
                return np.outer(g, bd), ad.T @ g
            return g @ bd.T, ad.T @ g

        return Tensor._result(np.matmul(a.data, b.data), (a, b), back, "matmul")

    # -- reductions and reshaping ----------------------------------------
    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        a = self

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape).copy(),)

        return Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        try:
            out = a.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
        return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")

    @property
    def T(self) -> "Tensor":
        return Tensor._result(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def flatten(self) -> "Tensor":
        return self.reshape(-1)

    def __getitem__(self, idx) -> "Tensor":
        a = self
        if isinstance(idx, Tensor):
            raise TypeError("index with integers or arrays, not tensors")

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._result(np.array(a.data[idx], dtype=np.float64), (a,), back, "index")

    def take_rows(self, rows) -> "Tensor":
        return self[np.asarray(rows, dtype=np.intp)]


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(data, tensors, back, "concat")


def relu(x: Tensor) -> Tensor:
    return x.relu()


def tanh(x: Tensor) -> Tensor:
    return x.tanh()


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    # inf inputs yield nan here; the non-finite guard reports it
    with np.errstate(invalid="ignore"):
        shifted = x.data - x.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse
        probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), back, "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(x, axis).exp()


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not train or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask


def cross_entropy_weighted(logits: Tensor, target: int, class_weights) -> Tensor:
    """``-class_weights[target] * log_softmax(logits)[target]`` for one K-vector."""
    logits = _as_tensor(logits)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ShapeError(f"cross_entropy_weighted expects a vector of K >= 2 logits, got {logits.shape}")
    k = logits.shape[0]
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (k,):
        raise ShapeError(f"class_weights shape {w.shape} does not match K={k}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError(f"class weights must be positive and finite, got {w.tolist()}")
    t = int(target)
    if not 0 <= t < k:
        raise IndexError(f"target {target} out of range for K={k}")
    return log_softmax(logits)[t] * (-w[t])


def weighted_nll(logits: Tensor, targets, item_weights) -> Tensor:
    """Mean over rows of ``-item_weights[i] * log_softmax(logits[i])[targets[i]]``."""
    if logits.ndim != 2:
        raise ShapeError(f"weighted_nll expects (B, K) logits, got {logits.shape}")
    b, k = logits.shape
    t = np.asarray(targets, dtype=np.intp)
    w = np.asarray(item_weights, dtype=np.float64)
    if t.shape != (b,) or w.shape != (b,):
        raise ShapeError(f"targets {t.shape} / weights {w.shape} do not match batch of {b}")
    if np.any(t < 0) or np.any(t >= k):
        raise IndexError(f"targets out of range for K={k}")
    picked = log_softmax(logits, axis=1)[np.arange(b), t]
    return (picked * (-w)).sum() * (1.0 / b)


def gradcheck(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    max_checks_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current parameter values. The
    relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    with Graph() as g:
        loss = fn()
    grads = g.backward(loss)
    analytic = [np.array(grads[p]) if p in grads else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_checks_per_param is not None and flat.size > max_checks_per_param:
            idxs = (rng or np.random.default_rng(0)).choice(flat.size, max_checks_per_param, replace=False)
        af = a.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            err = abs(af[i] - num) / max(abs(af[i]), abs(num), floor)
            worst = max(worst, err)
    return worst
