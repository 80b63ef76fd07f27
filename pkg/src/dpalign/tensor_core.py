"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only what the tiny policies and the alignment losses need is here. Every
primitive records itself on the active :class:`Tape` (if any) together with a
vector-Jacobian closure; :func:`gradient` replays the tape backwards.

Parameters may carry an extra leading axis (one copy per example). All model
code indexes with ellipses so the same forward pass then yields per-example
gradients from a single backward sweep; see :func:`per_sample_gradients`.
"""

from __future__ import annotations

from collections.abc import Callable, Iterator, Mapping
from typing import Any

import numpy as np

ArrayLike = Any


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, primitive: str, detail: str = ""):
        self.primitive = primitive
        msg = f"non-finite values produced by primitive '{primitive}'"
        super().__init__(f"{msg}: {detail}" if detail else msg)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of (output, inputs, vjp) triples."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def backward(self, root: "Tensor") -> None:
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        root.grad = np.ones_like(root.data)
        for out, inputs, vjp in reversed(self.nodes):
            if out.grad is None:
                continue
            in_grads = vjp(out.grad)
            for t, g in zip(inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=np.float64), t.shape)
                t.grad = g if t.grad is None else t.grad + g


_TAPES: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(name)
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.nodes.append((result, inputs, vjp))
    return result


def _shape_check(name: str, cond: bool, *shapes) -> None:
    if not cond:
        raise ShapeError(f"{name}: incompatible shapes {', '.join(str(s) for s in shapes)}")


def _broadcast_ok(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape}, {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_ok("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_ok("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_ok("mul", a, b)
    return _record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_ok("div", a, b)
    out = a.data / b.data
    return _record("div", out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    _shape_check("matmul", a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2], a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape}, {b.shape}") from None

    def vjp(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _record("matmul", out, (a, b), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _record("log", out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)) without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _record("softplus", out, (a,), lambda g: (g * _stable_sigmoid(x),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_ok("minimum", a, b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _record("minimum", out, (a, b), lambda g: (g * pick_a, g * ~pick_a))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def logsumexp(a, axis=-1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _record("logsumexp", out, (a,), vjp)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    soft = np.exp(out)
    return _record(
        "log_softmax", out, (a,), lambda g: (g - soft * np.sum(g, axis=axis, keepdims=True),)
    )


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _record(
        "softmax", out, (a,), lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    )


def gather(a, index: np.ndarray) -> Tensor:
    """Pick ``a[..., i, index[..., i]]`` along the last axis."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    _shape_check("gather", index.shape == a.shape[:-1], a.shape, index.shape)
    idx = index[..., None]
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros(a.shape)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _record("gather", out, (a,), vjp)


def embed(table, tokens: np.ndarray) -> Tensor:
    """Row lookup. ``table`` is (V, d) or per-example (B, V, d) with tokens (B, T)."""
    table = as_tensor(table)
    tokens = np.asarray(tokens, dtype=np.int64)
    if table.ndim == 2:
        out = table.data[tokens]

        def vjp(g):
            full = np.zeros(table.shape)
            np.add.at(full, tokens, g)
            return (full,)

    elif table.ndim == 3:
        _shape_check("embed", tokens.ndim == 2 and tokens.shape[0] == table.shape[0], table.shape, tokens.shape)
        rows = np.arange(tokens.shape[0])[:, None]
        out = table.data[rows, tokens]

        def vjp(g):
            full = np.zeros(table.shape)
            np.add.at(full, (np.broadcast_to(rows, tokens.shape), tokens), g)
            return (full,)

    else:
        raise ShapeError(f"embed: table must be 2-D or 3-D, got {table.shape}")
    return _record("embed", out, (table,), vjp)


def index_select(a, index) -> Tensor:
    """Basic (non-fancy) indexing / slicing."""
    a = as_tensor(a)
    out = a.data[index]

    def vjp(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _record("index", np.array(out), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=-1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# named parameter / gradient collections


class TensorSet(Mapping):
    """Immutable name -> float64 array map iterated in sorted-name order."""

    def __init__(self, items: Mapping[str, ArrayLike] | None = None, **kwargs: ArrayLike):
        merged = dict(items or {}, **kwargs)
        self._data: dict[str, np.ndarray] = {}
        for key in sorted(merged):
            arr = np.array(merged[key], dtype=np.float64)
            arr.setflags(write=False)
            self._data[key] = arr

    def __getitem__(self, key: str) -> np.ndarray:
        return self._data[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._data.items())
        return f"{type(self).__name__}({inner})"

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._data.items()}

    def size(self) -> int:
        return int(np.sum([v.size for v in self._data.values()]))

    def map(self, fn: Callable[[np.ndarray], np.ndarray]):
        return type(self)({k: fn(v) for k, v in self._data.items()})

    def zip_map(self, other: Mapping[str, np.ndarray], fn):
        if set(other) != set(self._data):
            raise KeyError(f"key mismatch: {sorted(self._data)} vs {sorted(other)}")
        return type(self)({k: fn(v, other[k]) for k, v in self._data.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._data.values()]) if self._data else np.zeros(0)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._data.values())

    def equal(self, other: Mapping[str, np.ndarray]) -> bool:
        """Bitwise equality of keys, shapes and values."""
        return set(other) == set(self._data) and all(
            v.shape == other[k].shape and np.array_equal(v, other[k]) for k, v in self._data.items()
        )

    def merged(self, other: Mapping[str, np.ndarray], prefix: str = ""):
        out = dict(self._data)
        for k, v in other.items():
            name = prefix + k
            if name in out:
                raise KeyError(f"duplicate parameter name {name!r}")
            out[name] = v
        return type(self)(out)

    def select(self, prefix: str, strip: bool = True):
        return type(self)(
            {(k[len(prefix):] if strip else k): v for k, v in self._data.items() if k.startswith(prefix)}
        )


class ParamSet(TensorSet):
    pass


class GradSet(TensorSet):
    pass


def zeros_like(params: Mapping[str, np.ndarray]) -> GradSet:
    return GradSet({k: np.zeros_like(v) for k, v in params.items()})


def global_l2_norm(g: Mapping[str, np.ndarray]) -> float:
    """Euclidean norm of the concatenation of every tensor in ``g``."""
    total = 0.0
    for key in sorted(g):
        v = np.asarray(g[key])
        total += float(np.dot(v.ravel(), v.ravel()))
    return float(np.sqrt(total))


def per_example_l2_norms(g: Mapping[str, np.ndarray]) -> np.ndarray:
    """Norms of per-example gradients stacked along a leading axis."""
    sq = None
    for key in sorted(g):
        v = np.asarray(g[key])
        s = np.sum(v.reshape(v.shape[0], -1) ** 2, axis=1)
        sq = s if sq is None else sq + s
    return np.sqrt(sq)


# ---------------------------------------------------------------------------
# differentiation entry points

LossFn = Callable[[Mapping[str, Tensor], Any], Tensor]


def _leaves(params: Mapping[str, np.ndarray], tile: int | None = None) -> dict[str, Tensor]:
    out = {}
    for k in sorted(params):
        v = np.asarray(params[k], dtype=np.float64)
        if tile is not None:
            v = np.repeat(v[None], tile, axis=0)
        out[k] = Tensor(v, requires_grad=True, name=k)
    return out


def gradient(loss_fn: LossFn, params: Mapping[str, np.ndarray], batch: Any = None) -> tuple[float, GradSet]:
    """Loss and d(loss)/d(params) for the batch mean of ``loss_fn``.

    ``loss_fn(params, batch)`` gets a dict of leaf Tensors and may return a
    scalar or a vector of per-example losses (averaged here).
    """
    leaves = _leaves(params)
    with Tape() as tape:
        out = as_tensor(loss_fn(leaves, batch))
        loss = mean(out) if out.data.size != 1 else reshape(out, ())
    if not np.isfinite(loss.data):
        raise NonFiniteError("loss")
    tape.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in leaves.items()}
    return loss.item(), GradSet(grads)


def per_sample_gradients(
    loss_fn: LossFn, params: Mapping[str, np.ndarray], batch: Any, batch_size: int
) -> tuple[np.ndarray, GradSet]:
    """Per-example losses and gradients, stacked on a leading axis of size B.

    Each parameter is replicated B times and example ``i`` is evaluated against
    copy ``i``; the gradient of the summed loss with respect to copy ``i`` is
    then exactly example ``i``'s gradient. ``loss_fn`` must return a (B,)
    vector and must not mix examples.
    """
    leaves = _leaves(params, tile=batch_size)
    with Tape() as tape:
        losses = as_tensor(loss_fn(leaves, batch))
        _shape_check("per_sample_gradients", losses.shape == (batch_size,), losses.shape, (batch_size,))
        total = sum(losses)
    tape.backward(total)
    grads = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in leaves.items()}
    return losses.data.copy(), GradSet(grads)


def unstack(g: GradSet) -> list[GradSet]:
    """Split a stacked per-example GradSet into one GradSet per example."""
    n = next(iter(g.values())).shape[0] if len(g) else 0
    return [GradSet({k: v[i] for k, v in g.items()}) for i in range(n)]
