"""Dense tensors with tape-based reverse-mode autodiff, Adam, clipping and a seeded RNG.

Only the primitives the memory-network model needs are provided.  Elementwise
primitives follow numpy broadcasting; their backward passes sum gradients back
to the input shapes.

Usage::

    store = ParamStore({"w": Tensor(np.ones((2, 3)), requires_grad=True)})
    with Tape() as tape:
        loss = tsum(matmul(store["w"], x))
    grads = backward(tape, loss, store.params)
    adam_step(store, grads, lr=0.01)
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteGradientError",
    "Tensor",
    "Tape",
    "ParamStore",
    "precision",
    "default_dtype",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "sigmoid",
    "tanh",
    "softmax",
    "concat",
    "tsum",
    "mean",
    "square_diff",
    "log",
    "clamp",
    "take",
    "pick",
    "reshape",
    "broadcast_to",
    "detach",
    "backward",
    "adam_step",
    "clip_global_norm",
    "seeded_rng",
    "glorot_uniform",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient handed to the optimizer contains NaN or inf."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


_DTYPES: list[type] = [np.float32]


def default_dtype() -> type:
    return _DTYPES[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors.

    Gradient checks run under ``precision(np.float64)``; everything else stays
    in float32.
    """
    _DTYPES.append(dtype)
    try:
        yield
    finally:
        _DTYPES.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


Vjp = Callable[[np.ndarray], np.ndarray]


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in creation order, which is a topological order of the
    computation graph.  Primitives are recorded only while a tape is active
    (inside ``with Tape():``, per thread) and only if some input requires a
    gradient.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[tuple[Tensor, Vjp], ...]]] = []

    def __enter__(self) -> "Tape":
        Tape._stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def _stack(cls) -> list["Tape"]:
        stack = getattr(cls._local, "stack", None)
        if stack is None:
            stack = cls._local.stack = []
        return stack

    @classmethod
    def current(cls) -> "Tape | None":
        stack = cls._stack()
        return stack[-1] if stack else None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


@contextlib.contextmanager
def no_grad():
    """Suspend recording on this thread, e.g. for evaluation passes inside a training step."""
    stack = Tape._stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _emit(data: np.ndarray, edges: Sequence[tuple[Tensor, Vjp]]) -> Tensor:
    tape = Tape.current()
    live = tuple((t, fn) for t, fn in edges if t.requires_grad)
    out = Tensor(data, dtype=data.dtype)
    if tape is not None and live:
        out.requires_grad = True
        tape.nodes.append((out, live))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _emit(
        a.data + b.data,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _emit(
        a.data - b.data,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: -_unbroadcast(g, b.shape))),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _emit(
        a.data * b.data,
        (
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, ((a, lambda g: -g),))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None
    A, B = a.data, b.data
    if B.ndim == 2 and A.ndim > 2:
        # stacked rows times one matrix: fold the batch axes into a single GEMM
        k = A.shape[-1]
        out = (A.reshape(-1, k) @ B).reshape(A.shape[:-1] + (B.shape[1],))
        return _emit(
            out,
            (
                (a, lambda g: (g.reshape(-1, g.shape[-1]) @ B.T).reshape(A.shape)),
                (b, lambda g: A.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])),
            ),
        )
    if A.ndim == 2 and B.ndim == 3:
        lead = (0, 2)
        return _emit(
            A @ B,
            (
                (a, lambda g: np.tensordot(g, B, axes=(lead, lead))),
                (b, lambda g: A.T @ g),
            ),
        )
    return _emit(
        A @ B,
        (
            (a, lambda g: _unbroadcast(g @ np.swapaxes(B, -1, -2), a.shape)),
            (b, lambda g: _unbroadcast(np.swapaxes(A, -1, -2) @ g, b.shape)),
        ),
    )


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got shape {a.shape}")
    return _emit(np.swapaxes(a.data, -1, -2), ((a, lambda g: np.swapaxes(g, -1, -2)),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # exp(-log(1 + e^-x)) never overflows
    s = np.exp(-np.logaddexp(0, -x)).astype(x.dtype, copy=False)
    return _emit(s, ((a, lambda g: g * s * (1 - s)),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _emit(t, ((a, lambda g: g * (1 - t * t)),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (rows by default)."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _emit(s, ((a, lambda g: s * (g - (g * s).sum(axis=axis, keepdims=True))),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[k] != ref[k] for k in range(nd) if k != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def piece(k: int) -> Vjp:
        return lambda g: np.split(g, bounds, axis=ax)[k]

    return _emit(
        np.concatenate([t.data for t in tensors], axis=ax),
        tuple((t, piece(k)) for k, t in enumerate(tensors)),
    )


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _emit(np.asarray(out), ((a, vjp),))


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def square_diff(a, b) -> Tensor:
    """Elementwise ``(a - b) ** 2``."""
    a, b = _pair(a, b)
    _broadcast_shape("square_diff", a, b)
    d = a.data - b.data
    return _emit(
        d * d,
        (
            (a, lambda g: _unbroadcast(2 * d * g, a.shape)),
            (b, lambda g: _unbroadcast(-2 * d * g, b.shape)),
        ),
    )


def log(a: Tensor) -> Tensor:
    return _emit(np.log(a.data), ((a, lambda g: g / a.data),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; the gradient is zero where clipping was active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), ((a, lambda g: g * inside),))


def take(a: Tensor, index) -> Tensor:
    """Gather along axis 0: ``a[index]``."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take: index out of range for axis of length {a.shape[0]}")

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return _emit(a.data[idx], ((a, vjp),))


def pick(a: Tensor, index) -> Tensor:
    """For a 2-D tensor return ``a[b, index[b]]`` for every row ``b``."""
    idx = np.asarray(index, dtype=np.intp)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: expected (B, K) with B indices, got {a.shape} and {idx.shape}")
    rows = np.arange(a.shape[0])

    def vjp(g):
        out = np.zeros_like(a.data)
        out[rows, idx] = g
        return out

    return _emit(a.data[rows, idx], ((a, vjp),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _emit(out, ((a, lambda g: g.reshape(a.shape)),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _emit(out, ((a, lambda g: _unbroadcast(g, a.shape)),))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data, dtype=a.data.dtype)


def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns a gradient per entry of ``params`` (zeros where unreachable).
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, edges in reversed(tape.nodes):
        g = adjoint.pop(id(out), None)
        if g is None:
            continue
        for parent, vjp in edges:
            contrib = vjp(g)
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + contrib
            else:
                adjoint[key] = contrib
    grads = {}
    for name, p in params.items():
        g = adjoint.get(id(p))
        grads[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype).reshape(p.shape)
    return grads


class ParamStore:
    """Named trainable tensors plus Adam moments and a step counter."""

    def __init__(self, params: Mapping[str, Tensor]):
        self.params: dict[str, Tensor] = {}
        for name, t in params.items():
            t.requires_grad = True
            t.name = name
            self.params[name] = t
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.step = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def copy(self) -> "ParamStore":
        dup = ParamStore({k: Tensor(t.data.copy(), dtype=t.data.dtype) for k, t in self.params.items()})
        dup.m = {k: v.copy() for k, v in self.m.items()}
        dup.v = {k: v.copy() for k, v in self.v.items()}
        dup.step = self.step
        return dup


def adam_step(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float = 0.003,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> ParamStore:
    """Bias-corrected Adam update, in place; returns ``store``.

    All gradients are validated before any parameter changes.
    """
    if set(grads) != set(store.params):
        missing = set(store.params) ^ set(grads)
        raise KeyError(f"adam_step: gradient names do not match parameters: {sorted(missing)}")
    for name, g in grads.items():
        if g.shape != store.params[name].shape:
            raise ShapeError(f"adam_step: gradient {name!r} has shape {g.shape}, parameter {store.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1**store.step
    c2 = 1.0 - b2**store.step
    for name, p in store.params.items():
        g = grads[name]
        dt = p.data.dtype
        m = (b1 * store.m[name] + (1 - b1) * g).astype(dt, copy=False)
        v = (b2 * store.v[name] + (1 - b2) * (g * g)).astype(dt, copy=False)
        store.m[name], store.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        # fresh array: readers holding the old one keep a consistent snapshot
        p.data = (p.data - update).astype(dt, copy=False)
    return store


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by ``max_norm / norm`` if their joint L2 norm exceeds ``max_norm``.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total <= max_norm:
        return dict(grads), total
    scale = max_norm / total
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}, total


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical draws for identical seeds on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))


def glorot_uniform(rng: np.random.Generator, shape: Iterable[int]) -> np.ndarray:
    shape = tuple(shape)
    limit = math.sqrt(6.0 / (shape[0] + shape[-1]))
    return rng.uniform(-limit, limit, size=shape).astype(default_dtype())
