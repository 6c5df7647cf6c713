"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Only the operations needed by the graph-attention decoder and actor are
provided.  Every op checks its output for NaN/Inf and records a backward
closure on the output tensor; :func:`backward` walks the resulting DAG once
in reverse topological order.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading
from collections.abc import Iterable, Iterator, Sequence
from typing import Callable

import numpy as np

from .errors import ContractError, DimensionError, NumericError

LAYER_NORM_EPS = 1e-5
LEAKY_SLOPE = 0.2

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them on the tape (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An immutable float64 array plus the tape entry that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        data = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        data.setflags(write=False)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flattened values."""
        return self.data.ravel()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite output from {kind}")
    t = Tensor.__new__(Tensor)
    out = np.asarray(out, dtype=np.float64)
    out.setflags(write=False)
    t.data = out
    t.grad = None
    t.name = None
    t.op = kind
    track = grad_enabled() and any(p.requires_grad for p in parents)
    t.requires_grad = track
    if track:
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t._parents = ()
        t._backward = None
    return t


def _check_index(idx, size: int, what: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"{what} must be a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise DimensionError(f"{what} out of range for size {size}")
    return idx


# ---------------------------------------------------------------------------
# forward ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return g @ B.T, A.T @ g

    return _record("matmul", A @ B, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias row broadcast over rows of ``a``."""
    if a.shape == b.shape:
        return _record("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        return _record("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"add shapes {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes {a.shape} - {b.shape}")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a column (n, 1) broadcast across columns of ``a``."""
    A, B = a.data, b.data
    if a.shape == b.shape:
        return _record("mul", A * B, (a, b), lambda g: (g * B, g * A))
    if A.ndim == 2 and B.shape == (A.shape[0], 1):
        return _record("mul", A * B, (a, b), lambda g: (g * B, (g * A).sum(axis=1, keepdims=True)))
    raise DimensionError(f"mul shapes {a.shape} * {b.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of nothing")
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    cuts = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", out, tuple(tensors), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from None
    old = a.shape
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)
    return _record("leaky_relu", a.data * factor, (a,), lambda g: (g * factor,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    x = a.data
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) evaluated without overflow for large |x|."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _record("log_sigmoid", out, (a,), lambda g: (g * _sigmoid(-x),))


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each row of a 2-D tensor, then apply per-feature gain and shift."""
    X = x.data
    if X.ndim != 2 or gain.shape != (X.shape[1],) or shift.shape != (X.shape[1],):
        raise DimensionError(f"layer_norm shapes x={x.shape} gain={gain.shape} shift={shift.shape}")
    mu = X.mean(axis=1, keepdims=True)
    centred = X - mu
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=1, keepdims=True) + eps)
    xhat = centred * inv_std
    G = gain.data

    def back(g):
        dxhat = g * G
        dx = inv_std * (
            dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("layer_norm", xhat * G + shift.data, (x, gain, shift), back)


def segment_softmax(a: Tensor, segments, n_segments: int) -> Tensor:
    """Softmax of a score vector within each group of equal segment id."""
    x = a.data.reshape(-1)
    seg = _check_index(segments, n_segments, "segment ids")
    if seg.shape[0] != x.shape[0]:
        raise DimensionError(f"segment_softmax: {x.shape[0]} scores, {seg.shape[0]} ids")
    peak = np.full(n_segments, -np.inf)
    np.maximum.at(peak, seg, x)
    e = np.exp(x - peak[seg])
    y = e / np.bincount(seg, weights=e, minlength=n_segments)[seg]
    shape = a.shape

    def back(g):
        g = g.reshape(-1)
        inner = np.bincount(seg, weights=g * y, minlength=n_segments)
        return ((y * (g - inner[seg])).reshape(shape),)

    return _record("softmax", y.reshape(shape), (a,), back)


def softmax(a: Tensor) -> Tensor:
    """Softmax over every entry of ``a`` (a single group)."""
    return segment_softmax(a, np.zeros(a.data.size, dtype=np.intp), 1)


def gather_rows(a: Tensor, index) -> Tensor:
    idx = _check_index(index, a.shape[0], "row index")
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record("gather_rows", a.data[idx], (a,), back)


def segment_sum(a: Tensor, segments, n_segments: int) -> Tensor:
    seg = _check_index(segments, n_segments, "segment ids")
    if seg.shape[0] != a.shape[0]:
        raise DimensionError(f"segment_sum: {a.shape[0]} rows, {seg.shape[0]} ids")
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, seg, a.data)
    return _record("segment_sum", out, (a,), lambda g: (g[seg],))


def segment_mean(a: Tensor, segments, n_segments: int) -> Tensor:
    """Mean of the rows in each segment (graph-level mean pooling over nodes)."""
    seg = _check_index(segments, n_segments, "segment ids")
    if seg.shape[0] != a.shape[0]:
        raise DimensionError(f"segment_mean: {a.shape[0]} rows, {seg.shape[0]} ids")
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    if np.any(counts == 0):
        raise DimensionError("segment_mean over an empty segment")
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, seg, a.data)
    denom = counts.reshape((-1,) + (1,) * (a.data.ndim - 1))
    return _record("segment_mean", out / denom, (a,), lambda g: ((g / denom)[seg],))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _record("mean", a.data.mean(), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


# name -> callable, for op-kind dispatch
FORWARD_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "concat": concat,
    "reshape": reshape,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "layer_norm": layer_norm,
    "softmax": segment_softmax,
    "sigmoid": sigmoid,
    "log": log,
    "log_sigmoid": log_sigmoid,
    "mean_nodes": segment_mean,
    "gather_rows": gather_rows,
    "segment_sum": segment_sum,
    "sum": tsum,
    "mean": tmean,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = FORWARD_OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf tensor."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tracked tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# parameters and optimiser


class ParamStore:
    """Ordered mapping of parameter name to a trainable leaf tensor."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter {name!r}")
        t = Tensor(values, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def assign(self, name: str, values: np.ndarray) -> None:
        """Replace a parameter's values, keeping its tensor identity."""
        t = self._params[name]
        arr = np.array(values, dtype=np.float64)
        if arr.shape != t.shape:
            raise DimensionError(f"{name}: new shape {arr.shape} != {t.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values assigned to {name}")
        arr.setflags(write=False)
        t.data = arr

    def copy(self) -> ParamStore:
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data)
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict[str, dict]:
        return {name: {"shape": list(t.shape), "values": t.data.ravel().tolist()} for name, t in self._params.items()}

    @classmethod
    def from_dict(cls, payload: dict[str, dict]) -> ParamStore:
        out = cls()
        for name, entry in payload.items():
            values = np.array(entry["values"], dtype=np.float64)
            out.add(name, values.reshape(entry["shape"]))
        return out


class Adam:
    """Adaptive-moment optimiser with bias correction; moments persist across steps."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros(p.shape) for name, p in params.items()}
        self.v = {name: np.zeros(p.shape) for name, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            self.params.assign(name, p.data - update)
