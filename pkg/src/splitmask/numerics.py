"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op computes its result with numpy, checks it for NaN/Inf,
and appends one record to the active :class:`Tape`.  :func:`backward` walks the
tape in reverse, so the execution order doubles as the topological order.

Broadcasting is deliberately narrow: binary ops accept equal shapes or a
scalar operand.  Biases and positional tables go through :func:`add_bias`,
which adds a tensor over the *trailing* axes of another.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError",
    "NumericalError",
    "UsageError",
    "Tensor",
    "Tape",
    "tensor",
    "precision",
    "default_dtype",
    "no_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "gelu",
    "elementwise",
    "add_bias",
    "softmax",
    "layernorm",
    "cross_entropy_logits",
    "cross_entropy_soft",
    "mean_pool",
    "l2_normalize",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take",
    "gather_rows",
    "backward",
    "grad_check",
    "GradCheckReport",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericalError(FloatingPointError):
    """A forward computation produced NaN or Inf."""


class UsageError(RuntimeError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.grad_enabled = True
        self.tapes: list[Tape] = []
        self.default_tape: Tape | None = None


_state = _State()


def default_dtype():
    return _state.dtype


@contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype}")
    previous, _state.dtype = _state.dtype, dtype
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_grad():
    previous, _state.grad_enabled = _state.grad_enabled, False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """An n-dimensional float array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_record", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        dtype = dtype or _state.dtype
        arr = np.array(data, dtype=dtype, copy=True)
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._record: _Record | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._record = None
        return t

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

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise UsageError(f"item() on tensor of shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self):
        return tsum(self)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


@dataclass(eq=False)
class _Record:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered log of executed differentiable ops.

    Used as a context manager it becomes the active tape for the current
    thread; outside any ``with Tape()`` block a per-thread default tape is
    used.  Records are appended in execution order, which is a valid
    topological order because an op can only consume tensors that exist.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _state.tapes.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        for rec in self.records:
            rec.output._record = None
        self.records.clear()

    def ops(self) -> list[str]:
        return [r.op for r in self.records]


def current_tape() -> Tape:
    if _state.tapes:
        return _state.tapes[-1]
    if _state.default_tape is None:
        _state.default_tape = Tape()
    return _state.default_tape


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=_state.dtype))


def _emit(op: str, data: np.ndarray, inputs: Iterable[Tensor], grad_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values (shape {data.shape})")
    out = Tensor._wrap(data)
    inputs = tuple(inputs)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec = _Record(op, out, inputs, grad_fn)
        current_tape().records.append(rec)
        out._record = rec
    return out


def _unscalar(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # gradient for a scalar operand that was broadcast against a full tensor
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 and a.ndim <= b.ndim or b.size == 1 and b.ndim <= a.ndim:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- linear ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Accepts ``[m, k] @ [k, n]``, a stack ``[..., m, k] @ [k, n]`` sharing the
    right operand, and stacks with identical leading extents.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    if shared:
        # fold leading axes into rows: one GEMM instead of a stack of small ones
        A2 = A.reshape(-1, A.shape[-1])
        out = (A2 @ B).reshape(A.shape[:-1] + (B.shape[1],))

        def grad_fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ B.T).reshape(A.shape), A2.T @ g2

    else:
        out = A @ B

        def grad_fn(g):
            return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    return _emit("matmul", out, (a, b), grad_fn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unscalar(g, sa), _unscalar(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unscalar(g, sa), _unscalar(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (_unscalar(g * B, A.shape), _unscalar(g * A, B.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _emit("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gauss_cdf_pdf(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pdf = np.exp(-0.5 * X * X) * X.dtype.type(_INV_SQRT_2PI)
    cdf = 0.5 * (1.0 + erf(X * X.dtype.type(_SQRT_HALF)))
    return cdf.astype(X.dtype, copy=False), pdf


def gelu(x: Tensor) -> Tensor:
    """``x * Phi(x)`` with the exact (erf-based) Gaussian CDF."""
    x = _as_tensor(x)
    X = x.data
    cdf, pdf = _gauss_cdf_pdf(X)
    out = (X * cdf).astype(X.dtype, copy=False)

    def grad_fn(g):
        return ((g * (cdf + X * pdf)).astype(X.dtype, copy=False),)

    return _emit("gelu", out, (x,), grad_fn)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale, "gelu": gelu}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch one of ``add, sub, mul, scale, gelu`` by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the trailing axes of ``x``."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add_bias: {b.shape} does not match trailing axes of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return _emit("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead) if lead else g))


# ----------------------------------------------------------- nonlinear ops


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), grad_fn)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply ``gain``/``bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: gain/bias {gain.shape}/{bias.shape} vs features {d}")
    if eps <= 0:
        raise UsageError("layernorm eps must be positive")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    G = gain.data
    lead = tuple(range(X.ndim - 1))

    def grad_fn(g):
        gx = g * G
        gx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layernorm", xhat * G + bias.data, (x, gain, bias), grad_fn)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy_logits: logits {logits.shape}, targets {t.shape}")
    n, v = logits.shape
    if n == 0:
        raise DimensionError("cross_entropy_logits on an empty batch")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target out of range [0, {v})")
    Z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(Z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - Z[rows, t]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def grad_fn(g):
        p = np.exp(Z - lse[:, None])
        p[rows, t] -= 1.0
        return (p * (g / n),)

    return _emit("cross_entropy", loss, (logits,), grad_fn)


def cross_entropy_soft(logits: Tensor, probs) -> Tensor:
    """Mean over rows of ``-sum_c probs[c] * log softmax(logits)[c]`` (soft targets)."""
    logits = _as_tensor(logits)
    P = np.asarray(probs, dtype=logits.dtype)
    if logits.ndim != 2 or P.shape != logits.shape:
        raise DimensionError(f"cross_entropy_soft: logits {logits.shape}, targets {P.shape}")
    n = logits.shape[0]
    Z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    loss = np.asarray(-(P * logp).sum() / n, dtype=logits.dtype)

    def grad_fn(g):
        return ((np.exp(logp) * P.sum(axis=1, keepdims=True) - P) * (g / n),)

    return _emit("cross_entropy_soft", loss, (logits,), grad_fn)


def mean_pool(x: Tensor) -> Tensor:
    """Average over the sequence axis: ``[n, d] -> [d]`` or ``[B, n, d] -> [B, d]``."""
    x = _as_tensor(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise DimensionError(f"mean_pool needs a nonempty sequence, got {x.shape}")
    n = x.shape[-2]
    shape = x.shape
    return _emit(
        "mean_pool",
        x.data.mean(axis=-2),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, -2) / n, shape).copy(),),
    )


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along the last axis."""
    if eps <= 0:
        raise UsageError("l2_normalize eps must be positive")
    x = _as_tensor(x)
    X = x.data
    norm = np.sqrt((X * X).sum(axis=-1, keepdims=True))
    small = norm < eps
    denom = np.where(small, eps, norm)
    y = X / denom

    def grad_fn(g):
        radial = np.where(small, 0.0, (g * y).sum(axis=-1, keepdims=True))
        return ((g - y * radial) / denom,)

    return _emit("l2_normalize", y, (x,), grad_fn)


# ----------------------------------------------------------- shape plumbing


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=g.dtype),))


def mean(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        n = x.size
        return _emit("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),))
    n = shape[axis]
    return _emit(
        "mean",
        x.data.mean(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),),
    )


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _emit("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in parts)


def _getitem(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.dtype
    out = x.data[key]
    basic = _is_basic_index(key)

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _emit("getitem", np.array(out, copy=True), (x,), grad_fn)


def take(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]`` for a 2-D table; repeated indices accumulate."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: index out of range [0, {n})")
    shape = table.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *shape[1:]))
        return (full,)

    return _emit("take", table.data[idx], (table,), grad_fn)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Per-item row selection: ``out[b, j] = x[b, indices[b, j]]``."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim < 2 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_rows: x {x.shape}, indices {idx.shape}")
    n = x.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range [0, {n})")
    B = x.shape[0]
    rows = np.arange(B)[:, None]
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        flat = full.reshape(B * n, *shape[2:])
        np.add.at(flat, (rows * n + idx).reshape(-1), g.reshape(-1, *shape[2:]))
        return (full,)

    return _emit("gather_rows", x.data[rows, idx], (x,), grad_fn)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Consumes the active tape: records are visited once, newest first, and the
    tape is cleared afterwards.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise UsageError(f"backward needs a scalar tensor, got shape {getattr(loss, 'shape', None)}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring gradients")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss.is_leaf:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = current_tape()
    records = tape.records
    try:
        start = next(i for i in range(len(records) - 1, -1, -1) if records[i] is loss._record)
    except StopIteration:
        raise UsageError("loss is not on the active tape") from None

    pending: dict[int, np.ndarray] = {id(loss): seed}
    for rec in reversed(records[: start + 1]):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                gi = gi.astype(inp.dtype, copy=False)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi
    tape.clear()


# ---------------------------------------------------------------- gradcheck


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst: str = ""
    n_coords: int = 0
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:g}, {self.n_coords} coords, worst {self.worst})"


def grad_check(f, x, h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare ``backward`` against central differences for every coordinate.

    ``x`` is a Tensor, a list of Tensors, or a dict name -> Tensor; ``f`` is
    called with no arguments and must return a scalar Tensor built from them.
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0:
        raise UsageError("step h must be positive")
    if isinstance(x, Tensor):
        named = {"x": x}
    elif isinstance(x, dict):
        named = dict(x)
    else:
        named = {f"x{i}": t for i, t in enumerate(x)}

    for t in named.values():
        t.requires_grad = True
        t.grad = None
    with Tape():
        out = f()
        if not isinstance(out, Tensor) or out.size != 1:
            raise UsageError("grad_check needs a scalar-valued function")
        if out.requires_grad:
            backward(out)

    report = GradCheckReport(0.0, tol)
    with no_grad():
        for name, t in named.items():
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                if err > worst:
                    worst = err
                if err > report.max_rel_error:
                    report.max_rel_error = err
                    report.worst = f"{name}[{i}]"
            report.errors[name] = worst
            report.n_coords += flat.size
    return report
