"""Minimal float64 tensor math with reverse-mode gradients.

Only the operations the tiny transformer stacks and the KG embedding
models need live here: dense 2-D linear algebra, a handful of
elementwise functions, reductions, row gather/scatter, softmax, layer
norm and scaled dot-product attention. Everything is float64, and every
op checks that its output is finite (NaN/Inf raises instead of
propagating silently).

Gradients flow through a per-result list of (parent, pullback) pairs;
``Tensor.backward`` walks the graph in reverse topological order and
accumulates into ``.grad``. There is no broadcasting beyond adding a
1-D bias across the rows of a 2-D matrix.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


_grad_enabled = True


class no_grad:
    """Context manager that skips graph construction (forward only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f64(data)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"tensor {name or ''} contains non-finite values")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self.name = name

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        head = f"Tensor(shape={self.shape}"
        if self.name:
            head += f", name={self.name!r}"
        return head + ")"

    # -- gradient machinery ---------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar result."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.grad is None:
                continue
            for parent, pullback in node._parents:
                contrib = pullback(node.grad)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contrib

    # -- operator sugar -------------------------------------------------------

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A leaf tensor that an optimizer may update.

    ``trainable=False`` freezes the value: no graph is recorded through
    it, so it never shows up in gradients, optimizer steps or
    finite-difference reports.
    """

    __slots__ = ()

    def __init__(self, data, name: str | None = None, trainable: bool = True):
        super().__init__(data, requires_grad=trainable, name=name)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.requires_grad = bool(flag)


def constant(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents) -> Tensor:
    """Build an op result, recording pullbacks for parents that need them."""
    # a single reduction is far cheaper than isfinite().all(); any NaN or
    # Inf in the block poisons the sum
    total = float(np.sum(data))
    if total != total or total in (float("inf"), float("-inf")):
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("operation produced non-finite values")
    live = (
        tuple((p, fn) for p, fn in parents if p.requires_grad)
        if _grad_enabled
        else ()
    )
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = bool(live)
    out._parents = live
    out.name = None
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _bias_broadcast_ok(a_shape, b_shape) -> bool:
    # (T, D) op (D,) row broadcast is the only broadcast we allow
    return len(a_shape) == 2 and len(b_shape) == 1 and a_shape[1] == b_shape[0]


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        out = a.data + b.data
        da = (lambda g: g) if a.shape == out.shape else (lambda g: np.sum(g))
        db = (lambda g: g) if b.shape == out.shape else (lambda g: np.sum(g))
        return _result(out, [(a, da), (b, db)])
    if _bias_broadcast_ok(a.shape, b.shape):
        return _result(a.data + b.data, [(a, lambda g: g), (b, lambda g: g.sum(axis=0))])
    if _bias_broadcast_ok(b.shape, a.shape):
        return _result(a.data + b.data, [(a, lambda g: g.sum(axis=0)), (b, lambda g: g)])
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    return add(a, scale(_coerce(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        out = a.data * b.data
        da = (lambda g: g * b.data) if a.shape == out.shape else (lambda g: np.sum(g * b.data))
        db = (lambda g: g * a.data) if b.shape == out.shape else (lambda g: np.sum(g * a.data))
        return _result(out, [(a, da), (b, db)])
    raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        out = a.data / b.data
        da = (lambda g: g / b.data) if a.shape == out.shape else (lambda g: np.sum(g / b.data))
        db = (
            (lambda g: -g * a.data / (b.data * b.data))
            if b.shape == out.shape
            else (lambda g: np.sum(-g * a.data / (b.data * b.data)))
        )
        return _result(out, [(a, da), (b, db)])
    raise DimensionError(f"div: incompatible shapes {a.shape} and {b.shape}")


def scale(x, c: float) -> Tensor:
    x = _coerce(x)
    c = float(c)
    return _result(x.data * c, [(x, lambda g: g * c)])


def exp(x) -> Tensor:
    x = _coerce(x)
    out = np.exp(x.data)
    return _result(out, [(x, lambda g: g * out)])


def log(x) -> Tensor:
    x = _coerce(x)
    return _result(np.log(x.data), [(x, lambda g: g / x.data)])


def sqrt(x) -> Tensor:
    x = _coerce(x)
    out = np.sqrt(x.data)
    return _result(out, [(x, lambda g: g * 0.5 / out)])


def sin(x) -> Tensor:
    x = _coerce(x)
    return _result(np.sin(x.data), [(x, lambda g: g * np.cos(x.data))])


def absolute(x) -> Tensor:
    x = _coerce(x)
    return _result(np.abs(x.data), [(x, lambda g: g * np.sign(x.data))])


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    out = 1.0 / (1.0 + np.exp(-np.abs(x.data)))
    out = np.where(x.data >= 0, out, 1.0 - out)
    return _result(out, [(x, lambda g: g * out * (1.0 - out))])


def softplus(x) -> Tensor:
    """log(1 + e^x), computed stably."""
    x = _coerce(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = 1.0 / (1.0 + np.exp(-np.abs(x.data)))
    sig = np.where(x.data >= 0, sig, 1.0 - sig)
    return _result(out, [(x, lambda g: g * sig)])


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU; smooth everywhere, which keeps the
    finite-difference checks clean."""
    x = _coerce(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def pullback(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)

    return _result(out, [(x, pullback)])


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(x, axis: int | None = None) -> Tensor:
    x = _coerce(x)
    ax = None if axis is None else axis % x.ndim
    out = np.sum(x.data, axis=ax)

    def pullback(g):
        if ax is None:
            return np.full_like(x.data, g)
        return np.expand_dims(g, ax).repeat(x.shape[ax], axis=ax)

    return _result(out, [(x, pullback)])


def tmean(x, axis: int | None = None) -> Tensor:
    x = _coerce(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis), 1.0 / n)


def logsumexp(x) -> Tensor:
    """log(sum(exp(x))) over the whole (1-D) input, stable."""
    x = _coerce(x)
    m = np.max(x.data)
    out = m + np.log(np.sum(np.exp(x.data - m)))
    soft = np.exp(x.data - out)
    return _result(np.asarray(out), [(x, lambda g: g * soft)])


def logsumexp_rows(x) -> Tensor:
    """Row-wise stable log-sum-exp of a 2-D input; returns (rows,)."""
    x = _coerce(x)
    if x.ndim != 2:
        raise DimensionError(f"logsumexp_rows: expected 2-D, got {x.shape}")
    m = np.max(x.data, axis=1, keepdims=True)
    out = (m + np.log(np.sum(np.exp(x.data - m), axis=1, keepdims=True))).reshape(-1)
    soft = np.exp(x.data - out[:, None])
    return _result(out, [(x, lambda g: g[:, None] * soft)])


# ---------------------------------------------------------------------------
# shape / indexing ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        out = a.data @ b.data
        return _result(out, [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)])
    if a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        out = a.data @ b.data
        return _result(out, [(a, lambda g: np.outer(g, b.data)), (b, lambda g: a.data.T @ g)])
    if a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
        out = a.data @ b.data
        return _result(out, [(a, lambda g: b.data @ g), (b, lambda g: np.outer(a.data, g))])
    raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")


def transpose(x) -> Tensor:
    x = _coerce(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D, got {x.shape}")
    return _result(x.data.T.copy(), [(x, lambda g: g.T)])


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: empty input")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    parents = []
    offset = 0
    for t in tensors:
        width = t.shape[axis]
        lo, hi = offset, offset + width

        def pullback(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        parents.append((t, pullback))
        offset = hi
    return _result(out, parents)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _coerce(x)
    out = x.data[start:stop].copy()

    def pullback(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return full

    return _result(out, [(x, pullback)])


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _coerce(x)
    if x.ndim != 2:
        raise DimensionError(f"slice_cols: expected 2-D, got {x.shape}")
    out = x.data[:, start:stop].copy()

    def pullback(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return full

    return _result(out, [(x, pullback)])


def take_rows(x, indices) -> Tensor:
    """Gather rows by integer index (embedding lookup). Gradient is a
    scatter-add, so repeated indices accumulate."""
    x = _coerce(x)
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2:
        raise DimensionError(f"take_rows: expected 2-D table, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(f"take_rows: index out of range for table {x.shape}")
    out = x.data[idx]

    def pullback(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return full

    return _result(out, [(x, pullback)])


def row(x, i: int) -> Tensor:
    """Extract row i of a 2-D tensor as a 1-D vector."""
    x = _coerce(x)
    if x.ndim != 2:
        raise DimensionError(f"row: expected 2-D, got {x.shape}")
    out = x.data[i].copy()

    def pullback(g):
        full = np.zeros_like(x.data)
        full[i] = g
        return full

    return _result(out, [(x, pullback)])


def replace_row(x, i: int, v) -> Tensor:
    """Copy of x with row i replaced by the 1-D vector v."""
    x, v = _coerce(x), _coerce(v)
    if x.ndim != 2 or v.ndim != 1 or v.shape[0] != x.shape[1]:
        raise DimensionError(f"replace_row: {x.shape} row <- {v.shape}")
    if not 0 <= i < x.shape[0]:
        raise DimensionError(f"replace_row: row {i} out of range for {x.shape}")
    out = x.data.copy()
    out[i] = v.data

    def pull_x(g):
        gx = g.copy()
        gx[i] = 0.0
        return gx

    return _result(out, [(x, pull_x), (v, lambda g: g[i].copy())])


def replace_rows(x, indices, v) -> Tensor:
    """Copy of x with rows ``indices`` (distinct) replaced by the rows of v."""
    x, v = _coerce(x), _coerce(v)
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2 or v.ndim != 2 or v.shape != (idx.shape[0], x.shape[1]):
        raise DimensionError(f"replace_rows: {x.shape} rows <- {v.shape}")
    if idx.size != np.unique(idx).size:
        raise DimensionError("replace_rows: duplicate row indices")
    out = x.data.copy()
    out[idx] = v.data

    def pull_x(g):
        gx = g.copy()
        gx[idx] = 0.0
        return gx

    return _result(out, [(x, pull_x), (v, lambda g: g[idx].copy())])


def tile_rows(v, n: int) -> Tensor:
    """Stack n copies of a 1-D vector into an (n, D) matrix."""
    v = _coerce(v)
    if v.ndim != 1:
        raise DimensionError(f"tile_rows: expected 1-D, got {v.shape}")
    if n <= 0:
        raise DimensionError(f"tile_rows: need n >= 1, got {n}")
    out = np.tile(v.data, (n, 1))
    return _result(out, [(v, lambda g: g.sum(axis=0))])


# ---------------------------------------------------------------------------
# neural-net primitives
# ---------------------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    if x.shape == () or x.shape[axis] == 0:
        raise DimensionError(f"softmax: zero-length axis in shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def pullback(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return out * (g - dot)

    return _result(out, [(x, pullback)])


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def pull_x(g):
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        return (gg - m1 - xhat * m2) * inv

    axes = tuple(range(x.ndim - 1))
    return _result(
        out,
        [
            (x, pull_x),
            (gain, lambda g: (g * xhat).sum(axis=axes) if axes else g * xhat),
            (bias, lambda g: g.sum(axis=axes) if axes else g),
        ],
    )


def scaled_dot_attention(q, k, v, mask=None) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d)) V for 2-D Q, K, V.

    ``mask``, if given, is an additive (Tq, Tk) array applied to the
    score matrix before the softmax (use large negatives to block).
    """
    q, k, v = _coerce(q), _coerce(k), _coerce(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("scaled_dot_attention: Q, K, V must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"scaled_dot_attention: Q {q.shape} vs K {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"scaled_dot_attention: K {k.shape} vs V {v.shape}")
    scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(q.shape[1]))
    if mask is not None:
        scores = add(scores, constant(mask))
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# module container
# ---------------------------------------------------------------------------


class Module:
    """Tiny parameter container; children are discovered from __dict__."""

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            _collect_params(value, name, out)
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _collect_params(value, name: str, out: dict):
    if isinstance(value, Parameter):
        out[name] = value
    elif isinstance(value, Module):
        out.update(value.named_parameters(prefix=name + "."))
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _collect_params(item, f"{name}.{i}", out)
    elif isinstance(value, dict):
        for key, item in value.items():
            _collect_params(item, f"{name}.{key}", out)
