"""Small reverse-mode autodiff engine on top of numpy.

Only what a desk-scale transformer needs: broadcasting arithmetic, batched
matmul, layer norm, softmax, tanh-GELU, gathers/scatters over the token axis
and a pre-norm transformer block. Every op records a closure that maps the
upstream gradient to gradients of its parents; ``Tensor.backward`` walks the
graph in reverse topological order.

Graph edges are only recorded when some input requires a gradient, so
inference with frozen parameters builds no graph at all.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DimensionError, EmptyPoolError, NumericError, PreconditionError

_default_dtype = np.dtype(np.float32)

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def default_dtype() -> np.dtype:
    return _default_dtype


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = old


class Tensor:
    """An ndarray plus an optional gradient and the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.size != 1:
                raise DimensionError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient reached {node.name or 'leaf'}")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operators --------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def check_finite(t: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _result(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    c = x.dtype.type(GELU_C)
    k = x.dtype.type(GELU_K)
    t = np.tanh(c * (x + k * x * x * x))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]
    keys = key if isinstance(key, tuple) else (key,)
    advanced = any(isinstance(k, (np.ndarray, list)) for k in keys)

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _result(np.array(out, copy=True), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _result(out, tensors, backward)


def gather_rows(table: Tensor, index) -> Tensor:
    """``table[index]`` for an integer index array of any shape (embedding lookup)."""
    index = np.asarray(index, dtype=np.intp)
    n = table.shape[0]
    if index.size and (index.min() < -n or index.max() >= n):
        raise DimensionError(f"row index out of range for table with {n} rows")
    out = table.data[index]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (table,), backward)


def scatter_tokens(x: Tensor, index, length: int) -> Tensor:
    """Place ``x[b, k]`` at row ``index[b, k]`` of a zero ``[B, length, E]`` array.

    Indices within one row must be distinct.
    """
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 3 or index.shape != x.shape[:2]:
        raise DimensionError(f"scatter_tokens: x {x.shape} vs index {index.shape}")
    b = np.arange(x.shape[0])[:, None]
    out = np.zeros((x.shape[0], length, x.shape[2]), dtype=x.dtype)
    out[b, index] = x.data
    return _result(out, (x,), lambda g: (g[b, index],))


# ---------------------------------------------------------------------------
# linear algebra and fused layers
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least two dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``[in, out]``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out.reshape(lead + (w.shape[1],)), parents, backward)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def backward(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = (inv / d) * (d * gxhat
                          - gxhat.sum(axis=-1, keepdims=True)
                          - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return grads

    return _result(out, parents, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (x,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return _result(out, (x,),
                   lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def mean_pool(x: Tensor) -> Tensor:
    """Mean over the token axis (second to last): ``[..., T, D] -> [..., D]``."""
    if x.ndim < 2:
        raise DimensionError("mean_pool expects a token matrix [T, D]")
    if x.shape[-2] == 0:
        raise EmptyPoolError("cannot mean-pool zero tokens")
    return tmean(x, axis=-2)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    return x / sqrt(tsum(x * x, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# transformer block
# ---------------------------------------------------------------------------

BLOCK_KEYS = ("ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
              "attn.wo", "attn.bo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")


def block_param_shapes(dim: int, hidden: int) -> dict[str, tuple[int, ...]]:
    shapes = {"ln1.g": (dim,), "ln1.b": (dim,), "ln2.g": (dim,), "ln2.b": (dim,)}
    for p in "qkvo":
        shapes[f"attn.w{p}"] = (dim, dim)
        shapes[f"attn.b{p}"] = (dim,)
    shapes.update({"mlp.w1": (dim, hidden), "mlp.b1": (hidden,),
                   "mlp.w2": (hidden, dim), "mlp.b2": (dim,)})
    return {k: shapes[k] for k in BLOCK_KEYS}


def multi_head_attention(x: Tensor, params: Mapping[str, Tensor], heads: int) -> Tensor:
    """Self-attention over ``x`` of shape ``[B, T, D]``."""
    bsz, t, d = x.shape
    dh = d // heads

    def split(h: Tensor) -> Tensor:
        return transpose(reshape(h, (bsz, t, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, params["attn.wq"], params["attn.bq"]))
    k = split(linear(x, params["attn.wk"], params["attn.bk"]))
    v = split(linear(x, params["attn.wv"], params["attn.bv"]))
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    ctx = matmul(softmax(scores, axis=-1), v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, t, d))
    return linear(ctx, params["attn.wo"], params["attn.bo"])


def transformer_block(x: Tensor, params: Mapping[str, Tensor], heads: int) -> Tensor:
    """Pre-norm block: ``x + MHSA(LN(x))`` followed by ``+ MLP(LN(.))``.

    ``x`` is ``[T, D]`` or batched ``[B, T, D]``; the output has the same shape.
    """
    if x.ndim not in (2, 3):
        raise DimensionError(f"transformer_block expects [T, D] or [B, T, D], got {x.shape}")
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    if x.shape[1] < 1:
        raise DimensionError("transformer_block needs at least one token")
    if params["ln1.g"].shape != (d,):
        raise DimensionError(f"block parameters built for width {params['ln1.g'].shape[0]}, input is {d}")

    h = x + multi_head_attention(layer_norm(x, params["ln1.g"], params["ln1.b"]), params, heads)
    m = linear(layer_norm(h, params["ln2.g"], params["ln2.b"]), params["mlp.w1"], params["mlp.b1"])
    out = h + linear(gelu(m), params["mlp.w2"], params["mlp.b2"])
    check_finite(out, "transformer block output")
    return reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_difference_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float,
                           coords: Sequence[int] | None = None) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x.data`` is perturbed in place and restored. With ``coords`` (flat
    indices) only those entries are estimated; the rest stay zero.
    """
    if eps <= 0:
        raise PreconditionError("eps must be positive")

    def evaluate():
        val = f(x)
        # keep the function's own precision (extended precision survives)
        val = np.asarray(val.data if isinstance(val, Tensor) else val)[()]
        if not np.isfinite(val):
            raise NumericError("finite difference hit a non-finite function value")
        return val

    evaluate()
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.result_type(x.dtype, np.float64))
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = evaluate()
        flat[i] = orig - eps
        fm = evaluate()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * flat.dtype.type(eps))
    return Tensor(grad.reshape(x.shape).astype(x.dtype), dtype=x.dtype)


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream (Philox) keyed by a seed and a name path.

    Streams are stateless: ``generator()`` always starts at ``counter``, so a
    stream yields the same draws on every call. Independent consumers take
    ``child(name, ...)`` substreams instead of sharing one generator.
    """

    seed: int
    counter: int = 0
    path: tuple = ()

    def child(self, *names) -> RngStream:
        return RngStream(self.seed, 0, self.path + tuple(str(n) for n in names))

    def key(self) -> int:
        h = hashlib.blake2b(digest_size=16)
        h.update((int(self.seed) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little"))
        for part in self.path:
            h.update(b"/")
            h.update(part.encode())
        return int.from_bytes(h.digest(), "little")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key(), counter=self.counter))
