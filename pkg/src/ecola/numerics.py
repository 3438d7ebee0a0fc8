"""Dense tensors with a tape-based reverse-mode autodiff.

Only the primitives needed by the embedding scorers and the transformer
encoder are provided. Every primitive checks shapes up front and records a
closure on the active :class:`Tape` that maps the output gradient to input
gradients.

Broadcasting is limited to *leading batch dimensions*: two operands are
compatible if their shapes are equal or one shape is a suffix of the other.

Usage::

    with Tape() as tape:
        loss = nx.sum(nx.mul(x, y))
    grads = tape.backward(loss, [x, y])
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "backward", "grad_check",
    "add", "sub", "mul", "scale", "neg", "matmul", "sin", "sigmoid", "gelu",
    "softmax", "log_softmax_xent", "bce_with_logits", "euclid_dist",
    "concat", "take", "layer_norm", "gather", "reshape", "transpose",
    "sum", "mean",
]

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a primitive receives non-conforming shapes."""


class Tensor:
    """An n-d array that may take part in differentiation.

    Leaves created with ``requires_grad=True`` are parameters; tensors
    produced by primitives inherit ``requires_grad`` from their inputs.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar; everything routes through the primitives below
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


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


# --------------------------------------------------------------------------
# tape

class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, which is already a topological
    order, so backward simply walks the list in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None
                 ) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. ``wrt`` (default: all leaves seen).

        Leaves in ``wrt`` that the loss does not depend on get zero gradients.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = acc.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in acc:
                    acc[key] = acc[key] + gi
                else:
                    acc[key] = gi
                    leaves.setdefault(key, t)
        if wrt is None:
            # remaining entries belong to leaves (intermediates were popped)
            return {leaves[k]: v for k, v in acc.items() if k in leaves}
        out = {}
        for t in wrt:
            g = acc.get(id(t))
            out[t] = np.zeros_like(t.data) if g is None else g
        return out


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None, tape: Tape | None = None):
    """Backward pass on ``tape`` (default: innermost active tape)."""
    if tape is None:
        if not _TAPES:
            raise RuntimeError("no active tape")
        tape = _TAPES[-1]
    return tape.backward(loss, wrt)


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].record(out, inputs, vjp)
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _check_suffix(op: str, a: tuple, b: tuple) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b} "
                         "(only leading-batch broadcasting is supported)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# --------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix("add", a.shape, b.shape)
    out = Tensor(a.data + b.data)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix("sub", a.shape, b.shape)
    out = Tensor(a.data - b.data)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_suffix("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    return _record(out, (a, b), lambda g: (_reduce_to(g * bd, ad.shape),
                                           _reduce_to(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def sin(a: Tensor) -> Tensor:
    ad = a.data
    out = Tensor(np.sin(ad))
    return _record(out, (a,), lambda g: (g * np.cos(ad),))


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + th))

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * dinner),)

    return _record(out, (a,), vjp)


# --------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` may be 2-d and shared across batches."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_suffix("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data
    out = Tensor(np.matmul(ad, bd))

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2 and ad.ndim > 2:
            # shared weight: fold the batch axes into one product
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _reduce_to(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return _reduce_to(ga, ad.shape), gb

    return _record(out, (a, b), vjp)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    out = Tensor(np.sum(a.data, axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / max(1, a.size))


def euclid_dist(x: Tensor, y: Tensor) -> Tensor:
    """Euclidean distance along the last axis. Subgradient 0 at x == y."""
    if x.shape != y.shape:
        raise ShapeError(f"euclid_dist: incompatible shapes {x.shape} and {y.shape}")
    diff = x.data - y.data
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    out = Tensor(dist)

    def vjp(g):
        safe = np.where(dist > 0, dist, 1.0)
        unit = np.where((dist > 0)[..., None], diff / safe[..., None], 0.0)
        gx = g[..., None] * unit
        return gx, -gx

    return _record(out, (x, y), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with gain {gain.shape} "
                         f"and bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = Tensor(xhat * gd + bias.data)

    def vjp(g):
        gg = _reduce_to(g * xhat, (d,))
        gb = _reduce_to(g, (d,))
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record(out, (x, gain, bias), vjp)


# --------------------------------------------------------------------------
# probabilistic heads

def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable, 1 = keep) zeros
    out excluded entries; at least one entry per row must be kept."""
    xd = x.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        xd = np.where(keep, xd, -np.inf)
    m = np.max(xd, axis=-1, keepdims=True)
    e = np.exp(xd - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), vjp)


def log_softmax_xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row cross-entropy ``logsumexp(z) - z[label]`` for 2-d logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"log_softmax_xent: logits {logits.shape} with labels "
                         f"{labels.shape}")
    z = logits.data
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise IndexError("log_softmax_xent: label out of range")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(se))[:, 0]
    rows = np.arange(z.shape[0])
    out = Tensor(lse - z[rows, labels])

    def vjp(g):
        p = e / se
        p[rows, labels] -= 1.0
        return (p * g[:, None],)

    return _record(out, (logits,), vjp)


def bce_with_logits(scores: Tensor, labels: np.ndarray, clamp: float = 1e-12) -> Tensor:
    """Elementwise ``-(y log p + (1-y) log(1-p))`` with ``p = sigmoid(score)``.

    Log arguments are clamped below at ``clamp``; clamped terms pass no
    gradient.
    """
    y = np.asarray(labels, dtype=scores.dtype)
    if y.shape != scores.shape:
        raise ShapeError(f"bce_with_logits: scores {scores.shape} with labels {y.shape}")
    p = _stable_sigmoid(scores.data)
    q = _stable_sigmoid(-scores.data)
    lp = np.maximum(p, clamp)
    lq = np.maximum(q, clamp)
    out = Tensor(-(y * np.log(lp) + (1.0 - y) * np.log(lq)))

    def vjp(g):
        # d/ds log p = q ; d/ds log q = -p
        dp = np.where(p > clamp, q, 0.0)
        dq = np.where(q > clamp, -p, 0.0)
        return (-g * (y * dp + (1.0 - y) * dq),)

    return _record(out, (scores,), vjp)


# --------------------------------------------------------------------------
# structural

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(sizes)))

    return _record(out, tuple(tensors), vjp)


def take(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    ax = axis % x.data.ndim
    n = x.shape[ax]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"take: range [{start}, {stop}) outside axis of length {n} "
                         f"in shape {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx])
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _record(out, (x,), vjp)


def gather(table: Tensor, idx) -> Tensor:
    """Rows of ``table`` (first axis) for an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.data.ndim < 1:
        raise ShapeError(f"gather: table must have at least one axis, got {table.shape}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: index out of range for table with {n} rows")
    out = Tensor(table.data[idx])
    shape = table.shape

    def vjp(g):
        return (_scatter_rows(idx.reshape(-1), g.reshape((-1,) + shape[1:]), shape),)

    return _record(out, (table,), vjp)


def _scatter_rows(idx: np.ndarray, rows: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``rows`` into a zero array of ``shape`` at ``idx`` (fixed order)."""
    full = np.zeros(shape, dtype=rows.dtype)
    if idx.size == 0:
        return full
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    full[sidx[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return full


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from e
    out = Tensor(data)
    return _record(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


# --------------------------------------------------------------------------
# finite-difference checking

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6,
               max_coords: int | None = None, rng: np.random.Generator | None = None
               ) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``f`` is re-evaluated with each parameter coordinate perturbed in place,
    so it must be deterministic. ``max_coords`` limits the number of
    coordinates checked per parameter (sampled with ``rng``).
    """
    with Tape() as tape:
        loss = f()
    _check_finite(loss, None, None)
    analytic = tape.backward(loss, params)
    worst = 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        ga = analytic[p].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = f()
            _check_finite(up, p, c)
            flat[c] = orig - step
            down = f()
            _check_finite(down, p, c)
            flat[c] = orig
            fd = (up.item() - down.item()) / (2 * step)
            err = abs(ga[c] - fd) / max(1.0, abs(ga[c]))
            worst = max(worst, err)
    return worst


def _check_finite(t: Tensor, p: Tensor | None, coord) -> None:
    if not np.all(np.isfinite(t.data)):
        where = "at the unperturbed point" if p is None else (
            f"perturbing {p.name or 'parameter'} coordinate {int(coord)}")
        raise FloatingPointError(f"non-finite value in forward pass {where}")
