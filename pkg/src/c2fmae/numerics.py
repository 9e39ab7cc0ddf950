"""Dense tensors with reverse-mode differentiation.

Just enough machinery for a small transformer: broadcasting arithmetic,
batched matmul, row gather/scatter, and fused softmax / log-softmax /
layer-norm / GELU kernels with hand-written backward rules.  Everything is
numpy underneath and runs single-threaded in a fixed reduction order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _node(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _node(np.transpose(x.data, axes), (x,), bw)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.ndim == 2 and a.ndim > 2:
            # weight-style operand: fold the batch axes into one gemm
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# fused nonlinearities
# ---------------------------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError(f"softmax over empty last axis, shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), bw)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _node(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _node(out, (x, gain, bias), bw)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    u = x.data
    inner = _GELU_C * (u + 0.044715 * u ** 3)
    t = np.tanh(inner)
    out = 0.5 * u * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
        d = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner
        return (g * d,)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``[start, stop)`` along axis -2."""
    n = x.shape[-2]
    if not 0 <= start <= stop <= n:
        raise ContractError(f"row slice [{start}, {stop}) out of bounds for {n} rows")

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :] = g
        return (full,)

    return _node(x.data[..., start:stop, :], (x,), bw)


def add_rows(x: Tensor, update: Tensor, start: int, stop: int) -> Tensor:
    """Copy of ``x`` with rows ``[start, stop)`` incremented by ``update``.

    Rows outside the span are copied, not recomputed, so they stay
    bit-identical to the input.
    """
    x, update = _coerce(x, update)
    n = x.shape[-2]
    if not 0 <= start <= stop <= n:
        raise ContractError(f"row span [{start}, {stop}) out of bounds for {n} rows")
    if update.shape[-2] != stop - start or update.shape[-1] != x.shape[-1]:
        raise DimensionError(f"add_rows: update {update.shape} does not fit span [{start}, {stop}) of {x.shape}")
    out = x.data.copy()
    out[..., start:stop, :] += update.data

    def bw(g):
        return g, _unbroadcast(g[..., start:stop, :], update.shape)

    return _node(out, (x, update), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch row gather: ``x`` is (B, M, D), ``index`` is (B, L) -> (B, L, D)."""
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_rows: x {x.shape} with index {index.shape}")
    b = np.arange(x.shape[0])[:, None]
    out = x.data[b, index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (b, index), g)
        return (full,)

    return _node(out, (x,), bw)


def _scatter(base: Tensor, src: Tensor, index: np.ndarray, b: np.ndarray, rows: int) -> Tensor:
    full_shape = (index.shape[0], rows, src.shape[-1])
    out = np.broadcast_to(base.data, full_shape).copy()
    out[b, index] = src.data

    def bw(g):
        gsrc = g[b, index]
        gbase = g.copy()
        gbase[b, index] = 0.0
        return _unbroadcast(gbase, base.shape), gsrc

    return _node(out, (base, src), bw)


def scatter_into_mask(fill: Tensor, src: Tensor, index: np.ndarray, rows: int) -> Tensor:
    """Build (B, rows, D) from ``fill`` (a (D,) row or (rows, D) table) with ``src`` rows at ``index``."""
    fill, src = _coerce(fill, src)
    index = np.asarray(index, dtype=np.intp)
    if src.shape[:2] != index.shape or fill.shape[-1] != src.shape[-1]:
        raise DimensionError(f"scatter: src {src.shape}, fill {fill.shape}, index {index.shape}")
    for row in index:
        if len(np.unique(row)) != len(row):
            raise ContractError("scatter: duplicate positions in index")
        if len(row) and (row.min() < 0 or row.max() >= rows):
            raise ContractError(f"scatter: positions outside [0, {rows})")
    b = np.arange(index.shape[0])[:, None]
    return _scatter(fill, src, index, b, rows)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients add to whatever is already stored; call ``zero_grad`` on
    the leaves to reset.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def numeric_grad(f: Callable[[], float], p: np.ndarray, coords: Iterable[tuple] | None = None,
                 h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``f`` w.r.t. array ``p`` (perturbed in place).

    Coordinates not listed in ``coords`` are left as NaN.
    """
    out = np.full(p.shape, np.nan)
    if coords is None:
        coords = np.ndindex(*p.shape)
    for c in coords:
        orig = p[c]
        p[c] = orig + h
        fp = f()
        p[c] = orig - h
        fm = f()
        p[c] = orig
        out[c] = (fp - fm) / (2 * h)
    return out


def finite_diff_check(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, Tensor] | Sequence[Tensor],
                      h: float = 1e-5, max_coords: int | None = None, seed: int = 0,
                      report: dict | None = None) -> float:
    """Max relative error between backprop gradients and central differences.

    ``f(params)`` must return a scalar ``Tensor`` and be deterministic.  With
    ``max_coords`` set, at most that many coordinates per parameter are
    probed (chosen by a seeded draw); otherwise every coordinate is.
    Relative error uses ``max(|analytic|, |numeric|, 1e-12)`` as denominator.
    If ``report`` is given it is filled with per-parameter maxima.
    """
    named = dict(params) if isinstance(params, Mapping) else {str(i): p for i, p in enumerate(params)}
    for p in named.values():
        p.zero_grad()
    backward(f(params))
    rng = np.random.default_rng(seed)

    def scalar() -> float:
        with no_grad():
            return f(params).item()

    worst = 0.0
    for name, p in named.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        coords = list(np.ndindex(*p.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        numeric = numeric_grad(scalar, p.data, coords, h)
        err = 0.0
        for c in coords:
            a, n = float(analytic[c]), float(numeric[c])
            err = max(err, abs(a - n) / max(abs(a), abs(n), 1e-12))
        if report is not None:
            report[name] = err
        worst = max(worst, err)
    return worst
