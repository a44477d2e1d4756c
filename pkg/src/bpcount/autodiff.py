"""Minimal dense-tensor reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Every op records a tape node holding
parent links and backward rules; nodes carry a global monotone counter,
so reverse-counter order is exactly reverse recording order. The tape is
rebuilt on every forward pass (graph topology changes per formula) and
gradient accumulation follows recording order, which makes runs with a
fixed seed bit-deterministic.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ORDER = itertools.count()


class Tensor:
    __slots__ = ("values", "requires_grad", "node", "grad")

    def __init__(self, values, requires_grad: bool = False, node: "Node | None" = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node = node
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def live(self) -> bool:
        """Participates in differentiation."""
        return self.requires_grad or self.node is not None

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, live={self.live})"


class Node:
    __slots__ = ("order", "parents", "vjps", "grad")

    def __init__(self, parents: tuple[Tensor, ...], vjps: tuple[Callable, ...]):
        self.order = next(_ORDER)
        self.parents = parents
        self.vjps = vjps
        self.grad: np.ndarray | None = None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(values: np.ndarray, parents: tuple[Tensor, ...], vjps: tuple[Callable, ...]) -> Tensor:
    for p in parents:
        if p.requires_grad or p.node is not None:
            return Tensor(values, node=Node(parents, vjps))
    return Tensor(values)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _scatter_rows(g: np.ndarray, idx: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of g into an (n_rows, ...) array at positions idx."""
    if g.ndim == 1:
        return np.bincount(idx, weights=g, minlength=n_rows)
    cols = int(np.prod(g.shape[1:]))
    flat = (idx[:, None] * cols + np.arange(cols)[None, :]).ravel()
    out = np.bincount(flat, weights=g.reshape(-1, cols).ravel(), minlength=n_rows * cols)
    return out.reshape((n_rows,) + g.shape[1:])


def _scatter_cols(g: np.ndarray, idx: np.ndarray, n_cols: int) -> np.ndarray:
    n = g.shape[0]
    flat = (np.arange(n)[:, None] * n_cols + idx[None, :]).ravel()
    out = np.bincount(flat, weights=g.ravel(), minlength=n * n_cols)
    return out.reshape(n, n_cols)


# ---------------------------------------------------------------------------
# core ops


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _record(
        a.values + b.values,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _record(
        a.values - b.values,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _record(
        a.values * b.values,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.values, a.shape),
            lambda g: _unbroadcast(g * a.values, b.shape),
        ),
    )


def mul_scalar(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _record(a.values * c, (a,), (lambda g: g * c,))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _record(
        a.values @ b.values,
        (a, b),
        (lambda g: g @ b.values.T, lambda g: a.values.T @ g),
    )


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    values = np.concatenate([t.values for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i: int):
        sl = [slice(None)] * values.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _record(values, tuple(ts), tuple(make_vjp(i) for i in range(len(ts))))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    return _record(
        a.values.reshape(shape), (a,), (lambda g: g.reshape(a.shape),)
    )


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.values > 0
    return _record(np.where(mask, a.values, 0.0), (a,), (lambda g: g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _lift(a)
    mask = a.values > 0
    scale = np.where(mask, 1.0, slope)
    return _record(a.values * scale, (a,), (lambda g: g * scale,))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.values)
    return _record(out, (a,), (lambda g: g * out,))


def logsumexp(a, axis: int | None = None) -> Tensor:
    """Max-shifted log-sum-exp along `axis` (all entries if None)."""
    a = _lift(a)
    m = a.values.max(axis=axis, keepdims=axis is not None)
    if axis is None:
        out = float(m) + np.log(np.exp(a.values - m).sum())
        out = np.float64(out)
        w = np.exp(a.values - out)
        return _record(out, (a,), (lambda g: g * w,))
    shifted = np.exp(a.values - m)
    out = (m + np.log(shifted.sum(axis=axis, keepdims=True))).squeeze(axis)
    w = np.exp(a.values - np.expand_dims(out, axis))
    return _record(out, (a,), (lambda g: np.expand_dims(g, axis) * w,))


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = _lift(a)
    if axis is None:
        return _record(
            np.float64(a.values.sum()), (a,), (lambda g: np.broadcast_to(g, a.shape),)
        )
    return _record(
        a.values.sum(axis=axis),
        (a,),
        (lambda g: np.broadcast_to(np.expand_dims(g, axis), a.shape),),
    )


def gather_rows(a, idx) -> Tensor:
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    return _record(a.values[idx], (a,), (lambda g: _scatter_rows(g, idx, n),))


def gather_cols(a, idx) -> Tensor:
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.int64)
    n_cols = a.shape[1]
    return _record(a.values[:, idx], (a,), (lambda g: _scatter_cols(g, idx, n_cols),))


def _segment_starts(segment_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if segment_ids.size and np.any(np.diff(segment_ids) < 0):
        raise ValueError("segment_ids must be sorted ascending")
    starts = np.flatnonzero(
        np.r_[True, segment_ids[1:] != segment_ids[:-1]]
    )
    counts = np.diff(np.r_[starts, segment_ids.size])
    return starts, counts


def segment_sum(values, segment_ids, n_segments: int, validate: bool = True) -> Tensor:
    """Sum rows within segments; absent segments yield zero rows."""
    v = _lift(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if validate and ids.size and np.any(np.diff(ids) < 0):
        raise ValueError("segment_ids must be sorted ascending")
    if ids.shape[0] != v.shape[0]:
        raise ValueError("segment_ids length must equal first dimension")
    out = _scatter_rows(v.values, ids, n_segments)
    return _record(out, (v,), (lambda g: g[ids],))


def segment_softmax(values, segment_ids, starts_counts=None) -> Tensor:
    """Softmax within each contiguous segment along axis 0."""
    v = _lift(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("segment_softmax of empty input")
    if ids.shape[0] != v.shape[0]:
        raise ValueError("segment_ids length must equal first dimension")
    starts, counts = (
        starts_counts if starts_counts is not None else _segment_starts(ids)
    )
    seg_max = np.maximum.reduceat(v.values, starts, axis=0)
    e = np.exp(v.values - np.repeat(seg_max, counts, axis=0))
    sums = np.add.reduceat(e, starts, axis=0)
    out = e / np.repeat(sums, counts, axis=0)

    def vjp(g):
        dot = np.add.reduceat(g * out, starts, axis=0)
        return out * (g - np.repeat(dot, counts, axis=0))

    return _record(out, (v,), (vjp,))


# ---------------------------------------------------------------------------
# fused ops: same semantics as compositions of the core ops above, one tape
# node each; they keep per-formula tapes short on the training hot path


def linear(x, w, b) -> Tensor:
    """x @ w + b; b may be a bias row or a full-shape offset."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    return _record(
        x.values @ w.values + b.values,
        (x, w, b),
        (
            lambda g: g @ w.values.T,
            lambda g: x.values.T @ g,
            lambda g: _unbroadcast(g, b.shape),
        ),
    )


def log_normalize_rows(x) -> Tensor:
    """Subtract each row's logsumexp: rows become log distributions."""
    x = _lift(x)
    m = x.values.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x.values - m).sum(axis=1, keepdims=True))
    out = x.values - lse
    w = np.exp(out)
    return _record(out, (x,), (lambda g: g - w * g.sum(axis=1, keepdims=True),))


def blockdot(x, a, col_off: int, n_heads: int, dim: int) -> Tensor:
    """Per-head dot product: out[n, h] = x[n, h*dim:*] . a[h, col_off:+dim]."""
    x, a = _lift(x), _lift(a)
    x3 = x.values.reshape(-1, n_heads, dim)
    sub_a = a.values[:, col_off : col_off + dim]
    out = np.einsum("nhj,hj->nh", x3, sub_a)

    def vjp_a(g):
        ga = np.zeros(a.shape)
        ga[:, col_off : col_off + dim] = np.einsum("nhj,nh->hj", x3, g)
        return ga

    return _record(
        out,
        (x, a),
        (lambda g: (g[:, :, None] * sub_a[None]).reshape(x.shape), vjp_a),
    )


def blockscale(x, s, n_heads: int) -> Tensor:
    """Scale each head block of x (N, H*d) by s (N, H)."""
    x, s = _lift(x), _lift(s)
    n = x.shape[0]
    x3 = x.values.reshape(n, n_heads, -1)
    out = (x3 * s.values[:, :, None]).reshape(x.shape)
    return _record(
        out,
        (x, s),
        (
            lambda g: (g.reshape(n, n_heads, -1) * s.values[:, :, None]).reshape(x.shape),
            lambda g: np.einsum("nhj,nhj->nh", g.reshape(n, n_heads, -1), x3),
        ),
    )


def head_mean(x, n_heads: int) -> Tensor:
    """Mean over the head blocks of x (N, H*d) -> (N, d)."""
    x = _lift(x)
    n = x.shape[0]
    out = x.values.reshape(n, n_heads, -1).mean(axis=1)
    return _record(out, (x,), (lambda g: np.tile(g / n_heads, (1, n_heads)),))


def weighted_sum(x, w) -> Tensor:
    """sum(x * w) with constant weights w."""
    x = _lift(x)
    w = np.asarray(w, dtype=np.float64)
    return _record(np.float64((x.values * w).sum()), (x,), (lambda g: g * w,))


def xlogy_sum(b, logb, w) -> Tensor:
    """sum(b * logb * w) with constant weights w; b and logb both live."""
    b, logb = _lift(b), _lift(logb)
    w = np.asarray(w, dtype=np.float64)
    return _record(
        np.float64((b.values * logb.values * w).sum()),
        (b, logb),
        (lambda g: g * logb.values * w, lambda g: g * b.values * w),
    )


def lse_fold(x, width: int, out_shape: tuple[int, ...]) -> Tensor:
    """Logsumexp over consecutive length-`width` column chunks, reshaped."""
    x = _lift(x)
    v = x.values.reshape(-1, width)
    m = v.max(axis=1, keepdims=True)
    red = m + np.log(np.exp(v - m).sum(axis=1, keepdims=True))
    w = np.exp(v - red)
    return _record(
        red.reshape(out_shape),
        (x,),
        (lambda g: (g.reshape(-1, 1) * w).reshape(x.shape),),
    )


def linear_relu(x, w, b) -> Tensor:
    """relu(x @ w + b)."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    pre = x.values @ w.values + b.values
    mask = pre > 0
    return _record(
        np.where(mask, pre, 0.0),
        (x, w, b),
        (
            lambda g: (g * mask) @ w.values.T,
            lambda g: x.values.T @ (g * mask),
            lambda g: _unbroadcast(g * mask, b.shape),
        ),
    )


def mix_normalize(new, prev, alpha: float) -> Tensor:
    """Log-normalized rows of alpha*new + (1-alpha)*prev (scalar damping)."""
    new, prev = _lift(new), _lift(prev)
    pre = alpha * new.values + (1.0 - alpha) * prev.values
    m = pre.max(axis=1, keepdims=True)
    out = pre - (m + np.log(np.exp(pre - m).sum(axis=1, keepdims=True)))
    w = np.exp(out)

    def g_pre(g):
        return g - w * g.sum(axis=1, keepdims=True)

    return _record(
        out,
        (new, prev),
        (lambda g: alpha * g_pre(g), lambda g: (1.0 - alpha) * g_pre(g)),
    )


def add_normalize(a, b) -> Tensor:
    """Log-normalized rows of a + b."""
    a, b = _lift(a), _lift(b)
    pre = a.values + b.values
    m = pre.max(axis=1, keepdims=True)
    out = pre - (m + np.log(np.exp(pre - m).sum(axis=1, keepdims=True)))
    w = np.exp(out)

    def g_pre(g):
        return g - w * g.sum(axis=1, keepdims=True)

    return _record(out, (a, b), (g_pre, g_pre))


def pick(x, i: int) -> Tensor:
    """Extract element i of a 1-D tensor as a scalar."""
    x = _lift(x)

    def vjp(g):
        out = np.zeros(x.shape)
        out[i] = g
        return out

    return _record(np.float64(x.values[i]), (x,), (vjp,))


def mse(pred, target) -> Tensor:
    p, t = _lift(pred), _lift(target)
    if p.shape != t.shape:
        raise ValueError(f"mse shape mismatch: {p.shape} vs {t.shape}")
    diff = p.values - t.values
    n = max(diff.size, 1)
    return _record(
        np.float64((diff * diff).mean() if diff.size else 0.0),
        (p, t),
        (lambda g: g * 2.0 * diff / n, lambda g: -g * 2.0 * diff / n),
    )


# ---------------------------------------------------------------------------
# backward sweep


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar root into requires_grad leaves."""
    if root.values.size != 1:
        raise ValueError("backward root must be scalar")
    if root.node is None:
        if root.requires_grad:
            root.grad = (root.grad if root.grad is not None else 0.0) + np.ones_like(
                root.values
            )
            return
        raise ValueError("backward root is detached from the tape")

    nodes: list[Node] = []
    seen: set[int] = set()
    stack = [root.node]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for p in node.parents:
            if p.node is not None:
                stack.append(p.node)

    nodes.sort(key=lambda n: n.order, reverse=True)
    root.node.grad = np.ones_like(root.values)
    for node in nodes:
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.live:
                continue
            pg = vjp(g)
            if parent.node is not None:
                if parent.node.grad is None:
                    parent.node.grad = np.zeros(parent.shape)
                parent.node.grad += pg
            if parent.requires_grad:
                if parent.grad is None:
                    parent.grad = np.zeros(parent.shape)
                parent.grad += pg
        node.grad = None


# ---------------------------------------------------------------------------
# parameters


class ParamSet:
    """Named, lexicographically ordered map of trainable tensors."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, tensor) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = tensor if isinstance(tensor, Tensor) else Tensor(tensor, requires_grad=True)
        t.requires_grad = True
        self._tensors[name] = t
        return t

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._tensors[n]) for n in self.names()]

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def zero_grads(self) -> None:
        for _, t in self.items():
            t.grad = None

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self.items():
            out.add(name, Tensor(t.values.copy(), requires_grad=True))
        return out

    def n_values(self) -> int:
        return sum(t.values.size for _, t in self.items())


def finite_diff_check(
    f: Callable[[ParamSet], Tensor],
    params: ParamSet,
    eps: float = 1e-5,
    atol: float = 1e-8,
    names: Iterable[str] | None = None,
) -> float:
    """Worst relative error between backward() and central differences.

    Coordinates whose absolute AD/FD discrepancy is below `atol` count as
    exact (guards against finite-difference noise at near-zero gradients).
    """
    params.zero_grads()
    out = f(params)
    backward(out)
    grads = {
        name: (t.grad.copy() if t.grad is not None else np.zeros(t.shape))
        for name, t in params.items()
    }
    worst = 0.0
    for name in params.names() if names is None else names:
        flat = params[name].values.ravel()
        gflat = grads[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params).values)
            flat[i] = orig - eps
            fm = float(f(params).values)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            ad = gflat[i]
            diff = abs(ad - fd)
            if diff > atol:
                worst = max(worst, diff / max(abs(ad), abs(fd)))
    return worst
