"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is the minimum needed for MLPs, causal attention, embeddings,
layer normalization, SiLU and masked cross-entropy. Everything is f64 and
row-major. Broadcasting is limited to a smaller operand whose shape is a
suffix of the larger one (i.e. broadcast over leading batch axes only).

Gradients propagate through a sweep-local accumulator, so calling
``backward`` twice on the same loss adds into ``.grad`` a second time
without double-counting interior nodes.
"""

from __future__ import annotations

import numbers

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "backward",
    "matmul",
    "concat",
    "stack",
    "gather_rows",
    "silu",
    "layer_norm",
    "softmax",
    "cross_entropy",
    "dropout",
]


def _as_f64(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        # tape linkage; both stay empty for tensors built from constants
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _add(self, _wrap(other))

    def __radd__(self, other):
        return _add(_wrap(other), self)

    def __sub__(self, other):
        return _add(self, _neg(_wrap(other)))

    def __rsub__(self, other):
        return _add(_wrap(other), _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, _wrap(other))

    def __rmul__(self, other):
        return _mul(_wrap(other), self)

    def __truediv__(self, other):
        if not isinstance(other, numbers.Number):
            raise ContractError("tensor division only supports scalar divisors")
        return _mul(self, Tensor(1.0 / float(other)))

    def __matmul__(self, other):
        return matmul(self, other)

    def matmul(self, other, row_stable: bool = False):
        return matmul(self, other, row_stable=row_stable)

    def sum(self, axis=None, keepdims: bool = False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _mean(self, axis, keepdims)

    def abs(self):
        return _abs(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _permute(self, axes)

    def narrow(self, axis: int, start: int, length: int):
        return _narrow(self, axis, start, length)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (numbers.Number, np.ndarray)):
        return Tensor(x)
    raise ContractError(f"cannot mix Tensor with {type(x).__name__}")


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # inverse of suffix-broadcast: sum the leading axes that were added
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    if grad.shape != shape:
        raise ShapeError(f"gradient shape {grad.shape} does not reduce to {shape}")
    return grad


def _check_suffix(a: Tensor, b: Tensor, op: str):
    sa, sb = a.shape, b.shape
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if small != big[len(big) - len(small):]:
        raise ShapeError(f"{op}: shape {sa} is not suffix-compatible with {sb}")


def _add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")

    def bw(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data + b.data, (a, b), bw)


def _neg(a: Tensor) -> Tensor:
    def bw(g):
        return (-g,)

    return _make(-a.data, (a,), bw)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def _abs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bw(g):
        return (g * sign,)

    return _make(np.abs(a.data), (a,), bw)


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    # backward returns read-only broadcast views; the whole engine is
    # non-inplace on gradients so aliasing is safe
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def _mean(a: Tensor, axis, keepdims: bool) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def _reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), bw)


def _permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), bw)


def _narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(a.data[idx].copy(), (a,), bw)


def matmul(a: Tensor, b: Tensor, row_stable: bool = False) -> Tensor:
    """Matrix product ``(..., m, k) @ (k, n)`` or ``(..., m, k) @ (..., k, n)``.

    ``row_stable=True`` routes through einsum, whose per-row reduction order
    does not depend on how many rows are batched together; the default BLAS
    path is faster but not bitwise row-stable.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree between {a.shape} and {b.shape}")
    shared_b = b.ndim == 2
    if not shared_b and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims disagree between {a.shape} and {b.shape}")

    if row_stable:
        mm = lambda x, y: np.einsum("lmk,lkn->lmn", x, y)
    else:
        mm = np.matmul

    lead = a.shape[:-2]
    m, k = a.shape[-2:]
    n = b.shape[-1]
    a3 = a.data.reshape((-1, m, k))
    b3 = b.data.reshape((-1, k, n)) if not shared_b else None

    if shared_b:
        if row_stable:
            out = np.einsum("lmk,kn->lmn", a3, b.data)
        else:
            out = np.matmul(a3, b.data)
    else:
        out = mm(a3, b3)
    out = out.reshape(lead + (m, n))

    def bw(g):
        g3 = g.reshape((-1, m, n))
        ga = gb = None
        if a.requires_grad:
            if shared_b:
                if row_stable:
                    ga = np.einsum("lmn,kn->lmk", g3, b.data)
                else:
                    ga = np.matmul(g3, b.data.T)
            else:
                if row_stable:
                    ga = np.einsum("lmn,lkn->lmk", g3, b3)
                else:
                    ga = np.matmul(g3, np.swapaxes(b3, -1, -2))
            ga = ga.reshape(a.shape)
        if b.requires_grad:
            if shared_b:
                a2 = a3.reshape((-1, k))
                g2 = g3.reshape((-1, n))
                if row_stable:
                    gb = np.einsum("tk,tn->kn", a2, g2)
                else:
                    gb = a2.T @ g2
            else:
                if row_stable:
                    gb = np.einsum("lmk,lmn->lkn", a3, g3)
                else:
                    gb = np.matmul(np.swapaxes(a3, -1, -2), g3)
                gb = gb.reshape(b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        outs = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                outs.append(g[tuple(idx)])
            else:
                outs.append(None)
        return tuple(outs)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]

    def bw(g):
        slabs = np.moveaxis(g, axis, 0)
        return tuple(slabs[i] if t.requires_grad else None for i, t in enumerate(tensors))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a 2-d table by integer index array; backward scatters."""
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather index out of range for table of {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[idx], (table,), bw)


def silu(x: Tensor) -> Tensor:
    x = _wrap(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bw(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape[-1] != d or bias.shape[-1] != d:
        raise ShapeError(
            f"layer_norm: last-axis extents disagree: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gxhat = g * gain.data
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-softmax probability of ``targets`` over unmasked rows.

    ``logits`` is (rows, vocab); ``targets`` integer row labels; ``mask`` an
    optional per-row 0/1 weighting. Masked rows are excluded from the mean.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    rows, vocab = logits.shape
    if t.shape != (rows,):
        raise ShapeError(f"targets shape {t.shape} does not match logits rows {rows}")
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise IndexError(f"target index out of range for vocab {vocab}")
    if mask is None:
        w = np.ones(rows)
    else:
        w = np.asarray(mask, dtype=np.float64).reshape(rows)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy: loss mask selects no positions")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    picked = logp[np.arange(rows), t]
    loss = -(picked * w).sum() / total

    def bw(g):
        p = np.exp(logp)
        p[np.arange(rows), t] -= 1.0
        return (g * p * (w / total)[:, None],)

    return _make(np.asarray(loss), (logits,), bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; train-time only, caller owns the generator."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), bw)


def _toposort(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor):
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any requires_grad tensor")
    order = _toposort(loss)
    sweep: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = sweep.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        contribs = node._backward(g)
        for parent, c in zip(node._parents, contribs):
            if c is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in sweep:
                sweep[key] = sweep[key] + c
            else:
                sweep[key] = c
