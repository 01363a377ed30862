"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every op takes :class:`Tensor` inputs, computes its output eagerly and, when
any input requires a gradient, records a :class:`GraphNode` holding a closure
that maps the output gradient to one gradient per parent.  ``backward`` walks
the graph in reverse topological order and accumulates into leaf ``.grad``
buffers.

Broadcasting is deliberately absent: binary ops demand equal shapes, scalars
are handled by dedicated ``*_scalar`` ops, and per-channel biases go through
:func:`add_bias`.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GraphNode:
    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        # maps output grad -> tuple of grads, one per parent (None = no grad)
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"GraphNode({self.op})"


class Tensor:
    """A float64 array plus an optional autodiff graph node."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[GraphNode] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; only same-shape tensors or python scalars
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = GraphNode(op, tuple(parents), backward_fn)
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError("backward: loss has no graph node (no input requires grad)")

    grads = {id(loss): np.ones((), dtype=np.float64)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                t.grad += g
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "mul_scalar", (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, "add_scalar", (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("sqrt: input has non-positive entries")
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input has non-positive entries")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), "clamp", (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got {a.shape}")
    return _make(a.data.T, "transpose", (a,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, bwd)


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows ``table[index]``; gradient scatters back with accumulation."""
    idx = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take_rows: index out of range for table with {n} rows")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(table.data[idx], "take_rows", (table,), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    if axis is None:
        shape = a.shape
        return _make(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.full(shape, g),))
    ax = axis % a.ndim

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),)

    return _make(a.data.sum(axis=ax), "sum", (a,), bwd)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul_scalar(sum(a, axis), 1.0 / n)


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Batched dot product of matching rows: (B, d), (B, d) -> (B,)."""
    _check_same("rowdot", a, b)
    if a.ndim != 2:
        raise ShapeError(f"rowdot: expected rank 2, got {a.shape}")
    return _make(
        np.einsum("ij,ij->i", a.data, b.data),
        "rowdot",
        (a, b),
        lambda g: (g[:, None] * b.data, g[:, None] * a.data),
    )


def l2_normalize_rows(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected rank 2, got {a.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", a.data, a.data))[:, None]
    if np.any(norms == 0):
        raise DomainError("l2_normalize_rows: zero-norm row")
    out = a.data / norms

    def bwd(g):
        return ((g - out * np.einsum("ij,ij->i", g, out)[:, None]) / norms,)

    return _make(out, "l2_normalize_rows", (a,), bwd)


def logsumexp(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """log(sum(exp(a))) along ``axis`` restricted to entries where ``mask`` is true.

    Uses max-subtraction over the included entries, so large logits are safe.
    """
    ax = axis % a.ndim
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"logsumexp: mask shape {mask.shape} vs input {a.shape}")
    if not np.all(mask.any(axis=ax)):
        raise ValueError("logsumexp: empty index set along reduction axis")
    x = np.where(mask, a.data, -np.inf)
    m = x.max(axis=ax, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=ax, keepdims=True)
    out = (np.log(s) + m).squeeze(ax)
    soft = e / s

    def bwd(g):
        return (np.expand_dims(g, ax) * soft,)

    return _make(out, "logsumexp", (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra / layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with ``b`` of shape (C,) broadcast along axis 1 of ``x``."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    return _make(x.data + b.data.reshape(view), "add_bias", (x, b), lambda g: (g, g.sum(axis=red)))


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(x: np.ndarray, kshape, stride: int, pad: int, out_hw) -> np.ndarray:
    """Strided (N, C, Ho, Wo, kh, kw) view of the padded input, one window per output pixel."""
    ho, wo = out_hw
    win = sliding_window_view(_pad(x, pad), kshape, axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    _, _, h, wd = x.shape
    _, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    cols = _windows(x, (kh, kw), stride, pad, (ho, wo))
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_bwd_input(g: np.ndarray, w: np.ndarray, stride: int, pad: int, in_hw) -> np.ndarray:
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
    taps = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    # scatter each kernel tap back onto the (channels-last) padded input grid
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += taps[..., i, j]
    dxp = dxp[:, pad : pad + h, pad : pad + wd, :]
    return np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))


def _conv_bwd_weight(g: np.ndarray, x: np.ndarray, stride: int, pad: int, kshape) -> np.ndarray:
    _, _, ho, wo = g.shape
    cols = _windows(x, kshape[2:], stride, pad, (ho, wo))
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (N, C, H, W) with w (O, C, kh, kw), no bias."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    h, wd = x.shape[2:]
    if _conv_out(h, w.shape[2], stride, padding) < 1 or _conv_out(wd, w.shape[3], stride, padding) < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    out = _conv_fwd(x.data, w.data, stride, padding)

    def bwd(g):
        gx = _conv_bwd_input(g, w.data, stride, padding, (h, wd)) if x.requires_grad else None
        gw = _conv_bwd_weight(g, x.data, stride, padding, w.shape) if w.requires_grad else None
        return gx, gw

    return _make(out, "conv2d", (x, w), bwd)


def conv_transpose2d(
    x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, output_padding: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d`: x (N, O, h, w) with w (O, C, kh, kw) -> (N, C, H, W).

    ``H = (h - 1) * stride - 2 * padding + kh + output_padding``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: shape mismatch {x.shape} vs {w.shape}")
    if not 0 <= output_padding < max(stride, 1):
        raise ValueError("conv_transpose2d: output_padding must be in [0, stride)")
    kh, kw = w.shape[2:]
    hi, wi = x.shape[2:]
    h = (hi - 1) * stride - 2 * padding + kh + output_padding
    wd = (wi - 1) * stride - 2 * padding + kw + output_padding
    if h < 1 or wd < 1 or _conv_out(h, kh, stride, padding) != hi:
        raise ShapeError(f"conv_transpose2d: inconsistent geometry for {x.shape} and {w.shape}")
    out = _conv_bwd_input(x.data, w.data, stride, padding, (h, wd))

    def bwd(g):
        gx = _conv_fwd(g, w.data, stride, padding) if x.requires_grad else None
        gw = _conv_bwd_weight(x.data, g, stride, padding, w.shape) if w.requires_grad else None
        return gx, gw

    return _make(out, "conv_transpose2d", (x, w), bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean=None, var=None, eps: float = 1e-5):
    """Per-channel normalization over all axes except 1.

    With ``mean``/``var`` given (eval mode) those statistics are used as
    constants; otherwise batch statistics are computed and differentiated
    through.  Returns ``(out, batch_mean, batch_var)``; the statistics are
    ``None`` in eval mode.
    """
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: shape mismatch {x.shape} vs {gamma.shape}/{beta.shape}")
    red = (0,) + tuple(range(2, x.ndim))
    view = (1, -1) + (1,) * (x.ndim - 2)
    count = x.data.size // x.shape[1]
    use_batch = mean is None
    if use_batch:
        mu = x.data.mean(axis=red)
        v = x.data.var(axis=red)
    else:
        mu, v = np.asarray(mean, dtype=np.float64), np.asarray(var, dtype=np.float64)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - mu.reshape(view)) * inv.reshape(view)
    out = xhat * gamma.data.reshape(view) + beta.data.reshape(view)

    def bwd(g):
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gxhat = g * gamma.data.reshape(view)
        if use_batch:
            gx = (
                inv.reshape(view)
                / count
                * (
                    count * gxhat
                    - gxhat.sum(axis=red).reshape(view)
                    - xhat * (gxhat * xhat).sum(axis=red).reshape(view)
                )
            )
        else:
            gx = gxhat * inv.reshape(view)
        return gx, gg, gb

    res = _make(out, "batch_norm", (x, gamma, beta), bwd)
    if use_batch:
        return res, mu, v
    return res, None, None


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between the autodiff gradient of ``f`` and central differences.

    Per component: ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64, copy=True)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = f(Tensor(base.copy())).item()
        flat[k] = orig - step
        fm = f(Tensor(base.copy())).item()
        flat[k] = orig
        nflat[k] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
