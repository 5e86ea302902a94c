"""Dense tensors with tape-based reverse-mode differentiation.

Every op is a pure function of its inputs. When an input is tracked on the
active :class:`Tape`, the op appends a node carrying the saved values its
backward rule needs; otherwise it just computes the value.

    with Tape() as tape:
        w = tape.watch(np.ones((3, 2)))
        loss = mean(relu(matmul(x, w)))
    grads = tape.backward(loss)
    grads[w]  # ndarray shaped like w
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Gradients", "ShapeError", "NonFiniteError",
    "as_tensor", "add", "sub", "mul", "neg", "relu", "softplus",
    "matmul", "transpose", "reshape", "concat", "slice_last", "gather_rows",
    "softmax_masked", "attention_softmax", "layer_norm", "conv2d", "upsample_nearest",
    "sum", "mean", "l1_loss", "l2_loss",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-d float array, optionally tracked on a tape."""

    __slots__ = ("data", "node_id", "tape")
    __array_priority__ = 1000

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tracked = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tracked})"

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

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Gradients:
    """Gradient lookup produced by :meth:`Tape.backward`."""

    def __init__(self, tape: "Tape", grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, x: Tensor) -> np.ndarray:
        if x.tape is not self._tape or x.node_id is None:
            raise KeyError("tensor is not tracked on this tape")
        g = self._grads[x.node_id]
        return np.zeros_like(x.data) if g is None else g

    def get(self, x: Tensor) -> np.ndarray:
        return self[x]


class Tape:
    """Append-only record of tracked ops; one per forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def watch(self, x) -> Tensor:
        """Return a leaf copy of ``x`` tracked on this tape."""
        data = x.data if isinstance(x, Tensor) else x
        t = Tensor(data)
        self._append(t, "leaf", (), None)
        return t

    def _append(self, out: Tensor, op: str, parents, backward) -> Tensor:
        out.node_id = len(self.nodes)
        out.tape = self
        self.nodes.append(_Node(op, parents, backward))
        return out

    def backward(self, root: Tensor) -> Gradients:
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape is not self:
            raise ValueError("root is not on this tape")
        grads: list = [None] * len(self.nodes)
        grads[root.node_id] = np.ones_like(root.data)
        for i in range(root.node_id, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or parent.tape is not self:
                    continue
                j = parent.node_id
                grads[j] = pg if grads[j] is None else grads[j] + pg
        return Gradients(self, grads)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a sum is non-finite iff some entry is, barring overflow of huge values
    if arr.size and not np.isfinite(arr.sum()):
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor],
            backward: Callable | None, checked: bool = False) -> Tensor:
    if not checked:
        _check_finite(data, op)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.tape is tape for p in parents):
        tape._append(out, op, tuple(parents), backward)
    return out


def _tracked(t: Tensor) -> bool:
    return t.tape is not None


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shapes(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shapes(a, b, "add")
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shapes(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shapes(a, b, "mul")
    return _result(a.data * b.data, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    # gradient at exactly 0 is 0
    return _result(np.where(on, a.data, 0).astype(a.dtype), "relu", (a,),
                   lambda g: (g * on,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype)
    sig = 0.5 * (1 + np.tanh(0.5 * x))
    return _result(out, "softplus", (a,), lambda g: (g * sig,))


# -- linear algebra and shape ---------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if _tracked(a) else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if _tracked(b) else None
        return ga, gb

    return _result(out, "matmul", (a, b), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, -1, -2), "transpose", (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    first = next((t for t in tensors if isinstance(t, Tensor)), None)
    ts = [as_tensor(t, first) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, "concat", ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_last(a, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop], "slice", (a,), backward)


def gather_rows(x, idx) -> Tensor:
    """Rows ``idx`` of ``x[..., R, C]``; ``idx`` is ``[N]`` or ``[..., N]``."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if x.ndim < 2:
        raise ShapeError(f"gather_rows: need at least 2-d input, got {x.shape}")
    rows = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexError(f"gather_rows: index out of range for {rows} rows")
    lead = x.shape[:-2]
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, lead + idx.shape)
    elif idx.shape[:-1] != lead:
        raise ShapeError(f"gather_rows: index shape {idx.shape} vs input {x.shape}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-2)

    def backward(g):
        full = np.zeros_like(x.data).reshape(-1, x.shape[-1])
        offsets = (np.arange(int(np.prod(lead, dtype=int))) * rows).reshape(lead + (1,))
        np.add.at(full, (idx + offsets).reshape(-1), g.reshape(-1, x.shape[-1]))
        return (full.reshape(x.shape),)

    return _result(out, "gather_rows", (x,), backward)


# -- normalisation ---------------------------------------------------------------

# elements per row block in attention_softmax (4 MB of float32)
_ATTENTION_BLOCK = 1 << 20


def softmax_masked(x, mask=None) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Masked entries are excluded (not treated as -inf) and come out exactly 0.
    """
    x = as_tensor(x)
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        try:
            keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        except ValueError:
            raise ShapeError(f"softmax_masked: mask {np.shape(mask)} vs {x.shape}") from None
    if not keep.any(axis=-1).all():
        raise ValueError("softmax_masked: a row has no unmasked entries")
    top = np.max(x.data, axis=-1, keepdims=True, where=keep, initial=-np.inf)
    # one HW x N buffer updated in place: large temporaries dominate the cost at high resolution
    y = x.data - top
    if mask is not None:
        np.copyto(y, -np.inf, where=~keep)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, "softmax", (x,), backward)


def attention_softmax(keys, queries, mask=None, scale: float = 1.0) -> Tensor:
    """``softmax_masked((keys @ queries^T) * scale, mask)`` without full-size temporaries.

    Same arithmetic as the composed ops. The ``[..., M, N]`` result is filled
    in blocks of rows that stay in cache, so cost grows linearly with ``M``.
    """
    keys, queries = _pair(keys, queries)
    if keys.ndim < 2 or queries.ndim < 2 or keys.shape[-1] != queries.shape[-1]:
        raise ShapeError(f"attention_softmax: keys {keys.shape} vs queries {queries.shape}")
    M, N = keys.shape[-2], queries.shape[-2]
    try:
        shape = np.broadcast_shapes(keys.shape[:-2], queries.shape[:-2]) + (M, N)
    except ValueError:
        raise ShapeError(f"attention_softmax: batch dims of {keys.shape} and {queries.shape} differ") from None
    keep = None
    if mask is not None:
        try:
            keep = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
        except ValueError:
            raise ShapeError(f"attention_softmax: mask {np.shape(mask)} vs {shape}") from None
        if not keep.any(axis=-1).all():
            raise ValueError("attention_softmax: a row has no unmasked entries")
        if keep.all():
            keep = None
    y = np.empty(shape, np.result_type(keys.dtype, queries.dtype))
    c = np.asarray(scale, dtype=y.dtype)
    q_t = np.swapaxes(queries.data, -1, -2)
    rows = max(1, _ATTENTION_BLOCK // max(N, 1))
    for lo in range(0, M, rows):
        blk = y[..., lo:lo + rows, :]
        np.matmul(keys.data[..., lo:lo + rows, :], q_t, out=blk)
        blk *= c
        if keep is None:
            blk -= np.max(blk, axis=-1, keepdims=True)
        else:
            k = keep[..., lo:lo + rows, :]
            blk -= np.max(blk, axis=-1, keepdims=True, where=k, initial=-np.inf)
            np.copyto(blk, -np.inf, where=~k)
        np.exp(blk, out=blk)
        total = blk.sum(axis=-1, keepdims=True)
        # every row holds exp(0) = 1, so a non-finite logit is the only way to a bad sum
        _check_finite(total, "attention_softmax")
        blk /= total

    def backward(g):
        gl = y * (g - (g * y).sum(axis=-1, keepdims=True))
        gl *= c
        gk = _unbroadcast(np.matmul(gl, queries.data), keys.shape) if _tracked(keys) else None
        gq = (_unbroadcast(np.swapaxes(np.matmul(np.swapaxes(keys.data, -1, -2), gl), -1, -2), queries.shape)
              if _tracked(queries) else None)
        return gk, gq

    return _result(y, "attention_softmax", (keys, queries), backward, checked=True)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma = _pair(x, gamma)
    beta = as_tensor(beta, x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _result(out.astype(x.dtype), "layer_norm", (x, gamma, beta), backward)


# -- images ------------------------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """Cross-correlation of ``x[..., H, W, Cin]`` with ``w[k, k, Cin, Cout]``.

    ``k`` is 1 or 3; 3x3 kernels use zero "same" padding of 1.
    """
    x, w = _pair(x, w)
    k = w.shape[0]
    if w.ndim != 4 or k not in (1, 3) or w.shape[1] != k:
        raise ValueError(f"conv2d: unsupported kernel shape {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    if x.ndim < 3 or x.shape[-1] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    cin, cout = w.shape[2], w.shape[3]
    H, W = x.shape[-3], x.shape[-2]
    H2, W2 = (H - 1) // stride + 1, (W - 1) // stride + 1
    lead = x.shape[:-3]
    if k == 1:
        xs = x.data[..., ::stride, ::stride, :]
        cols = xs
    else:
        pad = [(0, 0)] * len(lead) + [(1, 1), (1, 1), (0, 0)]
        xp = np.pad(x.data, pad)
        cols = np.concatenate(
            [xp[..., i:i + stride * (H2 - 1) + 1:stride, j:j + stride * (W2 - 1) + 1:stride, :]
             for i in range(3) for j in range(3)], axis=-1)
    wm = w.data.reshape(k * k * cin, cout)
    out = cols @ wm
    parents = [x, w]
    if b is not None:
        b = as_tensor(b, x)
        out = out + b.data
        parents.append(b)

    def backward(g):
        gw = (cols.reshape(-1, k * k * cin).T @ g.reshape(-1, cout)).reshape(w.shape)
        if not _tracked(x):
            gx = None
        elif k == 1:
            gcols = g @ wm.T
            gx = np.zeros_like(x.data)
            gx[..., ::stride, ::stride, :] = gcols
        else:
            gcols = g @ wm.T
            gxp = np.zeros(lead + (H + 2, W + 2, cin), dtype=x.dtype)
            for n, (i, j) in enumerate((i, j) for i in range(3) for j in range(3)):
                gxp[..., i:i + stride * (H2 - 1) + 1:stride,
                    j:j + stride * (W2 - 1) + 1:stride, :] += gcols[..., n * cin:(n + 1) * cin]
            gx = gxp[..., 1:-1, 1:-1, :]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    return _result(out, "conv2d", parents, backward)


def upsample_nearest(x) -> Tensor:
    """Nearest-neighbour x2 upsampling of ``x[..., H, W, C]``."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=-3), 2, axis=-2)

    def backward(g):
        H, W, C = x.shape[-3:]
        g = g.reshape(g.shape[:-3] + (H, 2, W, 2, C))
        return (g.sum(axis=(-4, -2)),)

    return _result(out, "upsample", (x,), backward)


# -- reductions and losses -----------------------------------------------------

def sum(x, axis=None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, "sum", (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.asarray(x.data.mean(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(out, "mean", (x,), backward)


def _loss_mask(pred: Tensor, gt, mask):
    gt = np.asarray(gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ShapeError(f"loss: prediction {pred.shape} vs target {gt.shape}")
    keep = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, bool)
    if keep.shape != pred.shape:
        raise ShapeError(f"loss: mask {keep.shape} vs prediction {pred.shape}")
    n = int(keep.sum())
    if n == 0:
        raise ValueError("loss: no valid pixels")
    return gt, keep, n


def l1_loss(pred, gt, mask=None) -> Tensor:
    """Mean absolute error over ``mask``."""
    pred = as_tensor(pred)
    gt, keep, n = _loss_mask(pred, gt, mask)
    diff = np.where(keep, pred.data - gt, 0)
    out = np.asarray(np.abs(diff).sum() / n, dtype=pred.dtype)
    return _result(out, "l1_loss", (pred,), lambda g: (g * np.sign(diff) / n,))


def l2_loss(pred, gt, mask=None) -> Tensor:
    """Mean squared error over ``mask``."""
    pred = as_tensor(pred)
    gt, keep, n = _loss_mask(pred, gt, mask)
    diff = np.where(keep, pred.data - gt, 0)
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return _result(out, "l2_loss", (pred,), lambda g: (g * 2 * diff / n,))
