"""Reverse-mode automatic differentiation over dense numpy arrays.

The op graph is define-by-run: every operation records its inputs and a
backward rule on the output tensor, so each forward pass builds a fresh
tape and variable-length sequences cost nothing extra.  ``backward()``
linearizes the recorded ops topologically (inputs before outputs) and
visits each exactly once, accumulating gradients into ``.grad`` buffers.

Broadcasting is deliberately restricted to scalar-with-tensor and
equal-shape operands; anything else must go through explicit
``reshape`` / ``expand_rows`` ops.  Ties in ``max_along`` route the
whole gradient to the lowest-index maximal element.

Tensors are treated as immutable after construction; the optimizer is
the single writer of parameter data, and disjoint graphs over shared
(read-only) parameters are safe to evaluate in parallel.
"""

import contextlib

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


def _as_float_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense array plus optional gradient buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None):
        return sum_along(self, axis)

    def mean(self, axis=None):
        return mean_along(self, axis)

    def max(self, axis=None):
        return max_along(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        """Backpropagate from a one-element tensor through the recorded tape."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a one-element tensor, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                # The tape is single-use; drop links so intermediates free up.
                node._backward_fn = None
                node._parents = ()


def _toposort(root):
    order = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _coerce(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _acc(tensor, g):
    if tensor.requires_grad:
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)
        tensor.grad += g


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED:
        grad_parents = tuple(p for p in parents if p.requires_grad)
        if grad_parents:
            out.requires_grad = True
            out._parents = grad_parents
            out._backward_fn = backward_fn
    return out


def _check_same_or_scalar(a, b, op):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, tensor):
    if tensor.data.size == 1 and g.size != 1:
        return np.asarray(g.sum()).reshape(tensor.shape)
    return g


# ---------------------------------------------------------------------------
# Elementwise and arithmetic ops
# ---------------------------------------------------------------------------


def _coerce_pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def add(a, b):
    a, b = _coerce_pair(a, b)
    _check_same_or_scalar(a, b, "add")
    out_data = a.data + b.data

    def bw(g):
        _acc(a, _reduce_to(g, a))
        _acc(b, _reduce_to(g, b))

    return _node(out_data, (a, b), bw)


def sub(a, b):
    a, b = _coerce_pair(a, b)
    _check_same_or_scalar(a, b, "sub")
    out_data = a.data - b.data

    def bw(g):
        _acc(a, _reduce_to(g, a))
        _acc(b, _reduce_to(-g, b))

    return _node(out_data, (a, b), bw)


def mul(a, b):
    a, b = _coerce_pair(a, b)
    _check_same_or_scalar(a, b, "mul")
    out_data = a.data * b.data

    def bw(g):
        _acc(a, _reduce_to(g * b.data, a))
        _acc(b, _reduce_to(g * a.data, b))

    return _node(out_data, (a, b), bw)


def scale(a, factor):
    factor = float(factor)

    def bw(g):
        _acc(a, g * factor)

    return _node(a.data * factor, (a,), bw)


def tanh(a):
    y = np.tanh(a.data)

    def bw(g):
        _acc(a, g * (1.0 - y * y))

    return _node(y, (a,), bw)


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _acc(a, g * y * (1.0 - y))

    return _node(y, (a,), bw)


def relu(a):
    mask = a.data > 0

    def bw(g):
        _acc(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), bw)


def exp(a):
    y = np.exp(a.data)

    def bw(g):
        _acc(a, g * y)

    return _node(y, (a,), bw)


def log(a):
    def bw(g):
        _acc(a, g / a.data)

    return _node(np.log(a.data), (a,), bw)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; gradient passes wherever the input was kept."""
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _acc(a, g * mask)

    return _node(np.clip(a.data, lo, hi), (a,), bw)


def dropout(a, p, rng):
    """Inverted dropout with keep-scaling; identity when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    mask = mask.astype(a.dtype)

    def bw(g):
        _acc(a, g * mask)

    return _node(a.data * mask, (a,), bw)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product for 2Dx2D, 2Dx1D and 1Dx2D operands."""
    an, bn = a.data.ndim, b.data.ndim
    if an not in (1, 2) or bn not in (1, 2) or an + bn < 3:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul: inner extents disagree, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if an == 2 and bn == 2:
            _acc(a, g @ b.data.T)
            _acc(b, a.data.T @ g)
        elif an == 2 and bn == 1:
            _acc(a, np.outer(g, b.data))
            _acc(b, a.data.T @ g)
        else:  # 1D @ 2D
            _acc(a, b.data @ g)
            _acc(b, np.outer(a.data, g))

    return _node(out_data, (a, b), bw)


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")

    def bw(g):
        _acc(a, g.T)

    return _node(a.data.T.copy(), (a,), bw)


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def bw(g):
        _acc(a, g.reshape(a.shape))

    return _node(out_data, (a,), bw)


def expand_rows(v, n_rows):
    """Repeat a vector as n_rows identical rows (explicit broadcast)."""
    if v.data.ndim != 1:
        raise ShapeError(f"expand_rows expects a vector, got shape {v.shape}")
    out_data = np.broadcast_to(v.data, (n_rows, v.shape[0])).copy()

    def bw(g):
        _acc(v, g.sum(axis=0))

    return _node(out_data, (v,), bw)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum_along(a, axis=None):
    out_data = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            _acc(a, np.full_like(a.data, g))
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _node(out_data, (a,), bw)


def mean_along(a, axis=None):
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    out_data = a.data.mean(axis=axis)
    inv = 1.0 / float(count)

    def bw(g):
        if axis is None:
            _acc(a, np.full_like(a.data, g * inv))
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g * inv, axis), a.shape))

    return _node(out_data, (a,), bw)


def max_along(a, axis=None):
    """Max reduction; on ties the gradient goes to the lowest flat index."""
    if axis is None:
        idx = int(np.argmax(a.data))
        out_data = a.data.reshape(-1)[idx]

        def bw(g):
            buf = np.zeros_like(a.data)
            buf.reshape(-1)[idx] = g
            _acc(a, buf)

        return _node(out_data, (a,), bw)

    idx = np.argmax(a.data, axis=axis)
    out_data = np.max(a.data, axis=axis)

    def bw_axis(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(
            buf, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
        )
        _acc(a, buf)

    return _node(out_data, (a,), bw_axis)


def softmax(a, axis):
    """Numerically stable softmax along one axis."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _acc(a, (g - dot) * y)

    return _node(y, (a,), bw)


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, stop)
            _acc(t, g[tuple(sl)])

    return _node(out_data, tuple(tensors), bw)


def stack_rows(tensors):
    """Stack equal-length vectors into a matrix, one per row."""
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=0)

    def bw(g):
        for i, t in enumerate(tensors):
            _acc(t, g[i])

    return _node(out_data, tuple(tensors), bw)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[sl] = g
        _acc(a, buf)

    return _node(a.data[sl].copy(), (a,), bw)


def embedding_row(table, index):
    """Select one row of an embedding matrix by integer index."""
    index = int(index)

    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        table.grad[index] += g

    return _node(table.data[index].copy(), (table,), bw)


def pick(v, index):
    """Select one element of a vector as a 0-d tensor."""
    if v.data.ndim != 1:
        raise ShapeError(f"pick expects a vector, got shape {v.shape}")
    index = int(index)

    def bw(g):
        buf = np.zeros_like(v.data)
        buf[index] = g
        _acc(v, buf)

    return _node(v.data[index], (v,), bw)


def gather_per_row(a, indices):
    """out[i] = a[i, indices[i]] for a matrix and one index per row."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_per_row expects a matrix, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"need one index per row: {idx.shape} vs {a.shape}")
    rows = np.arange(a.shape[0])

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[rows, idx] = g
        _acc(a, buf)

    return _node(a.data[rows, idx].copy(), (a,), bw)


# ---------------------------------------------------------------------------
# Fused composite ops backed by the kernel module
# ---------------------------------------------------------------------------


def conv2d(x, w, b, stride=1, pad=0):
    """2-D convolution of x[H,W,Cin] with w[kh,kw,Cin,Cout] plus bias."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need x[H,W,Ci], w[kh,kw,Ci,Co]; got {x.shape}, {w.shape}")
    if x.shape[2] != w.shape[2]:
        raise ShapeError(f"conv2d: channel mismatch {x.shape} vs {w.shape}")
    if b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({w.shape[3]},)")
    y = kernels.conv2d_forward(x.data, w.data, b.data, stride, pad)

    def bw(g):
        dx, dw, db = kernels.conv2d_backward(x.data, w.data, g, stride, pad)
        _acc(x, dx)
        _acc(w, dw)
        _acc(b, db)

    return _node(y, (x, w, b), bw)


def lstm_cell(w, u, b, x, h_prev, c_prev):
    """One LSTM step; returns [h_t ; c_t] stacked into a 2*d_h vector.

    Gate order along the 4*d_h parameter axis is input, forget, output,
    candidate.
    """
    d_h = h_prev.shape[0]
    if w.shape[0] != 4 * d_h or w.shape[1] != x.shape[0] or u.shape != (4 * d_h, d_h):
        raise ShapeError(
            f"lstm_cell: w{w.shape} u{u.shape} x{x.shape} h{h_prev.shape} disagree"
        )
    hc, gates, tanh_c = kernels.lstm_cell_forward(
        w.data, u.data, b.data, x.data, h_prev.data, c_prev.data
    )

    def bw(g):
        dw, du, db, dx, dhp, dcp = kernels.lstm_cell_backward(
            w.data, u.data, x.data, h_prev.data, c_prev.data,
            gates, tanh_c, g[:d_h], g[d_h:],
        )
        _acc(w, dw)
        _acc(u, du)
        _acc(b, db)
        _acc(x, dx)
        _acc(h_prev, dhp)
        _acc(c_prev, dcp)

    return _node(hc, (w, u, b, x, h_prev, c_prev), bw)


def attn_scores(xu, u, v):
    """scores[j] = v . tanh(xu[j] + u) for every grid row j."""
    if xu.data.ndim != 2 or xu.shape[1] != u.shape[0] or u.shape != v.shape:
        raise ShapeError(f"attn_scores: xu{xu.shape} u{u.shape} v{v.shape} disagree")
    scores, t_cache = kernels.attn_scores_forward(xu.data, u.data, v.data)

    def bw(g):
        dxu, du, dv = kernels.attn_scores_backward(g, t_cache, v.data)
        _acc(xu, dxu)
        _acc(u, du)
        _acc(v, dv)

    return _node(scores, (xu, u, v), bw)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def gradcheck(f, inputs, step=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must return a one-element tensor.  The relative error per
    coordinate is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"gradcheck requires scalar output, got shape {out.shape}")
    out.backward()
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs
    ]
    max_err = 0.0
    with no_grad():
        for t, grad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(f(*inputs).data)
                flat[i] = orig - step
                f_minus = float(f(*inputs).data)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                err = abs(gflat[i] - numeric) / max(1e-8, abs(gflat[i]) + abs(numeric))
                max_err = max(max_err, err)
    return max_err
