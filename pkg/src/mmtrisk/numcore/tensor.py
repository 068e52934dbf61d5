"""Define-by-run reverse-mode autodiff over float64 NumPy arrays.

A :class:`Tensor` records the op that produced it and a closure mapping the
output gradient to one gradient per parent. The graph is rebuilt on every
forward pass; :func:`backward` walks it in reverse topological order.

Broadcasting is limited to leading-batch expansion: in ``add``/``sub``/``mul``
the second operand may match a trailing slice of the first operand's shape.
Anything else raises :class:`ShapeError`.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels

LAYER_NORM_EPS = 1e-5

_grad_enabled = True


class ShapeError(ValueError):
    """Operands do not satisfy an op's shape rule."""


@contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() on tensor of shape {self.shape}")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_trailing(op, a, b):
    sa, sb = a.shape, b.shape
    if sb != sa and (len(sb) > len(sa) or sa[len(sa) - len(sb):] != sb):
        raise ShapeError(f"{op}: shapes {sa} and {sb} are not compatible (only leading-batch expansion)")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return g.reshape((-1,) + shape).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    _check_trailing("add", a, b)
    shape_b = b.shape

    def backward(g):
        return g, _reduce_to(g, shape_b)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    _check_trailing("sub", a, b)
    shape_b = b.shape

    def backward(g):
        return g, -_reduce_to(g, shape_b)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    _check_trailing("mul", a, b)
    shape_b = b.shape

    def backward(g):
        return g * b.data, _reduce_to(g * a.data, shape_b)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a, c):
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a):
    # derivative at exactly 0 is taken as 0
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softplus(a):
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _result(y, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def dropout(a, rate, rng):
    """Inverted dropout; identity when ``rate`` is 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# linear algebra and reshaping
# ---------------------------------------------------------------------------


def matmul(a, b):
    """``a @ b`` for 2-D operands, batched 3-D operands, or 3-D @ 2-D."""
    sa, sb = a.shape, b.shape
    ok = (
        a.ndim in (2, 3)
        and b.ndim in (2, 3)
        and sa[-1] == sb[-2]
        and not (a.ndim == 2 and b.ndim == 3)
        and (b.ndim == 2 or sa[0] == sb[0])
    )
    if not ok:
        raise ShapeError(f"matmul: cannot multiply shapes {sa} and {sb}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if a.ndim == 3 and b.ndim == 2:
                gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _result(data, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


def concat_last_axis(tensors):
    tensors = list(tensors)
    lead = tensors[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in tensors):
        raise ShapeError(f"concat_last_axis: leading shapes differ: {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    data = np.concatenate([t.data for t in tensors], axis=-1)
    return _result(data, tuple(tensors), backward, "concat_last_axis")


def concat_rows(tensors):
    """Stack along the first axis (token lists, CLS append)."""
    tensors = list(tensors)
    tail = tensors[0].shape[1:]
    if any(t.ndim < 1 or t.shape[1:] != tail for t in tensors):
        raise ShapeError(f"concat_rows: trailing shapes differ: {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    data = np.concatenate([t.data for t in tensors], axis=0)
    return _result(data, tuple(tensors), backward, "concat_rows")


def embedding_lookup(table, indices):
    """Gather rows of a 2-D table; gradients scatter-add back to those rows."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"embedding_lookup: table {table.shape} with indices of shape {idx.shape}")
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError(f"embedding_lookup: index out of range for table {table.shape}")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        if np.unique(idx).size == idx.size:
            gt[idx] = g
        else:
            # one-hot product sums repeated rows; cheap for small vocabularies
            onehot = np.zeros((n_rows, idx.size))
            onehot[idx, np.arange(idx.size)] = 1.0
            gt += onehot @ g
        return (gt,)

    return _result(table.data[idx], (table,), backward, "embedding_lookup")


# ---------------------------------------------------------------------------
# reductions and normalisations
# ---------------------------------------------------------------------------


def sum_all(a):
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a):
    shape, n = a.shape, a.data.size
    if n == 0:
        raise ShapeError("mean: empty tensor")
    return _result(
        np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


def softmax_rows(a):
    if a.ndim < 1 or a.shape[-1] == 0:
        raise ShapeError(f"softmax_rows: invalid shape {a.shape}")
    y = kernels.softmax_rows_fwd(a.data)
    return _result(y, (a,), lambda g: (kernels.softmax_rows_bwd(y, g),), "softmax_rows")


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with gain {gain.shape} and bias {bias.shape}")
    y, xhat, rstd = kernels.layer_norm_fwd(x.data, gain.data, bias.data, eps)
    shape = x.shape

    def backward(g):
        dx, dgain, dbias = kernels.layer_norm_bwd(g, xhat, rstd, gain.data)
        return dx.reshape(shape), dgain, dbias

    return _result(y, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# dispatcher and backward pass
# ---------------------------------------------------------------------------

OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "softmax_rows": softmax_rows,
    "layer_norm": layer_norm,
    "concat_last_axis": lambda *ts: concat_last_axis(ts),
    "concat_rows": lambda *ts: concat_rows(ts),
    "mean": mean,
    "sum": sum_all,
    "embedding_lookup": embedding_lookup,
}


def forward_op(kind, inputs, **kwargs):
    """Apply the primitive named ``kind`` to ``inputs``.

    ``embedding_lookup`` takes ``(table,)`` plus ``indices=...``.
    """
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss):
    """Accumulate d(loss)/d(node) into ``.grad`` of every node that requires grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        # gradient arrays are never modified in place, so sharing them is safe
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
