"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation records its inputs and a backward closure on the implicit
tape formed by the tensors' parent links. Calling :func:`backward` on a
scalar result walks the tape in reverse topological order and accumulates
gradients into every reachable leaf that requires them.

Only the operators needed by the models live here. Shapes are checked
eagerly and there is no broadcasting beyond scalar-with-tensor; the few
structured primitives (bias rows, sparse aggregation, fused state decay)
exist so the model code never needs implicit broadcasting either.
"""

from __future__ import annotations

import json
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "constant",
    "parameter",
    "no_grad",
    "backward",
    "record_tape",
    "make_op",
    "matmul",
    "add",
    "sub",
    "mul",
    "add_bias",
    "concat",
    "split",
    "reshape",
    "gather_rows",
    "gather_blocks",
    "set_rows",
    "scatter_mean_rows",
    "spmm",
    "SparseOperand",
    "sigmoid",
    "tanh",
    "softplus",
    "exp",
    "sin",
    "cos",
    "negate",
    "relu",
    "square",
    "scale",
    "tensor_sum",
    "tensor_mean",
    "save_params",
    "load_params",
    "params_to_jsonable",
    "params_from_jsonable",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when a value or gradient contains NaN or Inf."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array plus provenance for reverse-mode differentiation.

    ``grad`` is populated by :func:`backward` and always matches the value
    shape. Leaves created with ``parameter`` require gradients; constants
    never do. Result tensors carry parent links and a backward closure that
    maps the output gradient to per-parent gradients.
    """

    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward",
                 "_grad_owned")

    def __init__(self, values, requires_grad=False, op="leaf", parents=(), backward_fn=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward_fn
        self._grad_owned = False

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.values.shape})"

    # Arithmetic sugar; scalars are wrapped as constants.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return negate(self)

    def backward(self, leaves=None):
        backward(self, leaves=leaves)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(values, op, parents, backward_fn) -> Tensor:
    """Create an op result, recording provenance only when it can matter."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(values, op=op)
    return Tensor(values, requires_grad=True, op=op, parents=tuple(parents), backward_fn=backward_fn)


def make_op(values, op_name, parents, backward_fn) -> Tensor:
    """Record a custom primitive with a hand-written backward closure.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or None) per parent. Used for fused operations whose derivative is
    cheaper computed as a whole than composed from elementary steps.
    """
    return _make(values, op_name, tuple(_as_tensor(p) for p in parents), backward_fn)


def _accumulate(t: Tensor, g: np.ndarray):
    """Accumulate without copying on the (common) first and only visit.

    Backward closures may hand back arrays they do not own (e.g. the output
    gradient itself), so in-place addition is only safe once this tensor
    owns its gradient buffer; the second contribution triggers one fresh
    allocation.
    """
    if np.shape(g) != t.values.shape:
        raise ShapeError(f"gradient shape {np.shape(g)} does not match value shape "
                         f"{t.values.shape}")
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _topo_order(root: Tensor, follow_all=False):
    """Parents-before-children order of the graph reachable from ``root``."""
    order = []
    seen = set()
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
            if id(p) not in seen and (follow_all or p.requires_grad):
                stack.append((p, False))
    return order


class Tape:
    """Topologically ordered record of the operations behind one tensor."""

    def __init__(self, entries):
        self.entries = entries  # list of (op-name, input tensors, output tensor)

    def __len__(self):
        return len(self.entries)

    def check_topological(self) -> bool:
        produced = set()
        for _, inputs, output in self.entries:
            for t in inputs:
                if t._parents and id(t) not in produced:
                    return False
            produced.add(id(output))
        return True


def record_tape(root: Tensor) -> Tape:
    order = _topo_order(root, follow_all=True)
    entries = [(t.op, t._parents, t) for t in order if t._parents]
    return Tape(entries)


def backward(loss: Tensor, leaves=None):
    """Populate ``grad`` on every reachable differentiable tensor.

    ``loss`` must be scalar. ``leaves``, when given, are zero-filled if the
    loss does not reach them. Raises :class:`NonFiniteError` if the loss or
    any leaf gradient is not finite.
    """
    if loss.values.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.values.shape}")
    if not np.isfinite(loss.values):
        raise NonFiniteError(f"loss is not finite: {loss.values}")
    order = _topo_order(loss)
    for t in order:
        t.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for t in reversed(order):
        if t._backward is None or t.grad is None:
            continue
        grads = t._backward(t.grad)
        for p, g in zip(t._parents, grads):
            if g is not None and p.requires_grad:
                _accumulate(p, g)
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.values)
            elif not np.all(np.isfinite(leaf.grad)):
                raise NonFiniteError("non-finite gradient in backward pass")


# ---------------------------------------------------------------------------
# binary operations


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    out = av @ bv

    if bv.ndim == 2:
        def backward_fn(g):
            return g @ bv.T, av.T @ g
    else:
        def backward_fn(g):
            return np.outer(g, bv), av.T @ g

    return _make(out, "matmul", (a, b), backward_fn)


def _elementwise_pair(op_name, a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.shape != b.values.shape and a.values.shape != () and b.values.shape != ():
        raise ShapeError(f"{op_name}: shapes {a.values.shape} and {b.values.shape} differ "
                         "(only scalar-with-tensor is allowed)")
    return a, b


def _reduce_like(g, shape):
    return g.sum() if shape == () and np.ndim(g) != 0 else g


def add(a, b) -> Tensor:
    a, b = _elementwise_pair("add", a, b)

    def backward_fn(g):
        return _reduce_like(g, a.values.shape), _reduce_like(g, b.values.shape)

    return _make(a.values + b.values, "add", (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _elementwise_pair("sub", a, b)

    def backward_fn(g):
        return _reduce_like(g, a.values.shape), _reduce_like(-g, b.values.shape)

    return _make(a.values - b.values, "sub", (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _elementwise_pair("elementwise-mul", a, b)
    av, bv = a.values, b.values

    def backward_fn(g):
        return _reduce_like(g * bv, av.shape), _reduce_like(g * av, bv.shape)

    return _make(av * bv, "elementwise-mul", (a, b), backward_fn)


def add_bias(mat, vec) -> Tensor:
    """Add a length-d vector to every row of an (n, d) matrix."""
    mat, vec = _as_tensor(mat), _as_tensor(vec)
    if mat.values.ndim != 2 or vec.values.ndim != 1 or mat.values.shape[1] != vec.values.shape[0]:
        raise ShapeError(f"add-bias: shapes {mat.values.shape} and {vec.values.shape}")

    def backward_fn(g):
        return g, g.sum(axis=0)

    return _make(mat.values + vec.values[None, :], "add-bias", (mat, vec), backward_fn)


# ---------------------------------------------------------------------------
# structural operations


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    shapes = [t.values.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(s[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}")
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(
            g[(slice(None),) * axis + (slice(offsets[i], offsets[i + 1]),)]
            for i in range(len(sizes))
        )

    return _make(np.concatenate([t.values for t in tensors], axis=axis),
                 "concat", tuple(tensors), backward_fn)


def split(t, parts: int, axis=0):
    """Split into ``parts`` equal chunks along ``axis``; returns a list."""
    t = _as_tensor(t)
    size = t.values.shape[axis]
    if size % parts != 0:
        raise ShapeError(f"split: axis {axis} of size {size} not divisible into {parts} parts")
    step = size // parts
    outs = []
    for i in range(parts):
        sl = (slice(None),) * axis + (slice(i * step, (i + 1) * step),)

        def backward_fn(g, sl=sl):
            full = np.zeros_like(t.values)
            full[sl] = g
            return (full,)

        outs.append(_make(t.values[sl].copy(), "split", (t,), backward_fn))
    return outs


def reshape(t, shape) -> Tensor:
    t = _as_tensor(t)
    orig = t.values.shape

    def backward_fn(g):
        return (g.reshape(orig),)

    return _make(t.values.reshape(shape), "reshape", (t,), backward_fn)


def gather_rows(t, idx, unique: bool = False) -> Tensor:
    """Select rows by index; repeated indices are allowed.

    ``unique=True`` promises no index repeats, enabling a faster backward
    (plain assignment instead of scatter-add).
    """
    t = _as_tensor(t)
    idx = np.asarray(idx, dtype=np.intp)
    if t.values.ndim < 1 or (idx.size and idx.max() >= t.values.shape[0]):
        raise ShapeError(f"gather-rows: index out of range for shape {t.values.shape}")

    def backward_fn(g):
        full = np.zeros_like(t.values)
        if unique:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(t.values[idx], "gather-rows", (t,), backward_fn)


def gather_blocks(t, block_idx, block_rows: int) -> Tensor:
    """Select whole row blocks from a stacked (S * block_rows, d) tensor.

    Equivalent to gather-rows with a blockwise index pattern; the backward
    pass sums the output gradient per source block, which is much cheaper
    than elementwise scatter-adds for this access pattern.
    """
    t = _as_tensor(t)
    block_idx = np.asarray(block_idx, dtype=np.intp)
    n_rows, d = t.values.shape
    if n_rows % block_rows != 0:
        raise ShapeError(f"gather-blocks: {n_rows} rows not divisible into blocks "
                         f"of {block_rows}")
    s = n_rows // block_rows
    if block_idx.size and block_idx.max() >= s:
        raise ShapeError("gather-blocks: block index out of range")
    stacked = t.values.reshape(s, block_rows, d)

    def backward_fn(g):
        g3 = g.reshape(len(block_idx), block_rows, d)
        full = np.zeros((s, block_rows, d))
        for blk in np.unique(block_idx):
            full[blk] = g3[block_idx == blk].sum(axis=0)
        return (full.reshape(n_rows, d),)

    return _make(stacked[block_idx].reshape(-1, d), "gather-blocks", (t,), backward_fn)


def set_rows(t, idx, rows) -> Tensor:
    """Copy of ``t`` with ``rows`` written at (unique) indices ``idx``."""
    t, rows = _as_tensor(t), _as_tensor(rows)
    idx = np.asarray(idx, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise ShapeError("set-rows: duplicate indices")
    if rows.values.shape != (len(idx),) + t.values.shape[1:]:
        raise ShapeError(f"set-rows: rows shape {rows.values.shape} does not fit "
                         f"{len(idx)} rows of {t.values.shape}")
    out = t.values.copy()
    out[idx] = rows.values

    def backward_fn(g):
        gt = g.copy()
        gt[idx] = 0.0
        return gt, g[idx]

    return _make(out, "set-rows", (t, rows), backward_fn)


def scatter_mean_rows(src, dst_idx, num_rows: int, group_size) -> Tensor:
    """Scatter-add rows into ``num_rows`` slots, dividing by a fixed group size.

    ``group_size[n]`` is the caller-supplied divisor for slot n (the full
    structural neighborhood size). Slots with group size 0 must receive no
    contributions and come out as zero rows.
    """
    src = _as_tensor(src)
    dst_idx = np.asarray(dst_idx, dtype=np.intp)
    group = np.asarray(group_size, dtype=np.float64)
    if src.values.ndim != 2 or dst_idx.shape != (src.values.shape[0],) or group.shape != (num_rows,):
        raise ShapeError(f"scatter-mean-rows: src {src.values.shape}, idx {dst_idx.shape}, "
                         f"group {group.shape}, num_rows {num_rows}")
    if dst_idx.size and (dst_idx.max() >= num_rows or np.any(group[dst_idx] <= 0)):
        raise ShapeError("scatter-mean-rows: contribution to a slot with group size 0")
    out = np.zeros((num_rows, src.values.shape[1]), dtype=np.float64)
    np.add.at(out, dst_idx, src.values)
    divisor = np.where(group > 0, group, 1.0)
    out /= divisor[:, None]

    def backward_fn(g):
        return (g[dst_idx] / divisor[dst_idx, None],)

    return _make(out, "scatter-mean-rows", (src,), backward_fn)


class SparseOperand:
    """Constant sparse matrix with its transpose cached for backward."""

    def __init__(self, mat):
        self.mat = mat.tocsr()
        self._mat_t = None

    @property
    def mat_t(self):
        if self._mat_t is None:
            self._mat_t = self.mat.T.tocsr()
        return self._mat_t

    @property
    def shape(self):
        return self.mat.shape


def spmm(a: SparseOperand, x) -> Tensor:
    """Constant-sparse times dense: used for neighborhood aggregation."""
    x = _as_tensor(x)
    if x.values.ndim != 2 or a.shape[1] != x.values.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {a.shape} and {x.values.shape}")

    def backward_fn(g):
        return (a.mat_t @ g,)

    return _make(a.mat @ x.values, "spmm", (x,), backward_fn)


# ---------------------------------------------------------------------------
# elementwise unary operations


def _unary(op_name, t, out, grad_factory):
    def backward_fn(g):
        return (grad_factory(g),)

    return _make(out, op_name, (t,), backward_fn)


def sigmoid(t) -> Tensor:
    t = _as_tensor(t)
    y = expit(t.values)
    return _unary("sigmoid", t, y, lambda g: g * y * (1.0 - y))


def tanh(t) -> Tensor:
    t = _as_tensor(t)
    y = np.tanh(t.values)
    return _unary("tanh", t, y, lambda g: g * (1.0 - y * y))


def softplus(t) -> Tensor:
    t = _as_tensor(t)
    y = np.logaddexp(0.0, t.values)
    s = expit(t.values)
    return _unary("softplus", t, y, lambda g: g * s)


def exp(t) -> Tensor:
    t = _as_tensor(t)
    y = np.exp(t.values)
    return _unary("exp", t, y, lambda g: g * y)


def sin(t) -> Tensor:
    t = _as_tensor(t)
    return _unary("sin", t, np.sin(t.values), lambda g: g * np.cos(t.values))


def cos(t) -> Tensor:
    t = _as_tensor(t)
    return _unary("cos", t, np.cos(t.values), lambda g: -g * np.sin(t.values))


def negate(t) -> Tensor:
    t = _as_tensor(t)
    return _unary("negate", t, -t.values, lambda g: -g)


def relu(t) -> Tensor:
    t = _as_tensor(t)
    y = np.maximum(t.values, 0.0)
    return _unary("relu", t, y, lambda g: g * (y > 0))


def square(t) -> Tensor:
    t = _as_tensor(t)
    return _unary("square", t, t.values * t.values, lambda g: 2.0 * t.values * g)


def scale(t, s: float) -> Tensor:
    t = _as_tensor(t)
    s = float(s)
    return _unary("scale-by-scalar", t, t.values * s, lambda g: g * s)


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(t, axis=None) -> Tensor:
    t = _as_tensor(t)
    out = t.values.sum(axis=axis)

    def backward_fn(g):
        if axis is None:
            return (np.full_like(t.values, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), t.values.shape).copy(),)

    return _make(out, "sum", (t,), backward_fn)


def tensor_mean(t, axis=None) -> Tensor:
    t = _as_tensor(t)
    n = t.values.size if axis is None else t.values.shape[axis]
    out = t.values.mean(axis=axis)

    def backward_fn(g):
        if axis is None:
            return (np.full_like(t.values, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), t.values.shape) / n,)

    return _make(out, "mean", (t,), backward_fn)


# ---------------------------------------------------------------------------
# parameter serialization


def params_to_jsonable(params: dict) -> dict:
    """Flat {name: shape + row-major values} map; floats round-trip exactly."""
    out = {}
    for name in sorted(params):
        t = params[name]
        values = t.values if isinstance(t, Tensor) else np.asarray(t)
        out[name] = {"shape": list(values.shape), "values": values.ravel().tolist()}
    return out


def params_from_jsonable(data: dict) -> dict:
    out = {}
    for name, entry in data.items():
        arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"parameter {name!r} contains non-finite values")
        out[name] = arr
    return out


def save_params(params: dict, path):
    with open(path, "w") as f:
        json.dump(params_to_jsonable(params), f)


def load_params(path) -> dict:
    with open(path) as f:
        return params_from_jsonable(json.load(f))
