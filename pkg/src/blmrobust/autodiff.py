"""Define-then-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` is built once from leaves (``input``/``param``), constants and
operations, then evaluated any number of times with :func:`forward_eval` and
differentiated with :func:`backward_grad`. Operations whose inputs are all
constants are folded at build time.

Arrays are plain ``numpy.ndarray`` in float64; batched signals use the
``(batch, time, channel)`` layout throughout the package.

Example
-------
>>> g = Graph()
>>> x = g.input("x")
>>> g.set_output(sum_(x * x))
>>> backward_grad(g, {"x": np.array([1.0, 2.0])}, {"x"})["x"]
array([2., 4.])
"""

import weakref
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivisionByZero, NonFiniteValue, NonScalarOutput, ShapeMismatch

LEAF_OPS = ("input", "param")
IM2COL_MAX_PATCH = 16


class Node:
    """Handle to one graph node; supports arithmetic operators."""

    __slots__ = ("_graph", "id", "op", "inputs", "attrs", "name")
    # make ndarray <op> Node defer to Node's reflected operators
    __array_ufunc__ = None

    def __init__(self, graph, id, op, inputs, attrs, name=None):
        # weak, so a dropped graph and its folded arrays are freed without the cycle collector
        self._graph = weakref.ref(graph)
        self.id = id
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.name = name

    @property
    def graph(self):
        g = self._graph()
        if g is None:
            raise ValueError(f"node {self.id} outlived its graph")
        return g

    @property
    def is_const(self):
        return self.op == "const"

    @property
    def value(self):
        if not self.is_const:
            raise ValueError(f"node {self.id} ({self.op}) has no static value")
        return self.attrs["value"]

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.id} {self.op}{label}>"

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

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Topologically ordered list of nodes with named leaves."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}
        self.leaf_shapes = {}
        self.output = None

    def _new(self, op, inputs=(), attrs=None, name=None):
        node = Node(self, len(self.nodes), op, tuple(inputs), attrs or {}, name)
        self.nodes.append(node)
        return node

    def _leaf(self, kind, name, shape):
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        node = self._new(kind, name=name)
        self.leaves[name] = node
        self.leaf_shapes[name] = None if shape is None else tuple(shape)
        return node

    def input(self, name, shape=None):
        """Input leaf. ``shape`` may use ``None`` as a wildcard dimension."""
        return self._leaf("input", name, shape)

    def param(self, name, shape=None):
        return self._leaf("param", name, shape)

    def const(self, value):
        value = np.asarray(value, dtype=np.float64)
        return self._new("const", attrs={"value": value})

    def as_node(self, x):
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        return self.const(x)

    def apply(self, op, inputs, **attrs):
        inputs = [self.as_node(i) for i in inputs]
        if all(i.is_const for i in inputs):
            fwd = _OPS[op][0]
            value = fwd([i.value for i in inputs], attrs)
            return self.const(value)
        return self._new(op, [i.id for i in inputs], attrs)

    def set_output(self, node):
        self.output = self.as_node(node)
        return self.output

    def __len__(self):
        return len(self.nodes)


def _graph_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise TypeError("at least one operand must be a graph Node")


def _apply(op, inputs, **attrs):
    return _graph_of(*inputs).apply(op, inputs, **attrs)


# ---------------------------------------------------------------------------
# op implementations: forward(vals, attrs) -> array
#                     backward(g, vals, out, attrs, need) -> list of grads

def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _add_f(v, a):
    _check_broadcast(v[0], v[1], "add")
    return v[0] + v[1]


def _add_b(g, v, out, a, need):
    return [_unbroadcast(g, v[0].shape) if need[0] else None,
            _unbroadcast(g, v[1].shape) if need[1] else None]


def _sub_f(v, a):
    _check_broadcast(v[0], v[1], "sub")
    return v[0] - v[1]


def _sub_b(g, v, out, a, need):
    return [_unbroadcast(g, v[0].shape) if need[0] else None,
            _unbroadcast(-g, v[1].shape) if need[1] else None]


def _mul_f(v, a):
    _check_broadcast(v[0], v[1], "mul")
    return v[0] * v[1]


def _mul_b(g, v, out, a, need):
    return [_unbroadcast(g * v[1], v[0].shape) if need[0] else None,
            _unbroadcast(g * v[0], v[1].shape) if need[1] else None]


def _div_f(v, a):
    _check_broadcast(v[0], v[1], "div")
    if np.any(v[1] == 0):
        raise DivisionByZero("division by zero in graph")
    return v[0] / v[1]


def _div_b(g, v, out, a, need):
    ga = gb = None
    if need[0]:
        ga = _unbroadcast(g / v[1], v[0].shape)
    if need[1]:
        gb = _unbroadcast(-g * out / v[1], v[1].shape)
    return [ga, gb]


def _neg_f(v, a):
    return -v[0]


def _neg_b(g, v, out, a, need):
    return [-g]


def _scale_f(v, a):
    return v[0] * a["k"]


def _scale_b(g, v, out, a, need):
    return [g * a["k"]]


def _square_f(v, a):
    return v[0] * v[0]


def _square_b(g, v, out, a, need):
    return [2.0 * g * v[0]]


def _sqrt_f(v, a):
    if np.any(v[0] < 0):
        raise NonFiniteValue("sqrt of negative value")
    return np.sqrt(v[0])


def _sqrt_b(g, v, out, a, need):
    if np.any(out == 0):
        raise DivisionByZero("sqrt gradient at zero")
    return [g / (2.0 * out)]


def _matmul_f(v, a):
    x, w = v
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"matmul: {x.shape} @ {w.shape}")
    if x.ndim == 2:
        # one small product per row, so a row's result never depends on the batch size
        return (x[:, None, :] @ w)[:, 0, :]
    return x @ w


def _matmul_b(g, v, out, a, need):
    x, w = v
    gx = g @ w.T if need[0] else None
    gw = None
    if need[1]:
        gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return [gx, gw]


def _conv1d_f(v, a):
    # same padding, stride 1; x (B, T, Ci), w (Co, Ci, K)
    x, w = v
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeMismatch(f"conv1d: input {x.shape}, kernel {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeMismatch("conv1d: kernel size must be odd")
    t = x.shape[1]
    h = k // 2
    xp = np.pad(x, ((0, 0), (h, h), (0, 0)))
    if x.shape[2] * k <= IM2COL_MAX_PATCH:
        # few input channels: one wide product beats k skinny ones
        cols = sliding_window_view(xp, k, axis=1).reshape(x.shape[0], t, -1)
        return cols @ np.ascontiguousarray(w.reshape(w.shape[0], -1).T)
    wt = np.ascontiguousarray(w.transpose(2, 1, 0))
    out = xp[:, 0:t, :] @ wt[0]
    for j in range(1, k):
        out += xp[:, j:j + t, :] @ wt[j]
    return out


def _conv1d_b(g, v, out, a, need):
    x, w = v
    co, ci, k = w.shape
    b, t, _ = x.shape
    h = k // 2
    gx = gw = None
    if need[0]:
        gxp = np.zeros((b, t + 2 * h, ci))
        # contiguous (Co, Ci) slices keep matmul on the BLAS path
        wk = np.ascontiguousarray(w.transpose(2, 0, 1))
        for j in range(k):
            gxp[:, j:j + t, :] += g @ wk[j]
        gx = gxp[:, h:h + t, :]
    if need[1]:
        xp = np.pad(x, ((0, 0), (h, h), (0, 0)))
        g2 = g.reshape(-1, co)
        gw = np.empty_like(w)
        for j in range(k):
            gw[:, :, j] = g2.T @ xp[:, j:j + t, :].reshape(-1, ci)
    return [gx, gw]


def _relu_f(v, a):
    return np.maximum(v[0], 0.0)


def _relu_b(g, v, out, a, need):
    # subgradient 0 at the kink
    return [g * (v[0] > 0)]


def _affine_f(v, a):
    x, s, c = v
    _check_broadcast(x, s, "affine")
    _check_broadcast(x, c, "affine")
    return x * s + c


def _affine_b(g, v, out, a, need):
    x, s, c = v
    return [_unbroadcast(g * s, x.shape) if need[0] else None,
            _unbroadcast(g * x, s.shape) if need[1] else None,
            _unbroadcast(g, c.shape) if need[2] else None]


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _count(x, axis, ddof):
    return int(np.prod([x.shape[i] for i in _norm_axis(axis, x.ndim)])) - ddof


def _mean_f(v, a):
    n = _count(v[0], a["axis"], a["ddof"])
    if n <= 0:
        raise DivisionByZero("mean over too few entries")
    return np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"]) / n


def _mean_b(g, v, out, a, need):
    x = v[0]
    axes = _norm_axis(a["axis"], x.ndim)
    n = _count(x, a["axis"], a["ddof"])
    if not a["keepdims"]:
        g = np.expand_dims(g, axes)
    return [np.broadcast_to(g / n, x.shape).copy()]


def _sum_f(v, a):
    return np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"])


def _sum_b(g, v, out, a, need):
    x = v[0]
    axes = _norm_axis(a["axis"], x.ndim)
    if not a["keepdims"]:
        g = np.expand_dims(g, axes)
    return [np.broadcast_to(g, x.shape).copy()]


def _softmax_arr(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_array(x):
    """Plain-array softmax over the last axis (same arithmetic as the graph op)."""
    return _softmax_arr(x)


def _log_softmax_arr(x):
    s = x - x.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _softmax_f(v, a):
    return _softmax_arr(v[0])


def _softmax_b(g, v, out, a, need):
    return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


def _log_softmax_f(v, a):
    return _log_softmax_arr(v[0])


def _log_softmax_b(g, v, out, a, need):
    return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]


def _xent_f(v, a):
    logits, onehot = v
    if logits.shape != onehot.shape:
        raise ShapeMismatch(f"softmax_xent: {logits.shape} vs {onehot.shape}")
    return -(onehot * _log_softmax_arr(logits)).sum(axis=-1)


def _xent_b(g, v, out, a, need):
    logits, onehot = v
    gl = None
    if need[0]:
        p = _softmax_arr(logits)
        gl = (p * onehot.sum(axis=-1, keepdims=True) - onehot) * g[..., None]
    return [gl, None]


def _concat_f(v, a):
    try:
        return np.concatenate(v, axis=a["axis"])
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None


def _concat_b(g, v, out, a, need):
    sizes = np.cumsum([x.shape[a["axis"]] for x in v])[:-1]
    parts = np.split(g, sizes, axis=a["axis"])
    return [p if n else None for p, n in zip(parts, need)]


def _slice_f(v, a):
    sl = [slice(None)] * v[0].ndim
    sl[a["axis"]] = slice(a["start"], a["stop"])
    return v[0][tuple(sl)]


def _slice_b(g, v, out, a, need):
    gx = np.zeros_like(v[0])
    sl = [slice(None)] * v[0].ndim
    sl[a["axis"]] = slice(a["start"], a["stop"])
    gx[tuple(sl)] = g
    return [gx]


def _take_f(v, a):
    return v[0][a["indices"]]


def _take_b(g, v, out, a, need):
    gx = np.zeros_like(v[0])
    np.add.at(gx, a["indices"], g)
    return [gx]


def _pad_left_f(v, a):
    x = v[0]
    p = a["length"]
    if x.ndim != 3 or x.shape[1] > p:
        raise ShapeMismatch(f"pad_left: cannot pad {x.shape} to length {p}")
    out = np.zeros((x.shape[0], p, x.shape[2]))
    out[:, p - x.shape[1]:, :] = x
    return out


def _pad_left_b(g, v, out, a, need):
    return [g[:, a["length"] - v[0].shape[1]:, :]]


_OPS = {
    "add": (_add_f, _add_b),
    "sub": (_sub_f, _sub_b),
    "mul": (_mul_f, _mul_b),
    "div": (_div_f, _div_b),
    "neg": (_neg_f, _neg_b),
    "scale": (_scale_f, _scale_b),
    "square": (_square_f, _square_b),
    "sqrt": (_sqrt_f, _sqrt_b),
    "matmul": (_matmul_f, _matmul_b),
    "conv1d": (_conv1d_f, _conv1d_b),
    "relu": (_relu_f, _relu_b),
    "affine": (_affine_f, _affine_b),
    "mean": (_mean_f, _mean_b),
    "sum": (_sum_f, _sum_b),
    "softmax": (_softmax_f, _softmax_b),
    "log_softmax": (_log_softmax_f, _log_softmax_b),
    "softmax_xent": (_xent_f, _xent_b),
    "concat": (_concat_f, _concat_b),
    "slice": (_slice_f, _slice_b),
    "take": (_take_f, _take_b),
    "pad_left": (_pad_left_f, _pad_left_b),
}


# ---------------------------------------------------------------------------
# public op constructors

def add(a, b):
    return _apply("add", [a, b])


def sub(a, b):
    return _apply("sub", [a, b])


def mul(a, b):
    return _apply("mul", [a, b])


def div(a, b):
    return _apply("div", [a, b])


def neg(x):
    return _apply("neg", [x])


def scale(x, k):
    return _apply("scale", [x], k=float(k))


def square(x):
    return _apply("square", [x])


def sqrt(x):
    return _apply("sqrt", [x])


def matmul(x, w):
    """``x (..., n) @ w (n, m)``."""
    return _apply("matmul", [x, w])


def conv1d(x, w):
    """1D convolution over time, same padding, stride 1.

    ``x`` is ``(B, T, Cin)``, ``w`` is ``(Cout, Cin, K)`` with odd ``K``; the
    result is ``(B, T, Cout)`` (cross-correlation, as in most DL frameworks).
    """
    return _apply("conv1d", [x, w])


def relu(x):
    return _apply("relu", [x])


def affine(x, s, c):
    """``x * s + c`` with broadcasting (batch-norm style affine map)."""
    return _apply("affine", [x, s, c])


def mean(x, axis=None, keepdims=False, ddof=0):
    """Sum over ``axis`` divided by ``count - ddof``."""
    return _apply("mean", [x], axis=axis, keepdims=keepdims, ddof=int(ddof))


def sum_(x, axis=None, keepdims=False):
    return _apply("sum", [x], axis=axis, keepdims=keepdims)


def softmax(x):
    return _apply("softmax", [x])


def log_softmax(x):
    return _apply("log_softmax", [x])


def softmax_xent(logits, onehot):
    """Per-row cross-entropy of ``softmax(logits)`` against ``onehot``."""
    return _apply("softmax_xent", [logits, onehot])


def concat(xs, axis):
    return _apply("concat", list(xs), axis=axis)


def slice_axis(x, axis, start, stop):
    return _apply("slice", [x], axis=axis, start=start, stop=stop)


def take(x, indices):
    """Gather rows of ``x`` along axis 0 with an integer index array."""
    return _apply("take", [x], indices=np.asarray(indices, dtype=np.intp))


def pad_left(x, length):
    """Left-pad ``(B, W, C)`` with zeros along time to ``(B, length, C)``."""
    return _apply("pad_left", [x], length=int(length))


# ---------------------------------------------------------------------------
# evaluation

def _check_leaf_shape(name, value, shape):
    if shape is None:
        return
    if len(shape) != value.ndim or any(s is not None and s != d for s, d in zip(shape, value.shape)):
        raise ShapeMismatch(f"leaf {name!r}: expected shape {shape}, got {value.shape}")


def forward_eval(graph, bindings, check_finite=True):
    """Evaluate every node; returns a list indexed by node id."""
    values = [None] * len(graph.nodes)
    for node in graph.nodes:
        if node.op in LEAF_OPS:
            if node.name not in bindings:
                raise KeyError(f"leaf {node.name!r} is not bound")
            val = np.asarray(bindings[node.name], dtype=np.float64)
            _check_leaf_shape(node.name, val, graph.leaf_shapes[node.name])
        elif node.op == "const":
            val = node.attrs["value"]
        else:
            fwd = _OPS[node.op][0]
            val = fwd([values[i] for i in node.inputs], node.attrs)
        if check_finite and not np.all(np.isfinite(val)):
            raise NonFiniteValue(f"non-finite value at node {node.id} ({node.op})")
        values[node.id] = val
    return values


def _requires(graph, wrt_ids):
    req = [False] * len(graph.nodes)
    for node in graph.nodes:
        if node.id in wrt_ids:
            req[node.id] = True
        elif node.inputs:
            req[node.id] = any(req[i] for i in node.inputs)
    return req


def backward_grad(graph, bindings, wrt, values=None, output=None, check_finite=True):
    """Gradient of the scalar output w.r.t. the named leaves in ``wrt``.

    Pass ``values`` from a previous :func:`forward_eval` to skip recomputation.
    """
    out_node = graph.output if output is None else graph.as_node(output)
    if out_node is None:
        raise ValueError("graph has no designated output")
    if values is None:
        values = forward_eval(graph, bindings, check_finite=check_finite)
    if values[out_node.id].size != 1:
        raise NonScalarOutput(f"output has shape {values[out_node.id].shape}")
    wrt = set(wrt)
    unknown = wrt - set(graph.leaves)
    if unknown:
        raise KeyError(f"unknown leaves {sorted(unknown)}")
    wrt_ids = {graph.leaves[name].id for name in wrt}
    req = _requires(graph, wrt_ids)

    grads = [None] * len(graph.nodes)
    grads[out_node.id] = np.ones_like(values[out_node.id])
    for node in reversed(graph.nodes[:out_node.id + 1]):
        g = grads[node.id]
        if g is None or not node.inputs:
            continue
        need = [req[i] for i in node.inputs]
        if not any(need):
            continue
        bwd = _OPS[node.op][1]
        in_grads = bwd(g, [values[i] for i in node.inputs], values[node.id], node.attrs, need)
        for i, gi, n in zip(node.inputs, in_grads, need):
            if not n or gi is None:
                continue
            grads[i] = gi if grads[i] is None else grads[i] + gi

    result = {}
    for name in wrt:
        leaf = graph.leaves[name]
        g = grads[leaf.id]
        if g is None:
            g = np.zeros_like(values[leaf.id])
        if g.shape != values[leaf.id].shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != value shape for {name!r}")
        if check_finite and not np.all(np.isfinite(g)):
            raise NonFiniteValue(f"non-finite gradient for leaf {name!r}")
        result[name] = g
    return result


def value_and_grad(graph, bindings, wrt, check_finite=True):
    """Forward values plus gradients in one pass."""
    values = forward_eval(graph, bindings, check_finite=check_finite)
    grads = backward_grad(graph, bindings, wrt, values=values, check_finite=check_finite)
    return values, grads


# ---------------------------------------------------------------------------
# finite differences

@dataclass
class FiniteDiffReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    rel_errors: np.ndarray


def _relu_pattern(graph, values):
    return [values[n.inputs[0]] > 0 for n in graph.nodes if n.op == "relu"]


def finite_diff_report(graph, bindings, leaf, h=1e-5, entries=None, skip_kinks=False):
    """Compare the analytic gradient w.r.t. ``leaf`` with central differences.

    The relative error per entry is ``|analytic - fd| / max(1, |analytic|)``.
    With ``skip_kinks`` entries whose +/-h evaluation changes any ReLU's
    active set are skipped (the difference quotient straddles a kink there).
    """
    base_values = forward_eval(graph, bindings)
    analytic = backward_grad(graph, bindings, {leaf}, values=base_values)[leaf]
    base = np.asarray(bindings[leaf], dtype=np.float64)
    out_id = graph.output.id
    pattern = _relu_pattern(graph, base_values) if skip_kinks else None

    flat_idx = np.arange(base.size) if entries is None else np.asarray(entries)
    errors = []
    skipped = 0
    for idx in flat_idx:
        pos = np.unravel_index(int(idx), base.shape)
        evals = []
        crossed = False
        for sign in (1.0, -1.0):
            pert = base.copy()
            pert[pos] += sign * h
            vals = forward_eval(graph, {**bindings, leaf: pert})
            if skip_kinks:
                crossed = crossed or any(
                    not np.array_equal(p, q) for p, q in zip(pattern, _relu_pattern(graph, vals)))
            evals.append(float(vals[out_id].reshape(())))
        if crossed:
            skipped += 1
            continue
        fd = (evals[0] - evals[1]) / (2.0 * h)
        a = float(analytic[pos])
        errors.append(abs(a - fd) / max(1.0, abs(a)))
    errors = np.asarray(errors)
    return FiniteDiffReport(
        max_rel_error=float(errors.max()) if errors.size else 0.0,
        n_checked=int(errors.size),
        n_skipped=skipped,
        rel_errors=errors,
    )


def finite_diff_check(graph, bindings, leaf, h=1e-5, entries=None, skip_kinks=False):
    """Max relative error between analytic and central-difference gradients."""
    return finite_diff_report(graph, bindings, leaf, h, entries, skip_kinks).max_rel_error
