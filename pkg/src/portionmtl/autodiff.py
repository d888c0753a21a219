"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` is an append-only list of operation records. Every record
holds its op kind, input node ids, attributes and computed output, so the
whole graph can be re-evaluated with perturbed leaves (used by
:func:`grad_check`).

Broadcasting is explicit: binary elementwise ops require equal shapes unless
one operand is a scalar (shape ``()``). Everything else goes through
``expand``.
"""

from dataclasses import dataclass, field

import numpy as np

from portionmtl import kernels


class ShapeError(ValueError):
    """Raised when an op receives incompatible input shapes."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(RuntimeError):
    pass


class Tensor:
    """An n-dimensional float64 value with an optional gradient."""

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    kind: str
    inputs: tuple
    attrs: dict
    value: np.ndarray
    requires_grad: bool
    ctx: object = None
    tensor: Tensor = None  # set for leaves


# ---------------------------------------------------------------------------
# primitive registry
#
# forward(vals, attrs) -> (out, ctx)
# backward(vals, out, ctx, gout, attrs) -> tuple of input grads (None = no grad)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpDef:
    forward: object
    backward: object
    arity: object  # int, or (min, max)
    kink: object = None  # vals, out, ctx -> hashable signature of the active branch


OPS = {}


def _register(kind, arity, kink=None):
    def deco(cls):
        OPS[kind] = OpDef(cls.forward, cls.backward, arity, kink)
        return cls
    return deco


def _binary_shapes(op, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape)


def _reduce_to(g, shape):
    # undo a scalar broadcast
    if shape == ():
        return np.asarray(g.sum())
    return g


@_register("add", 2)
class _Add:
    def forward(vals, attrs):
        a, b = vals
        _binary_shapes("add", a, b)
        return a + b, None

    def backward(vals, out, ctx, g, attrs):
        return _reduce_to(g, vals[0].shape), _reduce_to(g, vals[1].shape)


@_register("sub", 2)
class _Sub:
    def forward(vals, attrs):
        a, b = vals
        _binary_shapes("sub", a, b)
        return a - b, None

    def backward(vals, out, ctx, g, attrs):
        return _reduce_to(g, vals[0].shape), _reduce_to(-g, vals[1].shape)


@_register("mul", 2)
class _Mul:
    def forward(vals, attrs):
        a, b = vals
        _binary_shapes("mul", a, b)
        return a * b, None

    def backward(vals, out, ctx, g, attrs):
        a, b = vals
        return _reduce_to(g * b, a.shape), _reduce_to(g * a, b.shape)


@_register("div", 2)
class _Div:
    def forward(vals, attrs):
        a, b = vals
        _binary_shapes("div", a, b)
        return a / b, None

    def backward(vals, out, ctx, g, attrs):
        a, b = vals
        return _reduce_to(g / b, a.shape), _reduce_to(-g * a / (b * b), b.shape)


@_register("neg", 1)
class _Neg:
    def forward(vals, attrs):
        return -vals[0], None

    def backward(vals, out, ctx, g, attrs):
        return (-g,)


@_register("scale", 1)
class _Scale:
    """Multiply by a constant ``factor``."""

    def forward(vals, attrs):
        return vals[0] * attrs["factor"], None

    def backward(vals, out, ctx, g, attrs):
        return (g * attrs["factor"],)


@_register("add_const", 1)
class _AddConst:
    def forward(vals, attrs):
        return vals[0] + attrs["value"], None

    def backward(vals, out, ctx, g, attrs):
        return (g,)


@_register("matmul", 2)
class _MatMul:
    def forward(vals, attrs):
        a, b = vals
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        return a @ b, None

    def backward(vals, out, ctx, g, attrs):
        a, b = vals
        return g @ b.T, a.T @ g


def _relu_kink(vals, out, ctx):
    return np.sign(vals[0]).tobytes()


@_register("relu", 1, kink=_relu_kink)
class _Relu:
    def forward(vals, attrs):
        return np.maximum(vals[0], 0.0), None

    def backward(vals, out, ctx, g, attrs):
        # subgradient 0 at exactly 0
        return (g * (vals[0] > 0),)


@_register("abs", 1, kink=_relu_kink)
class _Abs:
    def forward(vals, attrs):
        return np.abs(vals[0]), None

    def backward(vals, out, ctx, g, attrs):
        return (g * np.sign(vals[0]),)


@_register("exp", 1)
class _Exp:
    def forward(vals, attrs):
        return np.exp(vals[0]), None

    def backward(vals, out, ctx, g, attrs):
        return (g * out,)


@_register("log", 1)
class _Log:
    def forward(vals, attrs):
        return np.log(vals[0]), None

    def backward(vals, out, ctx, g, attrs):
        return (g / vals[0],)


@_register("square", 1)
class _Square:
    def forward(vals, attrs):
        return vals[0] * vals[0], None

    def backward(vals, out, ctx, g, attrs):
        return (2.0 * g * vals[0],)


@_register("sqrt", 1)
class _Sqrt:
    def forward(vals, attrs):
        return np.sqrt(vals[0]), None

    def backward(vals, out, ctx, g, attrs):
        return (g * 0.5 / out,)


def _axis_size(x, axis):
    return x.size if axis is None else x.shape[axis]


def _regrow(g, x, axis, keepdims):
    # bring a reduced gradient back to x's shape
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


@_register("sum", 1)
class _Sum:
    def forward(vals, attrs):
        return np.asarray(vals[0].sum(axis=attrs["axis"], keepdims=attrs["keepdims"])), None

    def backward(vals, out, ctx, g, attrs):
        return (np.array(_regrow(g, vals[0], attrs["axis"], attrs["keepdims"])),)


@_register("mean", 1)
class _Mean:
    def forward(vals, attrs):
        return np.asarray(vals[0].mean(axis=attrs["axis"], keepdims=attrs["keepdims"])), None

    def backward(vals, out, ctx, g, attrs):
        x = vals[0]
        n = _axis_size(x, attrs["axis"])
        return (_regrow(g, x, attrs["axis"], attrs["keepdims"]) / n,)


@_register("var", 1)
class _Var:
    """Biased (divide-by-n) variance."""

    def forward(vals, attrs):
        x = vals[0]
        mu = x.mean(axis=attrs["axis"], keepdims=True)
        out = ((x - mu) ** 2).mean(axis=attrs["axis"], keepdims=attrs["keepdims"])
        return np.asarray(out), mu

    def backward(vals, out, ctx, g, attrs):
        x = vals[0]
        n = _axis_size(x, attrs["axis"])
        return (_regrow(g, x, attrs["axis"], attrs["keepdims"]) * (2.0 / n) * (x - ctx),)


@_register("logsumexp", 1)
class _LogSumExp:
    def forward(vals, attrs):
        x = vals[0]
        axis = attrs["axis"]
        m = x.max(axis=axis, keepdims=True)
        s = np.exp(x - m).sum(axis=axis, keepdims=True)
        out = np.log(s) + m
        if not attrs["keepdims"]:
            out = np.squeeze(out, axis=axis)
        return out, None

    def backward(vals, out, ctx, g, attrs):
        x = vals[0]
        axis = attrs["axis"]
        lse = out if attrs["keepdims"] else np.expand_dims(out, axis)
        return (_regrow(g, x, axis, attrs["keepdims"]) * np.exp(x - lse),)


@_register("concat", (1, None))
class _Concat:
    def forward(vals, attrs):
        axis = attrs["axis"]
        ref = vals[0].shape
        for v in vals[1:]:
            if v.ndim != len(ref) or any(
                d != r for k, (d, r) in enumerate(zip(v.shape, ref)) if k != axis % len(ref)
            ):
                raise ShapeError("concat", ref, v.shape, detail=f"axis={axis}")
        return np.concatenate(vals, axis=axis), None

    def backward(vals, out, ctx, g, attrs):
        axis = attrs["axis"]
        cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))


@_register("slice", 1)
class _Slice:
    def forward(vals, attrs):
        x = vals[0]
        ix = [slice(None)] * x.ndim
        ix[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
        return x[tuple(ix)].copy(), tuple(ix)

    def backward(vals, out, ctx, g, attrs):
        dx = np.zeros_like(vals[0])
        dx[ctx] = g
        return (dx,)


@_register("expand", 1)
class _Expand:
    """Explicit broadcast of ``x`` to ``shape`` (numpy broadcasting rules)."""

    def forward(vals, attrs):
        x = vals[0]
        try:
            return np.array(np.broadcast_to(x, attrs["shape"])), None
        except ValueError:
            raise ShapeError("expand", x.shape, attrs["shape"]) from None

    def backward(vals, out, ctx, g, attrs):
        x = vals[0]
        lead = g.ndim - x.ndim
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(k for k, d in enumerate(x.shape) if d == 1 and g.shape[k] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (np.ascontiguousarray(g),)


@_register("reshape", 1)
class _Reshape:
    def forward(vals, attrs):
        x = vals[0]
        try:
            return x.reshape(attrs["shape"]), None
        except ValueError:
            raise ShapeError("reshape", x.shape, attrs["shape"]) from None

    def backward(vals, out, ctx, g, attrs):
        return (g.reshape(vals[0].shape),)


@_register("detach", 1)
class _Detach:
    def forward(vals, attrs):
        return vals[0], None

    def backward(vals, out, ctx, g, attrs):
        return (None,)


@_register("conv2d", (2, 3))
class _Conv2d:
    """x (N, C, H, W) * w (F, C, kh, kw) [+ b (F,)] -> (N, F, Ho, Wo)."""

    def forward(vals, attrs):
        x, w = vals[0], vals[1]
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError("conv2d", x.shape, w.shape)
        if len(vals) == 3 and vals[2].shape != (w.shape[0],):
            raise ShapeError("conv2d", w.shape, vals[2].shape, detail="bias")
        stride, pad = attrs["stride"], attrs["padding"]
        n, _, h, wd = x.shape
        f, c, kh, kw = w.shape
        ho = kernels.conv_output_size(h, kh, stride, pad)
        wo = kernels.conv_output_size(wd, kw, stride, pad)
        if ho < 1 or wo < 1:
            raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than input")
        cols = kernels.im2col(x, kh, kw, stride, pad)
        out = cols @ w.reshape(f, -1).T
        if len(vals) == 3:
            out += vals[2]
        out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
        return out, cols

    def backward(vals, out, ctx, g, attrs):
        x, w = vals[0], vals[1]
        f, c, kh, kw = w.shape
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = (g2.T @ ctx).reshape(w.shape)
        dcols = g2 @ w.reshape(f, -1)
        dx = kernels.col2im(dcols, x.shape, kh, kw, attrs["stride"], attrs["padding"])
        if len(vals) == 3:
            return dx, dw, g2.sum(axis=0)
        return dx, dw


def _pool_kink(vals, out, ctx):
    return ctx.tobytes()


@_register("maxpool2d", 1, kink=_pool_kink)
class _MaxPool:
    def forward(vals, attrs):
        x = vals[0]
        k = attrs["size"]
        if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
            raise ShapeError("maxpool2d", x.shape, (k, k), detail="spatial dims must divide pool size")
        return kernels.maxpool_forward(x, k)

    def backward(vals, out, ctx, g, attrs):
        return (kernels.maxpool_backward(g, ctx, vals[0].shape, attrs["size"]),)


_DEFAULT_ATTRS = {
    "sum": {"axis": None, "keepdims": False},
    "mean": {"axis": None, "keepdims": False},
    "var": {"axis": None, "keepdims": False},
    "logsumexp": {"axis": -1, "keepdims": False},
    "concat": {"axis": -1},
    "conv2d": {"stride": 1, "padding": 0},
    "maxpool2d": {"size": 2},
}


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

class Graph:
    """Append-only computation record.

    Node ids are list indices; every input id of node ``k`` is ``< k``.
    Not safe to share between threads while it is being built.
    """

    def __init__(self):
        self.nodes = []
        self._leaf_ids = {}

    def __len__(self):
        return len(self.nodes)

    # -- leaves -------------------------------------------------------------
    def leaf(self, tensor):
        """Register a :class:`Tensor`; the same object always maps to one id."""
        key = id(tensor)
        if key in self._leaf_ids:
            return self._leaf_ids[key]
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), {}, tensor.values, tensor.requires_grad, tensor=tensor))
        self._leaf_ids[key] = nid
        return nid

    def const(self, values):
        return self.leaf(Tensor(values))

    def value(self, nid):
        return self._node(nid).value

    def _node(self, nid):
        if not isinstance(nid, (int, np.integer)) or not 0 <= nid < len(self.nodes):
            raise GraphError(f"node {nid!r} has not been computed in this graph")
        return self.nodes[nid]

    # -- ops ----------------------------------------------------------------
    def op(self, kind, *inputs, **attrs):
        return forward_op(self, kind, inputs, attrs)

    def add(self, a, b):
        return self.op("add", a, b)

    def sub(self, a, b):
        return self.op("sub", a, b)

    def mul(self, a, b):
        return self.op("mul", a, b)

    def div(self, a, b):
        return self.op("div", a, b)

    def matmul(self, a, b):
        return self.op("matmul", a, b)

    def scale(self, a, factor):
        return self.op("scale", a, factor=float(factor))

    def add_const(self, a, value):
        return self.op("add_const", a, value=float(value))

    def relu(self, a):
        return self.op("relu", a)

    def abs(self, a):
        return self.op("abs", a)

    def exp(self, a):
        return self.op("exp", a)

    def log(self, a):
        return self.op("log", a)

    def square(self, a):
        return self.op("square", a)

    def sqrt(self, a):
        return self.op("sqrt", a)

    def sum(self, a, axis=None, keepdims=False):
        return self.op("sum", a, axis=axis, keepdims=keepdims)

    def mean(self, a, axis=None, keepdims=False):
        return self.op("mean", a, axis=axis, keepdims=keepdims)

    def var(self, a, axis=None, keepdims=False):
        return self.op("var", a, axis=axis, keepdims=keepdims)

    def logsumexp(self, a, axis=-1, keepdims=False):
        return self.op("logsumexp", a, axis=axis, keepdims=keepdims)

    def concat(self, ids, axis=-1):
        return self.op("concat", *ids, axis=axis)

    def slice(self, a, start, stop, axis=-1):
        return self.op("slice", a, start=start, stop=stop, axis=axis)

    def expand(self, a, shape):
        return self.op("expand", a, shape=tuple(shape))

    def reshape(self, a, shape):
        return self.op("reshape", a, shape=tuple(shape))

    def detach(self, a):
        return self.op("detach", a)

    def conv2d(self, x, w, b=None, stride=1, padding=0):
        ins = (x, w) if b is None else (x, w, b)
        return self.op("conv2d", *ins, stride=stride, padding=padding)

    def maxpool2d(self, x, size=2):
        return self.op("maxpool2d", x, size=size)

    # -- evaluation -----------------------------------------------------------
    def backward(self, loss):
        return backward(self, loss)

    def replay(self, overrides=None):
        """Re-evaluate every node, substituting leaf values from ``overrides``.

        Returns ``(values, kinks)`` where ``kinks[k]`` is the branch signature
        of non-smooth node ``k``. The graph itself is not modified.
        """
        overrides = overrides or {}
        values, kinks = [], {}
        for k, node in enumerate(self.nodes):
            if node.kind == "leaf":
                values.append(overrides.get(k, node.value))
                continue
            spec = OPS[node.kind]
            vals = [values[i] for i in node.inputs]
            out, ctx = spec.forward(vals, node.attrs)
            values.append(out)
            if spec.kink is not None:
                kinks[k] = spec.kink(vals, out, ctx)
        return values, kinks


def forward_op(graph, kind, inputs, attrs=None):
    """Evaluate primitive ``kind`` on existing nodes and append the result."""
    spec = OPS.get(kind)
    if spec is None:
        raise GraphError(f"unknown op kind {kind!r}")
    arity = spec.arity
    lo, hi = (arity, arity) if isinstance(arity, int) else arity
    if len(inputs) < lo or (hi is not None and len(inputs) > hi):
        raise GraphError(f"{kind}: expected {arity} inputs, got {len(inputs)}")
    full = dict(_DEFAULT_ATTRS.get(kind, {}))
    full.update(attrs or {})
    nodes = [graph._node(i) for i in inputs]
    out, ctx = spec.forward([n.value for n in nodes], full)
    out = np.asarray(out, dtype=np.float64)
    needs = kind != "detach" and any(n.requires_grad for n in nodes)
    graph.nodes.append(Node(kind, tuple(int(i) for i in inputs), full, out, needs, ctx))
    return len(graph.nodes) - 1


def backward(graph, loss):
    """Reverse sweep from scalar node ``loss``.

    Returns ``{node_id: gradient}`` for every node that requires grad and
    assigns ``tensor.grad`` on every requires-grad leaf (overwriting).
    """
    node = graph._node(loss)
    if node.value.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {node.value.shape}")
    grads = {loss: np.ones_like(node.value)}
    for k in range(loss, -1, -1):
        g = grads.get(k)
        n = graph.nodes[k]
        if g is None or n.kind == "leaf" or not n.requires_grad:
            continue
        vals = [graph.nodes[i].value for i in n.inputs]
        in_grads = OPS[n.kind].backward(vals, n.value, n.ctx, g, n.attrs)
        for i, gi in zip(n.inputs, in_grads):
            if gi is None or not graph.nodes[i].requires_grad:
                continue
            prev = grads.get(i)
            grads[i] = gi if prev is None else prev + gi
    out = {}
    for k, g in grads.items():
        n = graph.nodes[k]
        if not n.requires_grad:
            continue
        if g.shape != n.value.shape:
            g = np.broadcast_to(g, n.value.shape)
        if n.kind == "leaf":
            g = np.array(g, dtype=np.float64)
            n.tensor.grad = g
        out[k] = g
    for k, n in enumerate(graph.nodes):
        if n.kind == "leaf" and n.requires_grad and k not in out:
            n.tensor.grad = np.zeros_like(n.value)
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    flagged: list = field(default_factory=list)  # flat indices near a kink

    @property
    def passed(self):
        return self.max_rel_error <= 1e-4


def grad_check(graph, loss, leaf, epsilon=1e-4, analytic=None, max_entries=None, seed=0):
    """Compare analytic gradients of ``loss`` w.r.t. ``leaf`` against central
    differences.

    Error per entry is ``|a - n| / max(1, |a|, |n|)``. Entries where a relu,
    abs or max-pool changes branch within ``epsilon`` are listed in
    ``flagged`` and excluded from the maximum. ``analytic`` may be supplied
    to check an externally computed gradient. The leaf value is restored on
    exit.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    if graph._node(loss).value.size != 1:
        raise GraphError("grad_check needs a scalar loss")
    base = graph._node(leaf).value
    if not np.all(np.isfinite(base)):
        raise ValueError("leaf has non-finite entries")
    if analytic is None:
        analytic = graph.backward(loss).get(leaf, np.zeros_like(base))
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)

    entries = np.arange(base.size)
    if max_entries is not None and base.size > max_entries:
        entries = np.sort(np.random.default_rng(seed).choice(base.size, max_entries, replace=False))

    _, kinks0 = graph.replay()
    worst, flagged = 0.0, []
    for e in entries:
        probe = base.copy().reshape(-1)
        probe[e] += epsilon
        vp, kp = graph.replay({leaf: probe.reshape(base.shape)})
        probe[e] -= 2 * epsilon
        vm, km = graph.replay({leaf: probe.reshape(base.shape)})
        if kp != kinks0 or km != kinks0:
            flagged.append(int(e))
            continue
        num = (float(vp[loss].reshape(())) - float(vm[loss].reshape(()))) / (2 * epsilon)
        a = analytic[e]
        err = abs(a - num) / max(1.0, abs(a), abs(num))
        worst = max(worst, err)
    return GradCheckResult(worst, len(entries) - len(flagged), flagged)
