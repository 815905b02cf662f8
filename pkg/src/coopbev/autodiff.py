"""Deterministic reverse-mode differentiation over a static op graph.

Tensors are float64 numpy arrays. A Graph is an ordered list of nodes; each
node is an input placeholder, a named parameter reference, or an op applied
to earlier nodes, so node order is a topological order by construction.
Evaluation walks the list once; backward walks it in reverse, accumulating
gradients per parameter name (parameters referenced from several nodes, e.g.
weight-shared encoders, sum their contributions in node-index order, which
keeps results independent of how the model was assembled).

Forward and backward are single-threaded and bitwise reproducible for fixed
inputs. Graphs carry no state: the same graph may be evaluated concurrently
against immutable parameter stores.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels as K


class GraphError(Exception):
    """Base class for graph construction and evaluation failures."""


class ShapeError(GraphError):
    def __init__(self, node, detail):
        super().__init__(f"shape mismatch at node {node}: {detail}")
        self.node = node


class NonFiniteError(GraphError):
    def __init__(self, node):
        super().__init__(f"non-finite values produced at node {node}")
        self.node = node


class FrozenParamError(GraphError):
    pass


class OpKind(Enum):
    INPUT = "input"
    PARAM = "param"
    CONV2D = "conv2d"
    DWCONV = "dwconv"
    DSCONV = "dsconv"
    MASKED_SPARSE_CONV = "masked_sparse_conv"
    MATMUL = "matmul"
    SOFTMAX = "softmax"
    LAYERNORM = "layernorm"
    GELU = "gelu"
    RELU = "relu"
    ADD = "add"
    MUL = "mul"
    SCALAR_MUL = "scalar_mul"
    SUM = "sum"
    MEAN = "mean"
    CONCAT = "concat"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    BILINEAR_WARP = "bilinear_warp"
    RAY_SPLAT = "ray_splat"
    FOCAL_LOSS = "focal_loss"
    SMOOTH_L1 = "smooth_l1"
    CROSS_ENTROPY = "cross_entropy"


def _check_conv_attrs(attrs):
    k = attrs["k"]
    if k < 1 or k % 2 == 0:
        raise GraphError(f"kernel size must be odd and positive, got {k}")
    if attrs.get("stride", 1) < 1:
        raise GraphError(f"stride must be >= 1, got {attrs.get('stride')}")
    if attrs.get("pad", 0) < 0:
        raise GraphError(f"pad must be >= 0, got {attrs.get('pad')}")


def _check_axis(attrs):
    ax = attrs.get("axis")
    if ax is not None and not isinstance(ax, (int, tuple)):
        raise GraphError(f"axis must be int, tuple or None, got {ax!r}")


# kind -> (forward, backward, operand arity or None for variadic, validator)
_OPS = {
    OpKind.CONV2D: (K.conv2d_fwd, K.conv2d_bwd, 3, _check_conv_attrs),
    OpKind.DWCONV: (K.dwconv_fwd, K.dwconv_bwd, 3, _check_conv_attrs),
    OpKind.DSCONV: (K.dsconv_fwd, K.dsconv_bwd, 4, _check_conv_attrs),
    OpKind.MASKED_SPARSE_CONV: (K.masked_conv_fwd, K.masked_conv_bwd, 4, _check_conv_attrs),
    OpKind.MATMUL: (K.matmul_fwd, K.matmul_bwd, 2, None),
    OpKind.SOFTMAX: (K.softmax_fwd, K.softmax_bwd, 1, _check_axis),
    OpKind.LAYERNORM: (K.layernorm_fwd, K.layernorm_bwd, 3, _check_axis),
    OpKind.GELU: (K.gelu_fwd, K.gelu_bwd, 1, None),
    OpKind.RELU: (K.relu_fwd, K.relu_bwd, 1, None),
    OpKind.ADD: (K.add_fwd, K.add_bwd, 2, None),
    OpKind.MUL: (K.mul_fwd, K.mul_bwd, 2, None),
    OpKind.SCALAR_MUL: (K.scalar_mul_fwd, K.scalar_mul_bwd, 1, None),
    OpKind.SUM: (K.sum_fwd, K.sum_bwd, 1, _check_axis),
    OpKind.MEAN: (K.mean_fwd, K.mean_bwd, 1, _check_axis),
    OpKind.CONCAT: (K.concat_fwd, K.concat_bwd, None, _check_axis),
    OpKind.RESHAPE: (K.reshape_fwd, K.reshape_bwd, 1, None),
    OpKind.TRANSPOSE: (K.transpose_fwd, K.transpose_bwd, 1, None),
    OpKind.BILINEAR_WARP: (K.bilinear_warp_fwd, K.bilinear_warp_bwd, 1, None),
    OpKind.RAY_SPLAT: (K.ray_splat_fwd, K.ray_splat_bwd, 2, None),
    OpKind.FOCAL_LOSS: (K.focal_loss_fwd, K.focal_loss_bwd, 1, None),
    OpKind.SMOOTH_L1: (K.smooth_l1_fwd, K.smooth_l1_bwd, 1, None),
    OpKind.CROSS_ENTROPY: (K.cross_entropy_fwd, K.cross_entropy_bwd, 1, None),
}


@dataclass(frozen=True)
class Node:
    idx: int
    kind: OpKind
    operands: tuple
    attrs: dict
    name: str | None = None


class ParamStore:
    """Named float64 tensors with a per-name trainable flag.

    Values are treated as immutable during graph evaluation; `sgd_step` is
    the single mutation point. Toggling a trainable flag never touches the
    value.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name, value, trainable=True):
        if name in self._values:
            raise GraphError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        self._values[name] = arr
        self._trainable[name] = bool(trainable)
        return arr

    def __contains__(self, name):
        return name in self._values

    def __getitem__(self, name):
        return self._values[name]

    def __len__(self):
        return len(self._values)

    def names(self):
        return list(self._values)

    def trainable(self, name):
        return self._trainable[name]

    def trainable_names(self):
        return [n for n, t in self._trainable.items() if t]

    def set_trainable(self, name, flag):
        if name not in self._trainable:
            raise GraphError(f"unknown parameter {name!r}")
        self._trainable[name] = bool(flag)

    def copy(self):
        out = ParamStore()
        for n, v in self._values.items():
            out.add(n, v.copy(), self._trainable[n])
        return out


class Graph:
    """Static computation graph; build once, evaluate many times."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.outputs: dict[str, int] = {}
        self._param_ids: dict[str, int] = {}

    def input(self, name):
        nid = len(self.nodes)
        self.nodes.append(Node(nid, OpKind.INPUT, (), {}, name))
        return nid

    def param(self, name):
        if name in self._param_ids:
            return self._param_ids[name]
        nid = len(self.nodes)
        self.nodes.append(Node(nid, OpKind.PARAM, (), {}, name))
        self._param_ids[name] = nid
        return nid

    def op(self, kind, *operands, name=None, **attrs):
        if kind not in _OPS:
            raise GraphError(f"not an op kind: {kind}")
        _, _, arity, validate = _OPS[kind]
        if arity is not None and len(operands) != arity:
            raise GraphError(f"{kind.value} expects {arity} operands, got {len(operands)}")
        if not operands:
            raise GraphError(f"{kind.value} needs at least one operand")
        nid = len(self.nodes)
        for o in operands:
            if not (0 <= o < nid):
                raise GraphError(f"operand {o} of new node {nid} does not exist yet")
        if validate is not None:
            validate(attrs)
        self.nodes.append(Node(nid, kind, tuple(operands), attrs, name))
        return nid

    def output(self, name, nid):
        if not (0 <= nid < len(self.nodes)):
            raise GraphError(f"output {name!r} refers to missing node {nid}")
        self.outputs[name] = nid

    def requires_grad(self, params):
        """Per-node flags: does a trainable parameter feed this node?"""
        req = [False] * len(self.nodes)
        for n in self.nodes:
            if n.kind is OpKind.PARAM:
                req[n.idx] = n.name in params and params.trainable(n.name)
            elif n.kind is not OpKind.INPUT:
                req[n.idx] = any(req[o] for o in n.operands)
        return req


def _evaluate(graph, params, inputs, check_finite=True, keep_ctx=False):
    values = [None] * len(graph.nodes)
    ctxs = [None] * len(graph.nodes) if keep_ctx else None
    for n in graph.nodes:
        if n.kind is OpKind.INPUT:
            if n.name not in inputs:
                raise GraphError(f"missing graph input {n.name!r}")
            values[n.idx] = np.asarray(inputs[n.name], dtype=np.float64)
            continue
        if n.kind is OpKind.PARAM:
            if n.name not in params:
                raise GraphError(f"missing parameter {n.name!r}")
            values[n.idx] = params[n.name]
            continue
        fwd = _OPS[n.kind][0]
        args = [values[o] for o in n.operands]
        try:
            out, ctx = fwd(args, n.attrs)
        except (ValueError, IndexError) as exc:
            raise ShapeError(n.idx, f"{n.kind.value}: {exc}") from exc
        if check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(n.idx)
        values[n.idx] = out
        if keep_ctx:
            ctxs[n.idx] = ctx
    return (values, ctxs) if keep_ctx else values


def forward(graph, params, inputs, check_finite=True):
    """Evaluate the graph; returns {output name: array}."""
    values = _evaluate(graph, params, inputs, check_finite)
    return {name: values[nid] for name, nid in graph.outputs.items()}


def backward(graph, params, inputs, loss_node):
    """Gradient of the scalar at `loss_node` w.r.t. every trainable parameter.

    Trainable parameters that the loss does not reach come back as zero
    tensors; frozen parameters are absent from the result.
    """
    if isinstance(loss_node, str):
        loss_node = graph.outputs[loss_node]
    values, ctxs = _evaluate(graph, params, inputs, keep_ctx=True)
    if values[loss_node].size != 1:
        raise GraphError(f"loss node {loss_node} is not scalar "
                         f"(shape {values[loss_node].shape})")
    req = graph.requires_grad(params)

    node_grads: dict[int, np.ndarray] = {
        loss_node: np.ones_like(values[loss_node])}
    param_grads: dict[str, np.ndarray] = {}
    for n in reversed(graph.nodes):
        g = node_grads.get(n.idx)
        if g is None or not req[n.idx]:
            continue
        if n.kind is OpKind.PARAM:
            if n.name in param_grads:
                param_grads[n.name] = param_grads[n.name] + g
            else:
                param_grads[n.name] = g
            continue
        if n.kind is OpKind.INPUT:
            continue
        bwd = _OPS[n.kind][1]
        args = [values[o] for o in n.operands]
        need = [req[o] for o in n.operands]
        grads = bwd(g, args, values[n.idx], ctxs[n.idx], n.attrs, need)
        for o, d in zip(n.operands, grads):
            if d is None:
                continue
            if o in node_grads:
                node_grads[o] = node_grads[o] + d
            else:
                node_grads[o] = d

    for name in params.trainable_names():
        if name not in param_grads:
            param_grads[name] = np.zeros_like(params[name])
    return param_grads


def sgd_step(params, grads, lr):
    """In-place p <- p - lr * g for trainable names; frozen tensors untouched."""
    if lr < 0:
        raise GraphError(f"learning rate must be nonnegative, got {lr}")
    for name in grads:
        if name not in params:
            raise GraphError(f"gradient for unknown parameter {name!r}")
        if not params.trainable(name):
            raise FrozenParamError(f"gradient supplied for frozen parameter {name!r}")
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(-1, f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        p -= lr * g
    return params


# ---------------------------------------------------------------------------
# gradient checking

GRAD_CHECK_STEP = 1e-5


def numeric_grad(graph, params, inputs, loss_node, name, h=GRAD_CHECK_STEP):
    """Central differences of the loss w.r.t. one named parameter."""
    if isinstance(loss_node, str):
        loss_node = graph.outputs[loss_node]
    p = params[name]
    out = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(_evaluate(graph, params, inputs)[loss_node])
        flat[i] = orig - h
        lo = float(_evaluate(graph, params, inputs)[loss_node])
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return out


def grad_check_graph(graph, params, inputs, loss_node, h=GRAD_CHECK_STEP):
    """Max relative error between analytic and numeric gradients over all
    trainable parameters: |a - n| / max(|n|, 1e-8)."""
    analytic = backward(graph, params, inputs, loss_node)
    worst = 0.0
    for name in params.trainable_names():
        num = numeric_grad(graph, params, inputs, loss_node, name, h)
        err = np.abs(analytic[name] - num) / np.maximum(np.abs(num), 1e-8)
        worst = max(worst, float(err.max()))
    return worst


def _probe(kind, shape, rng):
    """Build a one-op probe graph for grad_check. Tensors under test are
    parameters; masks, index maps and targets are fixed data."""
    g = Graph()
    store = ParamStore()
    inputs = {}

    def param(name, shp):
        store.add(name, rng.uniform(-1.0, 1.0, size=shp))
        return g.param(name)

    shape = tuple(shape)
    if kind is OpKind.CONV2D:
        h, w, c = shape
        nid = g.op(kind, param("x", shape), param("w", (3, 3, c, c + 1)),
                   param("b", (c + 1,)), k=3, stride=1, pad=1)
    elif kind is OpKind.DWCONV:
        h, w, c = shape
        nid = g.op(kind, param("x", shape), param("w", (3, 3, c)),
                   param("b", (c,)), k=3, pad=1)
    elif kind is OpKind.DSCONV:
        h, w, c = shape
        nid = g.op(kind, param("x", shape), param("dw", (3, 3, c)),
                   param("pw", (c, c + 1)), param("b", (c + 1,)), k=3, pad=1)
    elif kind is OpKind.MASKED_SPARSE_CONV:
        h, w, c = shape
        mask = (rng.random((h, w, 1)) < 0.3).astype(np.float64)
        inputs["mask"] = mask
        nid = g.op(kind, param("x", shape), g.input("mask"),
                   param("w", (3, 3, c, c)), param("b", (c,)), k=3, pad=1)
    elif kind is OpKind.MATMUL:
        m, k = shape
        nid = g.op(kind, param("a", (m, k)), param("b", (k, m + 1)))
    elif kind is OpKind.SOFTMAX:
        nid = g.op(kind, param("x", shape), axis=-1)
    elif kind is OpKind.LAYERNORM:
        c = shape[-1]
        nid = g.op(kind, param("x", shape), param("gamma", (c,)),
                   param("beta", (c,)), axis=-1)
    elif kind in (OpKind.GELU, OpKind.RELU):
        nid = g.op(kind, param("x", shape))
    elif kind is OpKind.ADD:
        nid = g.op(kind, param("a", shape), param("b", shape))
    elif kind is OpKind.MUL:
        nid = g.op(kind, param("a", shape), param("b", shape))
    elif kind is OpKind.SCALAR_MUL:
        nid = g.op(kind, param("x", shape), c=1.7)
    elif kind is OpKind.SUM:
        nid = g.op(kind, param("x", shape), axis=-1)
    elif kind is OpKind.MEAN:
        nid = g.op(kind, param("x", shape), axis=-1)
    elif kind is OpKind.CONCAT:
        nid = g.op(kind, param("a", shape), param("b", shape), axis=-1)
    elif kind is OpKind.RESHAPE:
        nid = g.op(kind, param("x", shape), shape=(-1,))
    elif kind is OpKind.TRANSPOSE:
        nid = g.op(kind, param("x", shape), perm=tuple(reversed(range(len(shape)))))
    elif kind is OpKind.BILINEAR_WARP:
        c, s = np.cos(0.5), np.sin(0.5)
        h = shape[0]
        mid = (h - 1) / 2.0
        affine = (c, -s, mid * (1 - c) + mid * s, s, c, mid * (1 - c) - mid * s)
        nid = g.op(kind, param("x", shape), affine=affine)
    elif kind is OpKind.RAY_SPLAT:
        a, d, c, gh = 6, 4, 3, 5
        cells = rng.integers(0, gh * gh, size=(a, d))
        nid = g.op(kind, param("dist", (a, d)), param("feat", (a, c)),
                   cells=cells, grid=(gh, gh))
    elif kind is OpKind.FOCAL_LOSS:
        t = (rng.random(shape) < 0.2).astype(np.float64)
        nid = g.op(kind, param("z", shape), targets=t, alpha=0.25, gamma=2.0,
                   normalizer=max(1.0, t.sum()))
    elif kind is OpKind.SMOOTH_L1:
        nid = g.op(kind, param("p", shape), targets=rng.normal(size=shape),
                   mask=(rng.random(shape) < 0.5).astype(np.float64),
                   beta=1.0, normalizer=3.0)
    elif kind is OpKind.CROSS_ENTROPY:
        kdim = shape[-1]
        lead = shape[:-1]
        nid = g.op(kind, param("z", shape),
                   targets=rng.integers(0, kdim, size=lead),
                   mask=(rng.random(lead) < 0.7).astype(np.float64),
                   normalizer=2.0)
    else:
        raise GraphError(f"no grad_check probe for {kind}")

    # reduce to a randomly weighted scalar so every output element matters
    out_val = _evaluate(g, store, inputs)[nid]
    if out_val.size != 1:
        inputs["probe_weights"] = rng.uniform(0.5, 1.5, size=out_val.shape)
        nid = g.op(OpKind.SUM, g.op(OpKind.MUL, nid, g.input("probe_weights")))
    g.output("loss", nid)
    return g, store, inputs


def grad_check(kind, shape, seed):
    """Max relative gradient error for one op kind on a small random probe."""
    rng = np.random.default_rng(seed)
    graph, store, inputs = _probe(kind, shape, rng)
    return grad_check_graph(graph, store, inputs, "loss")


CHECKABLE_KINDS = tuple(k for k in _OPS)
