"""A small define-then-run expression graph with reverse-mode gradients.

Graphs are recorded once and replayed on any parameter vector and data
batch. Values are either *batch* arrays of shape ``(B, k)`` or *static*
arrays (parameters and constants) which broadcast over the batch the way a
bias row does.

Input gradients are produced by a graph-to-graph transform
(:func:`input_gradient_graph`): every node gets ``n`` tangent nodes, one per
input coordinate, built from the same primitives. The transformed graph is
an ordinary graph, so reverse mode over it gives exact parameter gradients
of losses that contain ``grad_x s``. No primitive ever needs more than its
first derivative inside a backward rule, except ``sigmoid`` which appears
as the derivative of ``softplus`` and has the closed form ``s (1 - s)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ContractError, NumericError
from ._mlp_py import softplus_sigmoid
from .layout import MlpConfig, layout_for

PRIMITIVES = ("add", "mul", "matvec", "softplus", "sigmoid", "square", "sum", "scale", "stack")
LEAVES = ("param", "data", "const")


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    parents: tuple = ()
    attr: object = None
    batch: bool = False


@dataclass
class GradReport:
    value: float
    param_grads: np.ndarray


class ExprGraph:
    """Topologically ordered node list plus parameter and data slots."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, tuple] = {}  # name -> (node id, offset, shape)
        self.data_slots: dict[str, tuple] = {}  # name -> (node id, dim)
        self.consts: dict[int, np.ndarray] = {}
        self.output: int | None = None
        self.n_params = 0

    # -- recording ---------------------------------------------------------

    def _push(self, op, parents=(), attr=None, batch=None):
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise ContractError(f"node {p} does not exist in this graph")
        if batch is None:
            batch = any(self.nodes[p].batch for p in parents)
        node = Node(len(self.nodes), op, tuple(parents), attr, batch)
        self.nodes.append(node)
        return node.id

    def param(self, name: str, shape) -> int:
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        if name in self.params:
            raise ConfigError(f"duplicate parameter slot {name!r}")
        nid = self._push("param", attr=name, batch=False)
        self.params[name] = (nid, self.n_params, shape)
        self.n_params += int(np.prod(shape))
        return nid

    def data(self, name: str, dim: int) -> int:
        if name in self.data_slots:
            raise ConfigError(f"duplicate data slot {name!r}")
        nid = self._push("data", attr=name, batch=True)
        self.data_slots[name] = (nid, int(dim))
        return nid

    def const(self, value) -> int:
        nid = self._push("const", batch=False)
        self.consts[nid] = np.array(value, dtype=np.float64)
        return nid

    def add(self, a, b):
        return self._push("add", (a, b))

    def mul(self, a, b):
        return self._push("mul", (a, b))

    def matvec(self, W, h):
        """``h @ W.T`` row-wise: W is static (m, k), h is (B, k) or a static row (k,)."""
        if self.nodes[W].batch:
            raise ContractError("matvec matrix operand must be static (a parameter or constant)")
        return self._push("matvec", (W, h))

    def softplus(self, a):
        return self._push("softplus", (a,))

    def sigmoid(self, a):
        return self._push("sigmoid", (a,))

    def square(self, a):
        return self._push("square", (a,))

    def sum(self, a):
        """Sum over the feature axis, keeping a trailing axis of length 1."""
        return self._push("sum", (a,))

    def scale(self, a, c: float):
        return self._push("scale", (a,), attr=float(c))

    def stack(self, cols):
        """Concatenate single-column nodes into an (B, len(cols)) node."""
        return self._push("stack", tuple(cols))

    def set_output(self, nid: int) -> int:
        self.output = nid
        return nid

    def __len__(self):
        return len(self.nodes)

    # -- execution ---------------------------------------------------------

    def _bind_data(self, data) -> tuple[dict, int]:
        if isinstance(data, np.ndarray) or not isinstance(data, dict):
            if len(self.data_slots) != 1:
                raise ConfigError("graph has several data slots; pass a dict name -> array")
            data = {next(iter(self.data_slots)): data}
        bound, batch = {}, None
        for name, (nid, dim) in self.data_slots.items():
            if name not in data:
                raise ConfigError(f"missing data for slot {name!r}")
            arr = np.asarray(data[name], dtype=np.float64)
            if arr.ndim == 1:
                arr = arr[None, :]
            if arr.ndim != 2 or arr.shape[1] != dim:
                raise ConfigError(f"data slot {name!r} expects (B, {dim}), got {arr.shape}")
            if batch is not None and arr.shape[0] != batch:
                raise ConfigError("data slots disagree on batch size")
            batch = arr.shape[0]
            bound[nid] = arr
        return bound, batch or 1

    def forward(self, params, data) -> list:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ConfigError(f"graph expects {self.n_params} parameters, got shape {params.shape}")
        bound, _ = self._bind_data(data)
        vals: list = [None] * len(self.nodes)
        with np.errstate(over="ignore", invalid="ignore"):
            for node in self.nodes:
                vals[node.id] = v = self._eval(node, vals, params, bound)
                if not np.all(np.isfinite(v)):
                    raise NumericError(f"non-finite value at node {node.id} ({node.op})", node=node.id)
        return vals

    def _eval(self, node: Node, vals, params, bound):
        op, p = node.op, node.parents
        if op == "param":
            _, off, shape = self.params[node.attr]
            return params[off:off + int(np.prod(shape))].reshape(shape)
        if op == "data":
            return bound[node.id]
        if op == "const":
            return self.consts[node.id]
        if op == "add":
            return vals[p[0]] + vals[p[1]]
        if op == "mul":
            return vals[p[0]] * vals[p[1]]
        if op == "matvec":
            return vals[p[1]] @ vals[p[0]].T
        if op == "softplus":
            return softplus_sigmoid(vals[p[0]])[0]
        if op == "sigmoid":
            return softplus_sigmoid(vals[p[0]])[1]
        if op == "square":
            return vals[p[0]] * vals[p[0]]
        if op == "sum":
            return vals[p[0]].sum(axis=-1, keepdims=True)
        if op == "scale":
            return node.attr * vals[p[0]]
        if op == "stack":
            return np.concatenate([np.atleast_2d(vals[q]) for q in p], axis=-1)
        raise ContractError(f"unknown op {op!r}")

    def backward(self, vals, seed) -> np.ndarray:
        """Reverse sweep from ``seed`` (adjoint of the output); returns flat parameter grads."""
        adj: list = [None] * len(self.nodes)
        adj[self.output] = seed
        grads = np.zeros(self.n_params)
        for node in reversed(self.nodes):
            g = adj[node.id]
            if g is None:
                continue
            op, p = node.op, node.parents
            if op == "param":
                _, off, shape = self.params[node.attr]
                grads[off:off + int(np.prod(shape))] += _reduce_to(g, shape).ravel()
                continue
            if op in LEAVES:
                continue
            if op == "add":
                contribs = [(p[0], g), (p[1], g)]
            elif op == "mul":
                contribs = [(p[0], g * vals[p[1]]), (p[1], g * vals[p[0]])]
            elif op == "matvec":
                W, h = vals[p[0]], vals[p[1]]
                contribs = [(p[0], np.atleast_2d(g).T @ np.atleast_2d(h)), (p[1], g @ W)]
            elif op == "softplus":
                contribs = [(p[0], g * softplus_sigmoid(vals[p[0]])[1])]
            elif op == "sigmoid":
                s = vals[node.id]
                contribs = [(p[0], g * s * (1.0 - s))]
            elif op == "square":
                contribs = [(p[0], 2.0 * g * vals[p[0]])]
            elif op == "sum":
                contribs = [(p[0], np.broadcast_to(g, np.shape(vals[p[0]])))]
            elif op == "scale":
                contribs = [(p[0], node.attr * g)]
            elif op == "stack":
                contribs, col = [], 0
                for q in p:
                    w = np.atleast_2d(vals[q]).shape[-1]
                    contribs.append((q, g[..., col:col + w]))
                    col += w
            else:
                raise ContractError(f"unknown op {op!r}")
            for q, c in contribs:
                c = _reduce_to(c, np.shape(vals[q]))
                adj[q] = c if adj[q] is None else adj[q] + c
        return grads


def _reduce_to(g, shape):
    """Sum a broadcast adjoint back down to ``shape``."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- operations --------------------------------------------------------------

def evaluate(graph: ExprGraph, params, data) -> np.ndarray:
    """Forward values of the graph output for a batch."""
    if graph.output is None:
        raise ContractError("graph has no output")
    return graph.forward(params, data)[graph.output]


def input_gradient_graph(graph: ExprGraph, wrt: str | None = None) -> ExprGraph:
    """Return a new graph whose output is grad_x of ``graph``'s scalar output.

    The new graph carries the same parameter and data slots (same flat
    parameter layout), so its output can be extended into a loss and
    differentiated with respect to parameters.
    """
    if graph.output is None:
        raise ContractError("graph has no output")
    if wrt is None:
        if len(graph.data_slots) != 1:
            raise ConfigError("several data slots; name the one to differentiate")
        wrt = next(iter(graph.data_slots))
    x_id, n = graph.data_slots[wrt]
    out = ExprGraph()
    val: dict[int, int] = {}
    tan: dict[int, list] = {}

    def t_add(a, b):
        if a is None:
            return b
        if b is None:
            return a
        return out.add(a, b)

    for node in graph.nodes:
        op, p = node.op, node.parents
        if op == "param":
            _, _, shape = graph.params[node.attr]
            val[node.id] = out.param(node.attr, shape)
            tan[node.id] = [None] * n
            continue
        if op == "data":
            val[node.id] = out.data(node.attr, graph.data_slots[node.attr][1])
            if node.id == x_id:
                tan[node.id] = [out.const(np.eye(n)[j]) for j in range(n)]
            else:
                tan[node.id] = [None] * n
            continue
        if op == "const":
            val[node.id] = out.const(graph.consts[node.id])
            tan[node.id] = [None] * n
            continue
        vp = [val[q] for q in p]
        tp = [tan[q] for q in p]
        if op == "stack":
            v = out.stack(vp)
        elif op == "scale":
            v = out.scale(vp[0], node.attr)
        else:
            v = getattr(out, op)(*vp)
        val[node.id] = v
        ts = []
        for j in range(n):
            tj = [t[j] for t in tp]
            if op == "add":
                t = t_add(tj[0], tj[1])
            elif op == "mul":
                t = t_add(None if tj[0] is None else out.mul(tj[0], vp[1]),
                          None if tj[1] is None else out.mul(vp[0], tj[1]))
            elif op == "matvec":
                if tj[0] is not None:
                    raise ContractError("matvec matrix must not depend on the differentiated input")
                t = None if tj[1] is None else out.matvec(vp[0], tj[1])
            elif op == "softplus":
                t = None if tj[0] is None else out.mul(out.sigmoid(vp[0]), tj[0])
            elif op == "sigmoid":
                # d sigmoid = s - s^2
                if tj[0] is None:
                    t = None
                else:
                    deriv = out.add(v, out.scale(out.square(v), -1.0))
                    t = out.mul(deriv, tj[0])
            elif op == "square":
                t = None if tj[0] is None else out.scale(out.mul(vp[0], tj[0]), 2.0)
            elif op == "sum":
                t = None if tj[0] is None else out.sum(tj[0])
            elif op == "scale":
                t = None if tj[0] is None else out.scale(tj[0], node.attr)
            elif op == "stack":
                if all(x is None for x in tj):
                    t = None
                else:
                    cols = [x if x is not None else out.scale(val_q, 0.0) for x, val_q in zip(tj, vp)]
                    t = out.stack(cols)
            else:
                raise ContractError(f"unknown op {op!r}")
            ts.append(t)
        tan[node.id] = ts

    y = graph.output
    cols = []
    for j, t in enumerate(tan[y]):
        cols.append(t if t is not None else out.scale(val[y], 0.0))
    out.set_output(out.stack(cols))
    out.scalar_source = val[y]
    return out


def input_gradient(graph: ExprGraph, params, x, wrt: str | None = None, data=None) -> np.ndarray:
    """grad_x of the scalar graph output, shape (B, n) (or (n,) for one point)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    g = input_gradient_graph(graph, wrt)
    wrt = wrt or next(iter(graph.data_slots))
    feed = dict(data or {})
    feed[wrt] = x
    vals = g.forward(params, feed)
    if np.shape(vals[g.scalar_source])[-1] != 1:
        raise ContractError("input gradient needs a scalar-output graph")
    res = np.broadcast_to(vals[g.output], (x.reshape(-1, x.shape[-1]).shape[0], x.shape[-1])).copy()
    return res[0] if single else res


def param_gradient_of_loss(loss_graph: ExprGraph, params, batch) -> GradReport:
    """Mean over the batch of the per-sample scalar loss, and its exact parameter gradient."""
    if loss_graph.output is None:
        raise ContractError("graph has no output")
    vals = loss_graph.forward(params, batch)
    y = vals[loss_graph.output]
    if np.ndim(y) != 2 or y.shape[1] != 1:
        raise ContractError(f"loss graph must output one scalar per sample, got shape {np.shape(y)}")
    B = y.shape[0]
    grads = loss_graph.backward(vals, np.full_like(y, 1.0 / B))
    return GradReport(float(y.mean()), grads)


# -- builders ----------------------------------------------------------------

def mlp_graph(config: MlpConfig, name: str = "x") -> ExprGraph:
    """Record the network described by ``config`` with the kernels' flat parameter layout."""
    g = ExprGraph()
    lay = layout_for(config)
    slots = {sl.name: g.param(sl.name, sl.shape) for sl in lay.slots}
    if list(g.params) != [sl.name for sl in lay.slots]:
        raise ContractError("graph parameter order diverged from the layout")
    h = g.data(name, config.in_dim)
    if config.residual:
        h = g.add(g.matvec(slots["in.W"], h), slots["in.b"])
        for i in range(config.layers):
            u = g.softplus(g.add(g.matvec(slots[f"block{i}.W1"], h), slots[f"block{i}.b1"]))
            h = g.add(h, g.add(g.matvec(slots[f"block{i}.W2"], u), slots[f"block{i}.b2"]))
        y = g.add(g.matvec(slots["out.W"], h), slots["out.b"])
    else:
        for i in range(config.layers):
            h = g.add(g.matvec(slots[f"layer{i}.W"], h), slots[f"layer{i}.b"])
            if i < config.layers - 1:
                h = g.softplus(h)
        y = h
    g.set_output(y)
    return g


def dde_loss_graph(energy: ExprGraph, wrt: str | None = None) -> ExprGraph:
    """Per-sample ``||grad_x s(x) - target||^2``; feed ``x`` (noisy points) and ``target``."""
    g = input_gradient_graph(energy, wrt)
    n = energy.data_slots[wrt or next(iter(energy.data_slots))][1]
    t = g.data("target", n)
    diff = g.add(g.output, g.scale(t, -1.0))
    g.set_output(g.sum(g.square(diff)))
    return g
