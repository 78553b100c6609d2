"""Typed dataflow graph of quantized operators and its JSON form.

Schema (``version: itasim-graph/1``)::

    {"version": "itasim-graph/1", "name": "...",
     "inputs": ["x"], "outputs": ["y"],
     "tensors": [{"name": "x", "shape": [128, 512], "dtype": "i8",
                  "scale": 0.03125, "kind": "input"}, ...],
     "nodes": [{"name": "l0.ffn0.fc1", "op": "Gemm",
                "inputs": ["x", "w", "b"], "outputs": ["y"],
                "attrs": {"quant": {...}, "act": {"kind": "gelu", ...}}}, ...]}

Tensor kinds are ``input``, ``weight`` and ``act``.  Weight values are not part
of the JSON; they travel in a tensor container.  An empty string marks an
absent optional input (a bias).

Node inputs by op:

* ``Gemm``: x, w, [bias].  ``attrs.mode`` selects the signature:
  ``matmul`` x[R,K] w[K,C] -> [R,C] (``trans_b``: w[C,K]);
  ``qk`` Q[S,HP] K[S,HP] -> [H,S,S] per head Q_h K_h^T;
  ``av`` A[H,S,S] (u8) V[S,HP] -> [S,HP] per head A_h V_h;
  ``head_proj`` AV[S,HP] Wo[HP,E] bias[E] -> [S,E]: every head's partial
  ``AV_h Wo_h`` (bias on head 0) is requantized with ``quant``, the partials
  are summed and requantized with ``accum_quant``.
* ``Softmax``: x (i8) -> u8, scale 1/255, along the last axis.
* ``Add``: a, b; ``mul_a``/``mul_b`` integer scale alignment.
* ``Affine``: x, gamma[C] (i8), beta[C] (i32).
* ``GeLU`` / ``ReLU`` / ``Requant``: x.
* ``FusedMHA``: x, wq, wk, wv, wo, bq, bk, bv, bo.
* ``AttentionHead``: one head of a FusedMHA (weights already sliced).
* ``HeadAccum``: H head partials.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

GRAPH_VERSION = "itasim-graph/1"

OPS = ("Gemm", "Softmax", "Add", "Affine", "GeLU", "ReLU", "Requant", "FusedMHA",
       "AttentionHead", "HeadAccum")
GEMM_MODES = ("matmul", "qk", "av", "head_proj")
DTYPES = ("i8", "u8", "i24", "i32")
KINDS = ("input", "weight", "act")


class GraphError(ValueError):
    pass


class SchemaError(GraphError):
    pass


class ShapeMismatch(GraphError):
    pass


class CycleError(GraphError):
    pass


class DanglingInput(GraphError):
    pass


@dataclass
class Tensor:
    name: str
    shape: Tuple[int, ...]
    dtype: str = "i8"
    scale: float = 1.0
    kind: str = "act"
    view: Optional[dict] = None     # {"of": parent, "axis": a, "start": i, "stop": j}

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nbytes(self) -> int:
        return self.size * {"i8": 1, "u8": 1, "i24": 3, "i32": 4}[self.dtype]

    def to_dict(self) -> dict:
        d = {"name": self.name, "shape": list(self.shape), "dtype": self.dtype,
             "scale": self.scale, "kind": self.kind}
        if self.view is not None:
            d["view"] = dict(self.view)
        return d


@dataclass
class Node:
    name: str
    op: str
    inputs: List[str]
    outputs: List[str]
    attrs: Dict = field(default_factory=dict)

    @property
    def engine(self) -> str:
        return self.attrs.get("engine", "cluster")

    @property
    def mode(self) -> str:
        return self.attrs.get("mode", "matmul")

    def to_dict(self) -> dict:
        return {"name": self.name, "op": self.op, "inputs": list(self.inputs),
                "outputs": list(self.outputs), "attrs": self.attrs}


@dataclass
class GraphIR:
    name: str = "graph"
    tensors: Dict[str, Tensor] = field(default_factory=dict)
    nodes: List[Node] = field(default_factory=list)
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    weights: Dict[str, np.ndarray] = field(default_factory=dict)

    # -- construction helpers ------------------------------------------------
    def add_tensor(self, name, shape, dtype="i8", scale=1.0, kind="act", data=None) -> Tensor:
        if name in self.tensors:
            raise SchemaError(f"tensor {name!r} defined twice")
        t = Tensor(name, tuple(int(d) for d in shape), dtype, float(scale), kind)
        self.tensors[name] = t
        if kind == "input":
            self.inputs.append(name)
        if data is not None:
            self.weights[name] = np.asarray(data, dtype=np.int64)
        return t

    def add_node(self, name, op, inputs, outputs, **attrs) -> Node:
        n = Node(name, op, list(inputs), list(outputs), attrs)
        self.nodes.append(n)
        return n

    def copy(self) -> "GraphIR":
        g = GraphIR(self.name, copy.deepcopy(self.tensors), copy.deepcopy(self.nodes),
                    list(self.inputs), list(self.outputs), dict(self.weights))
        return g

    # -- queries ---------------------------------------------------------------
    def producers(self) -> Dict[str, Node]:
        out = {}
        for n in self.nodes:
            for t in n.outputs:
                out[t] = n
        return out

    def consumers(self) -> Dict[str, List[Node]]:
        out: Dict[str, List[Node]] = {}
        for n in self.nodes:
            for t in n.inputs:
                if t:
                    out.setdefault(t, []).append(n)
        return out

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def value(self, name: str) -> np.ndarray:
        """Weight value, slicing the parent for view tensors."""
        t = self.tensors[name]
        if t.view is None:
            return self.weights[name]
        v = t.view
        parent = self.weights[v["of"]]
        idx = [slice(None)] * parent.ndim
        idx[int(v["axis"])] = slice(int(v["start"]), int(v["stop"]))
        return parent[tuple(idx)]

    def total_ops(self) -> int:
        return sum(node_ops(n, self) for n in self.nodes)

    def validate(self) -> "GraphIR":
        validate(self)
        return self

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {"version": GRAPH_VERSION, "name": self.name,
                "inputs": list(self.inputs), "outputs": list(self.outputs),
                "tensors": [t.to_dict() for t in self.tensors.values()],
                "nodes": [n.to_dict() for n in self.nodes]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


# --------------------------------------------------------------------------- #
# Parsing
# --------------------------------------------------------------------------- #

def _req(d: dict, key: str, where: str):
    if key not in d:
        raise SchemaError(f"{where}: missing field {key!r}")
    return d[key]


def graph_from_dict(d: dict) -> GraphIR:
    if not isinstance(d, dict):
        raise SchemaError("graph document must be a JSON object")
    if d.get("version") != GRAPH_VERSION:
        raise SchemaError(f"unsupported graph version {d.get('version')!r}")
    g = GraphIR(str(d.get("name", "graph")))
    for td in _req(d, "tensors", "graph"):
        name = _req(td, "name", "tensor")
        shape = _req(td, "shape", f"tensor {name!r}")
        if not isinstance(shape, list) or not shape or any(
                not isinstance(s, int) or s <= 0 for s in shape):
            raise SchemaError(f"tensor {name!r}: shape must be a list of positive ints")
        dtype = td.get("dtype", "i8")
        if dtype not in DTYPES:
            raise SchemaError(f"tensor {name!r}: unknown dtype {dtype!r}")
        kind = td.get("kind", "act")
        if kind not in KINDS:
            raise SchemaError(f"tensor {name!r}: unknown kind {kind!r}")
        scale = float(td.get("scale", 1.0))
        if not scale > 0:
            raise SchemaError(f"tensor {name!r}: scale must be positive")
        if name in g.tensors:
            raise SchemaError(f"tensor {name!r} defined twice")
        view = td.get("view")
        if view is not None and (kind != "weight" or not {"of", "axis", "start", "stop"} <= set(view)):
            raise SchemaError(f"tensor {name!r}: malformed view")
        g.tensors[name] = Tensor(name, tuple(shape), dtype, scale, kind, view)
    for nd in _req(d, "nodes", "graph"):
        name = _req(nd, "name", "node")
        op = _req(nd, "op", f"node {name!r}")
        if op not in OPS:
            raise SchemaError(f"node {name!r}: unknown op {op!r}")
        g.nodes.append(Node(name, op, list(_req(nd, "inputs", f"node {name!r}")),
                            list(_req(nd, "outputs", f"node {name!r}")),
                            dict(nd.get("attrs", {}))))
    g.inputs = list(d.get("inputs", [t.name for t in g.tensors.values() if t.kind == "input"]))
    g.outputs = list(_req(d, "outputs", "graph"))
    return g


def parse_graph(text: str) -> GraphIR:
    """Parse and validate a JSON graph."""
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"malformed JSON: {e}") from e
    g = graph_from_dict(d)
    validate(g)
    return g


# --------------------------------------------------------------------------- #
# Validation and shape inference
# --------------------------------------------------------------------------- #

def _shape(g: GraphIR, name: str, node: Node) -> Tuple[int, ...]:
    if name not in g.tensors:
        raise DanglingInput(f"node {node.name!r}: input {name!r} is not defined")
    return g.tensors[name].shape


def _expect(cond: bool, node: Node, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(f"node {node.name!r} ({node.op}): {msg}")


def _n_inputs(node: Node, lo: int, hi: Optional[int] = None) -> None:
    hi = lo if hi is None else hi
    if not lo <= len(node.inputs) <= hi:
        raise SchemaError(f"node {node.name!r}: {node.op} takes {lo}..{hi} inputs, "
                          f"got {len(node.inputs)}")


def infer_shape(node: Node, g: GraphIR) -> Tuple[Tuple[int, ...], str]:
    """Output (shape, dtype) of a node, checking its input signature."""
    op = node.op
    sh = lambda i: _shape(g, node.inputs[i], node)
    has = lambda i: i < len(node.inputs) and bool(node.inputs[i])
    if op == "Gemm":
        _n_inputs(node, 2, 3)
        mode = node.mode
        if mode not in GEMM_MODES:
            raise SchemaError(f"node {node.name!r}: unknown Gemm mode {mode!r}")
        x, w = sh(0), sh(1)
        if mode == "matmul":
            _expect(len(x) == 2 and len(w) == 2, node, "operands must be 2-D")
            wk, wc = (w[1], w[0]) if node.attrs.get("trans_b") else w
            _expect(x[1] == wk, node, f"inner dims {x} x {w}")
            if has(2):
                _expect(sh(2) == (wc,), node, f"bias shape {sh(2)} != ({wc},)")
            return (x[0], wc), "i8"
        H = int(node.attrs.get("heads", 1))
        if mode == "qk":
            _expect(len(x) == 2 and x == w and x[1] % H == 0, node, f"Q {x} / K {w} mismatch")
            return (H, x[0], w[0]), "i8"
        if mode == "av":
            _expect(len(x) == 3 and x[0] == H and len(w) == 2 and x[2] == w[0]
                    and w[1] % H == 0, node, f"A {x} / V {w} mismatch")
            return (x[1], w[1]), "i8"
        _expect(len(x) == 2 and len(w) == 2 and x[1] == w[0] and x[1] % H == 0,
                node, f"AV {x} / Wo {w} mismatch")
        if has(2):
            _expect(sh(2) == (w[1],), node, "bias shape")
        return (x[0], w[1]), "i8"
    if op == "Softmax":
        _n_inputs(node, 1)
        return sh(0), "u8"
    if op == "Add":
        _n_inputs(node, 2)
        _expect(sh(0) == sh(1), node, f"operand shapes {sh(0)} vs {sh(1)}")
        return sh(0), "i8"
    if op == "Affine":
        _n_inputs(node, 3)
        c = sh(0)[-1]
        _expect(sh(1) == (c,) and sh(2) == (c,), node, "gamma/beta must match channels")
        return sh(0), "i8"
    if op in ("GeLU", "ReLU", "Requant"):
        _n_inputs(node, 1)
        return sh(0), "i8"
    if op in ("FusedMHA", "AttentionHead"):
        _n_inputs(node, 5, 9)
        x, wq, wk, wv, wo = (sh(i) for i in range(5))
        _expect(len(x) == 2 and wq == wk == wv and wq[0] == x[1], node, "projection weights")
        _expect(wo == (wq[1], x[1]), node, f"output weight {wo}")
        for i in (5, 6, 7):
            if has(i):
                _expect(sh(i) == (wq[1],), node, "projection bias")
        if has(8):
            _expect(sh(8) == (x[1],), node, "output bias")
        if op == "FusedMHA":
            _expect(wq[1] % int(node.attrs.get("heads", 1)) == 0, node, "heads must divide H*P")
        return x, "i8"
    if op == "HeadAccum":
        _n_inputs(node, 1, 64)
        shapes = {sh(i) for i in range(len(node.inputs))}
        _expect(len(shapes) == 1, node, f"partials differ in shape: {sorted(shapes)}")
        return sh(0), "i8"
    raise SchemaError(f"node {node.name!r}: unknown op {op!r}")


def validate(g: GraphIR) -> None:
    """Check definitions, single assignment, acyclicity and per-op shapes."""
    produced = {}
    for n in g.nodes:
        if len(n.outputs) != 1:
            raise SchemaError(f"node {n.name!r}: exactly one output expected")
        for t in n.outputs:
            if t not in g.tensors:
                raise DanglingInput(f"node {n.name!r}: output {t!r} is not defined")
            if t in produced:
                raise SchemaError(f"tensor {t!r} produced by {produced[t]!r} and {n.name!r}")
            if g.tensors[t].kind != "act":
                raise SchemaError(f"node {n.name!r} writes non-activation tensor {t!r}")
            produced[t] = n.name
    names = [n.name for n in g.nodes]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate node names")
    for t in g.inputs:
        if t not in g.tensors:
            raise DanglingInput(f"graph input {t!r} is not defined")
    for n in g.nodes:
        for t in n.inputs:
            if not t:
                continue
            if t not in g.tensors:
                raise DanglingInput(f"node {n.name!r}: input {t!r} is not defined")
            kind = g.tensors[t].kind
            if kind == "act" and t not in produced:
                raise DanglingInput(f"node {n.name!r}: input {t!r} has no producer")
    for t in g.outputs:
        if t not in g.tensors:
            raise DanglingInput(f"graph output {t!r} is not defined")
    for t in g.tensors.values():
        if t.view is None:
            continue
        parent = g.tensors.get(t.view["of"])
        if parent is None or parent.view is not None:
            raise DanglingInput(f"view {t.name!r}: parent {t.view['of']!r} missing or itself a view")
        axis, start, stop = int(t.view["axis"]), int(t.view["start"]), int(t.view["stop"])
        want = list(parent.shape)
        if not (0 <= axis < len(want) and 0 <= start < stop <= want[axis]):
            raise ShapeMismatch(f"view {t.name!r}: slice out of range of {parent.name!r}")
        want[axis] = stop - start
        if tuple(want) != t.shape or parent.dtype != t.dtype:
            raise ShapeMismatch(f"view {t.name!r}: shape {t.shape} inconsistent with parent slice")
    topo_order(g)
    for n in g.nodes:
        shape, dtype = infer_shape(n, g)
        out = g.tensors[n.outputs[0]]
        if out.shape != tuple(shape):
            raise ShapeMismatch(f"node {n.name!r} ({n.op}): output {out.name!r} declared "
                                f"{out.shape}, inferred {tuple(shape)}")
        if out.dtype != dtype:
            raise ShapeMismatch(f"node {n.name!r}: output {out.name!r} dtype {out.dtype} != {dtype}")


def topo_order(g: GraphIR) -> List[Node]:
    """Depth-first topological order.

    Ready nodes are kept on a stack, so a chain is followed to its end before
    a sibling branch starts; residual operands produced early are consumed as
    late as the dependencies allow.  Ties follow the declaration order.
    """
    prod = g.producers()
    index = {n.name: i for i, n in enumerate(g.nodes)}
    deps = {n.name: {prod[t].name for t in n.inputs if t and t in prod} for n in g.nodes}
    users: Dict[str, List[str]] = {n.name: [] for n in g.nodes}
    for name, ds in deps.items():
        for d in ds:
            users[d].append(name)
    remaining = {k: len(v) for k, v in deps.items()}
    stack = sorted((k for k, v in remaining.items() if v == 0), key=index.get, reverse=True)
    order = []
    while stack:
        name = stack.pop()
        order.append(name)
        ready = []
        for u in users[name]:
            remaining[u] -= 1
            if remaining[u] == 0:
                ready.append(u)
        stack.extend(sorted(ready, key=index.get, reverse=True))
    if len(order) != len(g.nodes):
        stuck = sorted(k for k, v in remaining.items() if v > 0)
        raise CycleError(f"cycle detected through node(s) {stuck[:5]}")
    by_name = {n.name: n for n in g.nodes}
    return [by_name[k] for k in order]


# --------------------------------------------------------------------------- #
# Op counting (1 MAC = 2 Op; elementwise work is not counted)
# --------------------------------------------------------------------------- #

def node_macs(n: Node, g: GraphIR) -> int:
    sh = lambda i: g.tensors[n.inputs[i]].shape
    if n.op == "Gemm":
        x, w = sh(0), sh(1)
        if n.mode == "matmul":
            c = w[0] if n.attrs.get("trans_b") else w[1]
            return x[0] * x[1] * c
        H = int(n.attrs.get("heads", 1))
        if n.mode == "qk":
            return H * x[0] * w[0] * (x[1] // H)
        if n.mode == "av":
            return x[0] * x[1] * x[2] * (w[1] // H)
        return x[0] * x[1] * w[1]
    if n.op in ("FusedMHA", "AttentionHead"):
        S, E = sh(0)
        HP = sh(1)[1]
        H = int(n.attrs.get("heads", 1)) if n.op == "FusedMHA" else 1
        return 3 * S * E * HP + 2 * H * S * S * (HP // H) + S * HP * E
    return 0


def node_ops(n: Node, g: GraphIR) -> int:
    return 2 * node_macs(n, g)


# --------------------------------------------------------------------------- #
# Attribute decoding
# --------------------------------------------------------------------------- #

def quant_attr(n: Node, key: str = "quant"):
    from .quant import QuantParams
    if key not in n.attrs:
        raise SchemaError(f"node {n.name!r}: missing attribute {key!r}")
    return QuantParams.from_dict(n.attrs[key])


def act_attr(n: Node):
    from .ita import ActMode
    return ActMode.from_dict(n.attrs.get("act"))


def exp_attr(n: Node):
    from .ita import ExpParams
    if "exp" not in n.attrs:
        raise SchemaError(f"node {n.name!r}: missing attribute 'exp'")
    return ExpParams.from_dict(n.attrs["exp"])


def stage_quants(n: Node) -> dict:
    """Per-stage QuantParams of an attention node (q, k, v, s, av, o[, accum])."""
    from .quant import QuantParams
    qd = n.attrs.get("quant")
    if not isinstance(qd, dict):
        raise SchemaError(f"node {n.name!r}: missing per-stage 'quant' table")
    return {k: QuantParams.from_dict(v) for k, v in qd.items()}
