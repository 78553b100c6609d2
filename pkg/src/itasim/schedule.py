"""Lowering of a mapped graph into tiled, double-buffered, statically placed steps.

Every node becomes one or more *loops*.  A loop is a tiled kernel over 2-D
views of L2 tensors (tensors with more than two dimensions are viewed as
``[prod(leading), last]``).  A loop of n tiles produces n + 2 steps::

    step 0        DMA-in tile 0
    step i        compute tile i-1 | DMA-in tile i | DMA-out of step i-1's output
    step n + 1    DMA-out of the last output

Input buffers alternate ping/pong with the tile index and output buffers with
the number of emitted tiles.  Each accelerator compute step names the next
accelerator task, which the host programs into the second context while the
current task runs.

Attention heads are lowered to projection loops, then (on the accelerator)
row bands of 64 queries: a Q K^T loop that feeds the softmax DA stage and an
A V loop whose inputs pass through the EN stage, then the output projection.
On the cluster the softmax is a separate row loop.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .graph import GraphIR, Node, graph_from_dict, topo_order, validate as validate_graph
from .memory import (ALIGN, AllocationError, MemoryMap, Placement, align, check_no_overlap,
                     lifetimes, static_alloc)
from .tiling import TilingInfeasible, TilingSolution, tile_solve
from .timing import HwConfig

SCHEDULE_VERSION = "itasim-schedule/1"
ELEM_BYTES = {"i8": 1, "u8": 1, "i24": 3, "i32": 4}


class ScheduleError(ValueError):
    pass


class CompileError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# Views, loops and steps
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class View:
    tensor: str
    row0: int
    col0: int
    rows: int
    cols: int

    def sub(self, r0: int, c0: int, rows: int, cols: int) -> "View":
        return View(self.tensor, self.row0 + r0, self.col0 + c0, rows, cols)

    @property
    def tag(self) -> str:
        return f"{self.tensor}@{self.row0},{self.col0}+{self.rows}x{self.cols}"

    def to_list(self) -> list:
        return [self.tensor, self.row0, self.col0, self.rows, self.cols]

    @classmethod
    def from_list(cls, v) -> "View":
        return cls(v[0], int(v[1]), int(v[2]), int(v[3]), int(v[4]))


@dataclass
class Loop:
    id: int
    node: str
    layer: int
    kind: str
    engine: str
    ins: Dict[str, View]
    out: View
    params: Dict = field(default_factory=dict)
    tiling: Optional[TilingSolution] = None
    l1: Dict[str, List[int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"id": self.id, "node": self.node, "layer": self.layer, "kind": self.kind,
                "engine": self.engine, "ins": {k: v.to_list() for k, v in self.ins.items()},
                "out": self.out.to_list(), "params": self.params,
                "tiling": self.tiling.to_dict() if self.tiling else None, "l1": self.l1}


@dataclass
class Transfer:
    dir: str            # "in" (L2 -> L1) or "out" (L1 -> L2)
    view: View
    l2: int
    stride: int
    l1: int
    rows: int
    row_bytes: int

    @property
    def nbytes(self) -> int:
        return self.rows * self.row_bytes

    def to_dict(self) -> dict:
        return {"dir": self.dir, "view": self.view.to_list(), "l2": self.l2, "stride": self.stride,
                "l1": self.l1, "rows": self.rows, "row_bytes": self.row_bytes}

    @classmethod
    def from_dict(cls, d) -> "Transfer":
        return cls(d["dir"], View.from_list(d["view"]), d["l2"], d["stride"], d["l1"], d["rows"],
                   d["row_bytes"])


@dataclass
class Step:
    index: int
    loop: int
    phase: int
    dma_in: List[Transfer] = field(default_factory=list)
    compute: Optional[dict] = None
    dma_out: List[Transfer] = field(default_factory=list)
    preprogram: Optional[List[int]] = None      # [loop, tile] of the next accelerator task

    def to_dict(self) -> dict:
        return {"i": self.index, "loop": self.loop, "phase": self.phase,
                "dma_in": [t.to_dict() for t in self.dma_in], "compute": self.compute,
                "dma_out": [t.to_dict() for t in self.dma_out], "preprogram": self.preprogram}

    @classmethod
    def from_dict(cls, d) -> "Step":
        return cls(d["i"], d["loop"], d["phase"], [Transfer.from_dict(t) for t in d["dma_in"]],
                   d["compute"], [Transfer.from_dict(t) for t in d["dma_out"]], d["preprogram"])


@dataclass
class Schedule:
    graph: GraphIR
    memory: MemoryMap
    scratch: Dict[str, dict]
    loops: List[Loop]
    steps: List[Step]
    l1_budget: int
    weights_bytes: int

    def to_dict(self) -> dict:
        return {"version": SCHEDULE_VERSION, "graph": self.graph.to_dict(),
                "memory": self.memory.to_dict(), "scratch": self.scratch,
                "l1_budget": self.l1_budget, "weights_bytes": self.weights_bytes,
                "loops": [l.to_dict() for l in self.loops],
                "steps": [s.to_dict() for s in self.steps]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def loop_of(self, step: Step) -> Loop:
        return self.loops[step.loop]


def schedule_from_dict(d: dict) -> Schedule:
    if d.get("version") != SCHEDULE_VERSION:
        raise ScheduleError(f"unsupported schedule version {d.get('version')!r}")
    try:
        g = graph_from_dict(d["graph"])
        loops = []
        for ld in d["loops"]:
            t = ld.get("tiling")
            sol = TilingSolution(t["kind"], t["engine"], t["tile"], t["tiles_per_dim"], t["buffers"],
                                 t["double_buffer"]) if t else None
            loops.append(Loop(ld["id"], ld["node"], ld["layer"], ld["kind"], ld["engine"],
                              {k: View.from_list(v) for k, v in ld["ins"].items()},
                              View.from_list(ld["out"]), ld["params"], sol,
                              {k: list(v) for k, v in ld["l1"].items()}))
        return Schedule(g, MemoryMap.from_dict(d["memory"]), d["scratch"], loops,
                        [Step.from_dict(s) for s in d["steps"]], d["l1_budget"], d["weights_bytes"])
    except (KeyError, TypeError, IndexError) as e:
        raise ScheduleError(f"malformed schedule: {e!r}") from e


def parse_schedule(text: str) -> Schedule:
    try:
        return schedule_from_dict(json.loads(text))
    except json.JSONDecodeError as e:
        raise ScheduleError(f"malformed JSON: {e}") from e


# --------------------------------------------------------------------------- #
# Tensor geometry
# --------------------------------------------------------------------------- #

def shape2d(shape) -> Tuple[int, int]:
    shape = tuple(shape)
    if len(shape) == 1:
        return 1, shape[0]
    return int(np.prod(shape[:-1])), shape[-1]


def tensor_info(g: GraphIR, scratch: Dict[str, dict], name: str) -> Tuple[Tuple[int, int], str]:
    if name in scratch:
        return tuple(scratch[name]["shape"]), scratch[name]["dtype"]
    t = g.tensors[name]
    return shape2d(t.shape), t.dtype


def full_view(g: GraphIR, scratch, name: str) -> View:
    (r, c), _ = tensor_info(g, scratch, name)
    return View(name, 0, 0, r, c)


def l2_geometry(g: GraphIR, scratch, mem: MemoryMap, name: str) -> Tuple[int, int, int, int, int]:
    """(base address, row stride bytes, element bytes, row offset, col offset)."""
    if name in g.tensors and g.tensors[name].view is not None:
        v = g.tensors[name].view
        parent = g.tensors[v["of"]]
        eb = ELEM_BYTES[parent.dtype]
        pr, pc = shape2d(parent.shape)
        base = mem.placements[v["of"]].offset
        axis = int(v["axis"])
        start = int(v["start"])
        if len(parent.shape) == 1 or axis == len(parent.shape) - 1:
            return base, pc * eb, eb, 0, start
        return base, pc * eb, eb, start, 0
    (r, c), dtype = tensor_info(g, scratch, name)
    eb = ELEM_BYTES[dtype]
    return mem.placements[name].offset, c * eb, eb, 0, 0


def make_transfer(g, scratch, mem, direction: str, view: View, l1: int) -> Transfer:
    base, stride, eb, ro, co = l2_geometry(g, scratch, mem, view.tensor)
    addr = base + (view.row0 + ro) * stride + (view.col0 + co) * eb
    return Transfer(direction, view, addr, stride, l1, view.rows, view.cols * eb)


# --------------------------------------------------------------------------- #
# Node -> loops
# --------------------------------------------------------------------------- #

class _Lowerer:
    def __init__(self, g: GraphIR, hw: HwConfig):
        self.g = g
        self.hw = hw
        self.scratch: Dict[str, dict] = {}
        self.scratch_owner: Dict[str, str] = {}
        self.loops: List[Loop] = []

    def view(self, name: str) -> View:
        return full_view(self.g, self.scratch, name)

    def new_scratch(self, node: Node, suffix: str, shape, dtype="i8") -> str:
        name = f"{node.name}.{suffix}"
        self.scratch[name] = {"shape": list(shape), "dtype": dtype}
        self.scratch_owner[name] = node.name
        return name

    def dtype(self, name: str) -> str:
        return tensor_info(self.g, self.scratch, name)[1]

    def add(self, node: Node, kind: str, engine: str, ins: Dict[str, View], out: View, **params):
        layer = int(node.attrs.get("layer", -1))
        self.loops.append(Loop(len(self.loops), node.name, layer, kind, engine, ins, out, params))

    def gemm(self, node, engine, x: View, w: View, bias: Optional[View], out: View, quant,
             act=None, trans_b=False, **extra):
        ins = {"x": x, "w": w}
        if bias is not None:
            ins["bias"] = bias
        params = {"quant": quant, "act": act or {"kind": "identity"}, "trans_b": bool(trans_b),
                  "x_signed": self.dtype(x.tensor) != "u8"}
        params.update(extra)
        self.add(node, "gemm", engine, ins, out, **params)

    def bias_view(self, name: str, start: int = 0, n: Optional[int] = None) -> Optional[View]:
        if not name:
            return None
        v = self.view(name)
        return View(name, 0, start, 1, n if n is not None else v.cols)

    def attention(self, node: Node, engine: str, ins, quant, exp, head: int, P: int,
                  out: View, with_bias_o: bool, prefix: str):
        """Loops of one head; weight views start at column/row ``head * P``."""
        x, wq, wk, wv, wo, bq, bk, bv, bo = ins
        S, E = self.g.tensors[x].shape
        xs = self.view(x)
        c0 = head * P
        q = self.new_scratch(node, f"{prefix}q", (S, P))
        k = self.new_scratch(node, f"{prefix}k", (S, P))
        v = self.new_scratch(node, f"{prefix}v", (S, P))
        s = self.new_scratch(node, f"{prefix}s", (S, S))
        av = self.new_scratch(node, f"{prefix}av", (S, P))
        for dst, w, b, st in ((q, wq, bq, "q"), (k, wk, bk, "k"), (v, wv, bv, "v")):
            self.gemm(node, engine, xs, View(w, 0, c0, E, P), self.bias_view(b, c0, P),
                      self.view(dst), quant[st])
        if engine == "ita":
            band = self.hw.ita_vec_len
            for b0 in range(0, S, band):
                key = f"{node.name}.{prefix}band{b0 // band}"
                self.gemm(node, engine, View(q, b0, 0, band, P), self.view(k), None,
                          View(s, b0, 0, band, S), quant["s"], trans_b=True, da=key, exp=exp)
                self.gemm(node, engine, View(s, b0, 0, band, S), self.view(v), None,
                          View(av, b0, 0, band, P), quant["av"], en=key, exp=exp)
        else:
            a = self.new_scratch(node, f"{prefix}a", (S, S), "u8")
            self.gemm(node, engine, self.view(q), self.view(k), None, self.view(s), quant["s"],
                      trans_b=True)
            self.add(node, "softmax", "cluster", {"in0": self.view(s)}, self.view(a), exp=exp)
            self.gemm(node, engine, self.view(a), self.view(v), None, self.view(av), quant["av"])
        self.gemm(node, engine, self.view(av), View(wo, c0, 0, P, E),
                  self.bias_view(bo) if with_bias_o else None, out, quant["o"])

    def lower(self, n: Node) -> None:
        g = self.g
        eng = n.engine
        op = n.op
        ins = n.inputs
        out = self.view(n.outputs[0])
        if op == "Gemm":
            mode = n.mode
            H = int(n.attrs.get("heads", 1))
            if mode == "matmul":
                bias = self.bias_view(ins[2]) if len(ins) > 2 and ins[2] else None
                self.gemm(n, eng, self.view(ins[0]), self.view(ins[1]), bias, out,
                          n.attrs["quant"], n.attrs.get("act"), n.attrs.get("trans_b", False))
                return
            if eng == "ita":
                raise CompileError(f"node {n.name!r}: Gemm mode {mode!r} cannot map to the accelerator")
            if mode == "qk":
                S, HP = g.tensors[ins[0]].shape
                P = HP // H
                for h in range(H):
                    self.gemm(n, eng, View(ins[0], 0, h * P, S, P), View(ins[1], 0, h * P, S, P),
                              None, out.sub(h * S, 0, S, S), n.attrs["quant"], trans_b=True)
                return
            if mode == "av":
                _, S, _ = g.tensors[ins[0]].shape
                HP = g.tensors[ins[1]].shape[1]
                P = HP // H
                for h in range(H):
                    self.gemm(n, eng, View(ins[0], h * S, 0, S, S), View(ins[1], 0, h * P, S, P),
                              None, out.sub(0, h * P, S, P), n.attrs["quant"])
                return
            S, HP = g.tensors[ins[0]].shape
            E = g.tensors[ins[1]].shape[1]
            P = HP // H
            part = self.new_scratch(n, "part", (H * S, E))
            for h in range(H):
                bias = self.bias_view(ins[2]) if h == 0 and len(ins) > 2 and ins[2] else None
                self.gemm(n, eng, View(ins[0], 0, h * P, S, P), View(ins[1], h * P, 0, P, E), bias,
                          View(part, h * S, 0, S, E), n.attrs["quant"])
            self.add(n, "head_accum", "cluster", {f"in{h}": View(part, h * S, 0, S, E) for h in range(H)},
                     out, quant=n.attrs["accum_quant"])
            return
        if op in ("FusedMHA", "AttentionHead"):
            full = list(ins) + [""] * (9 - len(ins))
            quant = n.attrs["quant"]
            if op == "AttentionHead":
                P = g.tensors[full[1]].shape[1]
                self.attention(n, eng, full, quant, n.attrs["exp"], 0, P, out, True, "")
                return
            H = int(n.attrs.get("heads", 1))
            S, E = g.tensors[full[0]].shape
            P = g.tensors[full[1]].shape[1] // H
            part = self.new_scratch(n, "part", (H * S, E))
            for h in range(H):
                self.attention(n, eng, full, quant, n.attrs["exp"], h, P, View(part, h * S, 0, S, E),
                               h == 0, f"h{h}.")
            self.add(n, "head_accum", "cluster", {f"in{h}": View(part, h * S, 0, S, E) for h in range(H)},
                     out, quant=quant["accum"])
            return
        kinds = {"Softmax": "softmax", "Add": "add", "Affine": "affine", "GeLU": "gelu",
                 "ReLU": "relu", "Requant": "requant", "HeadAccum": "head_accum"}
        if op not in kinds:
            raise CompileError(f"node {n.name!r}: cannot lower op {op}")
        kind = kinds[op]
        views = {f"in{i}": self.view(t) for i, t in enumerate(ins)}
        params = {k: v for k, v in n.attrs.items() if k not in ("engine", "layer")}
        if op == "Affine":
            views = {"in0": self.view(ins[0]), "gamma": self.bias_view(ins[1]),
                     "beta": self.bias_view(ins[2])}
        for i, t in enumerate(ins):
            params[f"in{i}_signed"] = self.dtype(t) != "u8"
        self.add(n, kind, "cluster", views, out, **params)


def _solve(loop: Loop, g, scratch, budget: int, hw: HwConfig) -> TilingSolution:
    eb = lambda v: ELEM_BYTES[tensor_info(g, scratch, v.tensor)[1]]
    if loop.kind == "gemm":
        x, w = loop.ins["x"], loop.ins["w"]
        K = x.cols
        C = w.rows if loop.params["trans_b"] else w.cols
        return tile_solve("gemm", loop.engine, budget, R=x.rows, K=K, C=C,
                          has_bias="bias" in loop.ins, x_bytes=eb(x))
    row_ins = [v.cols * eb(v) for r, v in loop.ins.items() if r.startswith("in")]
    fixed = sum(align(v.cols * eb(v)) for r, v in loop.ins.items() if not r.startswith("in"))
    return tile_solve(loop.kind, "cluster", budget, rows=loop.out.rows, row_bytes_in=row_ins,
                      row_bytes_out=loop.out.cols * eb(loop.out), fixed_bytes=fixed)


def _tiles(loop: Loop) -> List[dict]:
    """Per tile: input views by role, output view (None until the K chain ends), k index."""
    sol = loop.tiling
    out = []
    if loop.kind == "gemm":
        tm, tk, tn = sol.tile["tm"], sol.tile["tk"], sol.tile["tn"]
        x, w, trans = loop.ins["x"], loop.ins["w"], loop.params["trans_b"]
        R, K = x.rows, x.cols
        C = w.rows if trans else w.cols
        nk = -(-K // tk)
        for r0 in range(0, R, tm):
            rm = min(tm, R - r0)
            for c0 in range(0, C, tn):
                cn = min(tn, C - c0)
                for ki in range(nk):
                    k0 = ki * tk
                    kk = min(tk, K - k0)
                    ins = {"x": x.sub(r0, k0, rm, kk),
                           "w": w.sub(c0, k0, cn, kk) if trans else w.sub(k0, c0, kk, cn)}
                    if "bias" in loop.ins and ki == 0:
                        ins["bias"] = loop.ins["bias"].sub(0, c0, 1, cn)
                    out.append({"ins": ins, "out": loop.out.sub(r0, c0, rm, cn) if ki == nk - 1 else None,
                                "k": [ki, nk], "coords": [r0, c0]})
        return out
    rows = sol.tile["rows"]
    R = loop.out.rows
    for r0 in range(0, R, rows):
        rr = min(rows, R - r0)
        ins = {}
        for role, v in loop.ins.items():
            ins[role] = v.sub(r0, 0, rr, v.cols) if role.startswith("in") else v
        out.append({"ins": ins, "out": loop.out.sub(r0, 0, rr, loop.out.cols), "k": [0, 1],
                    "coords": [r0, 0]})
    return out


def _alloc_l1(loop: Loop, budget: int) -> None:
    """Ping and pong slot per role, packed from offset 0 (loops run one at a time)."""
    off = 0
    for role in sorted(loop.tiling.buffers):
        size = align(loop.tiling.buffers[role])
        loop.l1[role] = [off, off + size]
        off += 2 * size
    if off > budget:
        raise CompileError(f"loop {loop.id} ({loop.node}): L1 buffers need {off} B > {budget} B")


def compile_schedule(g: GraphIR, hw: HwConfig = HwConfig()) -> Schedule:
    """Lower an engine-mapped graph: loops, tiling, L2 placement, steps."""
    validate_graph(g)
    order = topo_order(g)
    budget = hw.l1_budget
    low = _Lowerer(g, hw)
    node_loops: Dict[str, List[int]] = {}
    for n in order:
        start = len(low.loops)
        low.lower(n)
        node_loops[n.name] = list(range(start, len(low.loops)))

    for loop in low.loops:
        try:
            loop.tiling = _solve(loop, g, low.scratch, budget, hw)
        except TilingInfeasible as e:
            raise CompileError(f"node {loop.node!r}: {e}") from e
        bufs = loop.tiling.buffers
        if loop.kind != "gemm":
            # per-channel parameter vectors get their own ping/pong slots
            bufs.pop("params", None)
            for role, v in loop.ins.items():
                if not role.startswith("in"):
                    bufs[role] = v.cols * ELEM_BYTES[tensor_info(g, low.scratch, v.tensor)[1]]
        _alloc_l1(loop, budget)

    # L2: weights packed first, activations and node scratch allocated by lifetime
    mem = MemoryMap()
    off = 0
    for name, t in g.tensors.items():
        if t.kind == "weight" and t.view is None:
            mem.placements[name] = Placement(off, t.nbytes)
            mem.intervals[name] = (0, max(len(order) - 1, 0))
            off = align(off + t.nbytes, 64)
    weights_bytes = off
    intervals = lifetimes(g, order)
    pos = {n.name: i for i, n in enumerate(order)}
    sizes = {t: g.tensors[t].nbytes for t in intervals}
    for name, owner in low.scratch_owner.items():
        intervals[name] = (pos[owner], pos[owner])
        r, c = low.scratch[name]["shape"]
        sizes[name] = r * c * ELEM_BYTES[low.scratch[name]["dtype"]]
    try:
        act = static_alloc(intervals, sizes, hw.l2_bytes - weights_bytes, base=weights_bytes)
    except AllocationError as e:
        raise CompileError(str(e)) from e
    mem.placements.update(act.placements)
    mem.intervals.update(act.intervals)
    mem.base, mem.peak = weights_bytes, act.peak

    steps: List[Step] = []
    for loop in low.loops:
        tiles = _tiles(loop)
        n = len(tiles)
        emitted = 0
        pending_out: Optional[Tuple[View, int]] = None

        def dma_in(t, ti):
            out = []
            for role, v in sorted(t["ins"].items()):
                out.append(make_transfer(g, low.scratch, mem, "in", v, loop.l1[role][ti % 2]))
            return out

        steps.append(Step(len(steps), loop.id, 0, dma_in(tiles[0], 0)))
        for i in range(1, n + 2):
            ti = i - 1
            st = Step(len(steps), loop.id, ti % 2)
            if pending_out is not None:
                v, l1 = pending_out
                st.dma_out.append(make_transfer(g, low.scratch, mem, "out", v, l1))
                pending_out = None
            if ti < n:
                t = tiles[ti]
                task = {"loop": loop.id, "tile": ti, "kind": loop.kind, "engine": loop.engine,
                        "k": t["k"], "coords": t["coords"],
                        "ins": {role: {"l1": loop.l1[role][ti % 2], "view": v.to_list()}
                                for role, v in sorted(t["ins"].items())},
                        "out": None}
                if t["out"] is not None:
                    l1 = loop.l1["out"][emitted % 2]
                    task["out"] = {"l1": l1, "view": t["out"].to_list()}
                    pending_out = (t["out"], l1)
                    emitted += 1
                st.compute = task
            if i < n:
                st.dma_in = dma_in(tiles[i], i)
            if st.compute is None and not st.dma_in and not st.dma_out:
                continue
            steps.append(st)
    ita_steps = [s for s in steps if s.compute and s.compute["engine"] == "ita"]
    for a, b in zip(ita_steps, ita_steps[1:]):
        a.preprogram = [b.compute["loop"], b.compute["tile"]]
    for i, s in enumerate(steps):
        s.index = i
    return Schedule(g, mem, low.scratch, low.loops, steps, budget, weights_bytes)


# --------------------------------------------------------------------------- #
# Independent validator
# --------------------------------------------------------------------------- #

class _Regions:
    """L1 content tracker: disjoint byte ranges tagged with what they hold."""

    def __init__(self):
        self.regions: Dict[Tuple[int, int], str] = {}

    def write(self, start: int, end: int, tag: str) -> None:
        for key in [k for k in self.regions if k[0] < end and start < k[1]]:
            del self.regions[key]
        self.regions[(start, end)] = tag

    def holds(self, start: int, end: int, tag: str) -> bool:
        return self.regions.get((start, end)) == tag


def _overlap(a: Tuple[int, int], b: Tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def validate_schedule(s: Schedule, hw: HwConfig = HwConfig()) -> None:
    """Check data availability, ping/pong alternation, the two-context limit,
    accelerator tile geometry and memory non-overlap.  Raises ScheduleError."""
    g = s.graph
    errors: List[str] = []

    def err(msg):
        errors.append(msg)
        if len(errors) >= 20:
            raise ScheduleError("; ".join(errors))

    bad = check_no_overlap(s.memory)
    if bad:
        err(f"L2 allocations overlap while live: {bad[:3]}")
    for loop in s.loops:
        spans = sorted((o, o + loop.tiling.buffers[r]) for r, offs in loop.l1.items() for o in offs)
        for a, b in zip(spans, spans[1:]):
            if _overlap(a, b):
                err(f"loop {loop.id}: L1 buffers overlap {a} {b}")
        if spans and spans[-1][1] > s.l1_budget:
            err(f"loop {loop.id}: L1 buffers exceed budget")
        if any(o % ALIGN for offs in loop.l1.values() for o in offs):
            err(f"loop {loop.id}: unaligned L1 buffer")

    # L2 data availability: activation rectangles become valid once written
    written: Dict[str, np.ndarray] = {}
    for name in list(s.scratch) + [t for t, tt in g.tensors.items() if tt.kind == "act"]:
        r, c = tensor_info(g, s.scratch, name)[0]
        written[name] = np.zeros((r, c), dtype=bool)

    l1 = _Regions()
    last_in_phase: Dict[int, int] = {}
    last_out_phase: Dict[int, int] = {}
    pending_ctx: Optional[List[int]] = None
    for st in s.steps:
        loop = s.loops[st.loop]
        reads, writes_in = [], []
        out_reads = []
        c = st.compute
        # compute operands must already be resident
        if c is not None:
            for role, op in c["ins"].items():
                v = View.from_list(op["view"])
                eb = ELEM_BYTES[tensor_info(g, s.scratch, v.tensor)[1]]
                rng = (op["l1"], op["l1"] + v.rows * v.cols * eb)
                reads.append(rng)
                if not l1.holds(*rng, v.tag):
                    err(f"step {st.index}: {role} tile {v.tag} not resident at L1 {op['l1']}")
            in_phases = {(o["l1"] in loop.l1.get(r, [])[1:]) for r, o in c["ins"].items()}
            if len(in_phases) == 1:
                ph = in_phases.pop()
                if st.loop in last_in_phase and last_in_phase[st.loop] == ph:
                    err(f"step {st.index}: input phase does not alternate in loop {st.loop}")
                last_in_phase[st.loop] = ph
            if c["engine"] == "ita":
                v = View.from_list(c["ins"]["x"]["view"])
                w = View.from_list(c["ins"]["w"]["view"])
                if any(d % hw.ita_vec_len for d in (v.rows, v.cols, w.rows, w.cols)):
                    err(f"step {st.index}: accelerator tile dims {v.rows}x{v.cols}/{w.rows}x{w.cols} "
                        f"not multiples of {hw.ita_vec_len}")
                me = [c["loop"], c["tile"]]
                if pending_ctx is not None and pending_ctx != me:
                    err(f"step {st.index}: accelerator task {me} was not the preprogrammed {pending_ctx}")
                pending_ctx = st.preprogram
            elif st.preprogram is not None:
                err(f"step {st.index}: preprogram attached to a non-accelerator step")
        for t in st.dma_out:
            rng = (t.l1, t.l1 + t.nbytes)
            out_reads.append(rng)
            if not l1.holds(*rng, "out:" + t.view.tag):
                err(f"step {st.index}: DMA-out of {t.view.tag} reads L1 not holding that output")
        for t in st.dma_in:
            rng = (t.l1, t.l1 + t.nbytes)
            if any(_overlap(rng, r) for r in reads + out_reads):
                err(f"step {st.index}: prefetch of {t.view.tag} overwrites a buffer in use")
            writes_in.append((rng, t))
            v = t.view
            if v.tensor in written:
                if not written[v.tensor][v.row0:v.row0 + v.rows, v.col0:v.col0 + v.cols].all():
                    err(f"step {st.index}: {v.tag} read from L2 before it was produced")
            if t.rows * t.row_bytes + t.l1 > s.l1_budget:
                err(f"step {st.index}: transfer exceeds L1 budget")
        if c is not None and c["out"] is not None:
            v = View.from_list(c["out"]["view"])
            eb = ELEM_BYTES[tensor_info(g, s.scratch, v.tensor)[1]]
            rng = (c["out"]["l1"], c["out"]["l1"] + v.rows * v.cols * eb)
            if any(_overlap(rng, r) for r in out_reads + [w for w, _ in writes_in]):
                err(f"step {st.index}: output tile {v.tag} collides with a concurrent transfer")
            ph = c["out"]["l1"] == loop.l1["out"][1]
            if st.loop in last_out_phase and last_out_phase[st.loop] == ph:
                err(f"step {st.index}: output phase does not alternate in loop {st.loop}")
            last_out_phase[st.loop] = ph
            l1.write(*rng, "out:" + v.tag)
        for rng, t in writes_in:
            l1.write(*rng, t.view.tag)
        for t in st.dma_out:
            v = t.view
            if v.tensor in written:
                written[v.tensor][v.row0:v.row0 + v.rows, v.col0:v.col0 + v.cols] = True
    for name in g.outputs:
        if not written[name].all():
            err(f"graph output {name!r} is never completely written")
    if errors:
        raise ScheduleError("; ".join(errors))
