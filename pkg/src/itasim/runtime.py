"""Step-by-step execution of a compiled schedule.

The simulator keeps a byte image of L2 and L1.  Every DMA transfer copies
bytes between them, every compute step decodes its operands from L1, runs
the bit-accurate kernel and encodes the result back into L1.  Accelerator
GEMMs keep their accumulators in the engine across the steps of a K chain,
and the softmax DA/EN state lives in the engine per 64-row band.

Timing is computed per step from the analytic cost model and folded with
``overlap_schedule``; it does not depend on the data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from . import container
from .graph import GraphIR
from .ita import (ActMode, ExpParams, GeluParams, ItaMaxState, OutputTile, Phase, i_gelu,
                  itamax_absorb, itamax_finalize, itamax_normalize, softmax_rows)
from .kernels import CLUSTER_ACC_BITS, gemm_acc
from .quant import QuantParams, check_range, requantize
from .reference import MissingTensor
from .schedule import ELEM_BYTES, Loop, Schedule, Step, View, tensor_info
from .timing import (CycleReport, EnergyConfig, HwConfig, StepCost, cluster_kernel_cycles,
                     dma_cycles, energy, ita_tile_cycles, overlap_schedule, streamer_cycles)


class ExecutionError(RuntimeError):
    pass


def encode(values, dtype: str) -> np.ndarray:
    """Little-endian two's complement bytes of ``values`` (flattened)."""
    return np.frombuffer(container.encode(np.asarray(values, dtype=np.int64), dtype), dtype=np.uint8)


def decode(raw: np.ndarray, dtype: str, shape) -> np.ndarray:
    raw = np.ascontiguousarray(raw, dtype=np.uint8)
    return container.decode(raw.tobytes(), dtype, int(np.prod(shape))).reshape(shape)


# --------------------------------------------------------------------------- #
# Cost model per step
# --------------------------------------------------------------------------- #

def _view_bytes(s: Schedule, v: View) -> int:
    return v.rows * v.cols * ELEM_BYTES[tensor_info(s.graph, s.scratch, v.tensor)[1]]


def step_cost(s: Schedule, st: Step, hw: HwConfig) -> StepCost:
    loop = s.loops[st.loop]
    transfers = st.dma_in + st.dma_out
    dma = sum(dma_cycles(t.nbytes, hw) for t in transfers)
    moved = sum(t.nbytes for t in transfers)
    c = st.compute
    cost = StepCost(0, dma, "none", 0, moved, loop.node, loop.layer, 0)
    if c is None:
        return cost
    views = {r: View.from_list(o["view"]) for r, o in c["ins"].items()}
    if loop.kind == "gemm":
        x, w = views["x"], views["w"]
        cols = w.rows if loop.params["trans_b"] else w.cols
        macs = x.rows * x.cols * cols
        cost.ops = 2 * macs
        if loop.engine == "ita":
            chunks = math.ceil(x.cols / hw.ita_vec_len)
            n_out = (x.rows // hw.ita_vec_len) * (cols // hw.ita_vec_len)
            emit = c["out"] is not None
            busy = n_out * ita_tile_cycles(chunks, hw)
            compute = busy + hw.ita_task_overhead + (hw.ita_drain_cycles * n_out if emit else 0)
            b_in = sum(_view_bytes(s, v) for v in views.values())
            b_out = _view_bytes(s, View.from_list(c["out"]["view"])) if emit else 0
            cost.compute = max(compute, streamer_cycles(b_in, b_out, hw))
            cost.mac_cycles = busy
            cost.engine = "ita"
        else:
            cost.compute = cluster_kernel_cycles("gemm", macs=macs, hw=hw)
            cost.engine = "cluster"
        return cost
    out = View.from_list(c["out"]["view"])
    cost.compute = cluster_kernel_cycles(loop.kind, elements=out.rows * out.cols, hw=hw)
    cost.engine = "cluster"
    return cost


def schedule_costs(s: Schedule, hw: HwConfig = HwConfig()) -> List[StepCost]:
    return [step_cost(s, st, hw) for st in s.steps]


def time_schedule(s: Schedule, hw: HwConfig = HwConfig(), en: EnergyConfig = EnergyConfig(),
                  keep_steps: bool = True) -> CycleReport:
    rep = overlap_schedule(schedule_costs(s, hw), hw, keep_steps)
    rep.energy_mj = energy(rep, en)
    return rep


# --------------------------------------------------------------------------- #
# Functional execution
# --------------------------------------------------------------------------- #

@dataclass
class RunResult:
    outputs: Dict[str, np.ndarray]
    report: Optional[CycleReport] = None
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)


class Machine:
    """L2/L1 byte images plus accelerator engine state."""

    def __init__(self, s: Schedule, hw: HwConfig = HwConfig(), capture: bool = False):
        self.s = s
        self.hw = hw
        self.l2 = np.zeros(s.weights_bytes + s.memory.peak, dtype=np.uint8)
        self.l1 = np.zeros(hw.l1_bytes, dtype=np.uint8)
        self.tile: Optional[OutputTile] = None
        self.bands: Dict[str, List[ItaMaxState]] = {}
        self.capture = capture
        self.tensors: Dict[str, np.ndarray] = {}

    # -- memory -------------------------------------------------------------
    def _info(self, name: str):
        return tensor_info(self.s.graph, self.s.scratch, name)

    def write_tensor(self, name: str, values) -> None:
        (r, c), dtype = self._info(name)
        data = encode(np.asarray(values).reshape(r, c), dtype)
        p = self.s.memory.placements[name]
        if data.size > p.size:
            raise ExecutionError(f"{name}: {data.size} B does not fit its {p.size} B slot")
        self.l2[p.offset:p.offset + data.size] = data

    def read_tensor(self, name: str) -> np.ndarray:
        (r, c), dtype = self._info(name)
        p = self.s.memory.placements[name]
        n = r * c * ELEM_BYTES[dtype]
        shape = self.s.graph.tensors[name].shape if name in self.s.graph.tensors else (r, c)
        return decode(self.l2[p.offset:p.offset + n], dtype, shape)

    def dma(self, t) -> None:
        rows = np.arange(t.rows)
        cols = np.arange(t.row_bytes)
        l2_idx = t.l2 + rows[:, None] * t.stride + cols[None, :]
        l1_idx = t.l1 + rows[:, None] * t.row_bytes + cols[None, :]
        if t.dir == "in":
            self.l1[l1_idx] = self.l2[l2_idx]
        else:
            self.l2[l2_idx] = self.l1[l1_idx]
            if self.capture:
                v = t.view
                full = self.tensors.setdefault(v.tensor, np.zeros(self._info(v.tensor)[0], dtype=np.int64))
                full[v.row0:v.row0 + v.rows, v.col0:v.col0 + v.cols] = decode(
                    self.l1[l1_idx].ravel(), self._info(v.tensor)[1], (v.rows, v.cols))

    def load(self, role_op: dict) -> np.ndarray:
        v = View.from_list(role_op["view"])
        dtype = self._info(v.tensor)[1]
        n = v.rows * v.cols * ELEM_BYTES[dtype]
        return decode(self.l1[role_op["l1"]:role_op["l1"] + n], dtype, (v.rows, v.cols))

    def store(self, out_op: dict, values) -> None:
        v = View.from_list(out_op["view"])
        data = encode(values, self._info(v.tensor)[1])
        self.l1[out_op["l1"]:out_op["l1"] + data.size] = data

    # -- compute ------------------------------------------------------------
    def compute(self, loop: Loop, c: dict) -> None:
        ins = {r: self.load(o) for r, o in c["ins"].items()}
        p = loop.params
        kind = loop.kind
        if kind == "gemm":
            self._gemm(loop, c, ins)
            return
        q = QuantParams.from_dict(p["quant"]) if "quant" in p else None
        if kind == "softmax":
            out = softmax_rows(ins["in0"], ExpParams.from_dict(p["exp"]))
        elif kind == "add":
            acc = int(p.get("mul_a", 1)) * ins["in0"] + int(p.get("mul_b", 1)) * ins["in1"]
            check_range(acc, CLUSTER_ACC_BITS)
            out = requantize(acc, q)
        elif kind == "affine":
            acc = ins["in0"] * ins["gamma"] + ins["beta"]
            check_range(acc, CLUSTER_ACC_BITS)
            out = requantize(acc, q)
        elif kind == "gelu":
            out = i_gelu(ins["in0"], GeluParams.from_dict(p["gelu"]))
        elif kind == "relu":
            out = np.maximum(ins["in0"], 0)
        elif kind == "requant":
            out = requantize(ins["in0"], q)
        elif kind == "head_accum":
            acc = np.sum([ins[r] for r in sorted(ins)], axis=0)
            check_range(acc, CLUSTER_ACC_BITS)
            out = requantize(acc, q)
        else:
            raise ExecutionError(f"unknown kernel {kind!r}")
        self.store(c["out"], out)

    def _gemm(self, loop: Loop, c: dict, ins: Dict[str, np.ndarray]) -> None:
        p = loop.params
        q = QuantParams.from_dict(p["quant"])
        act = ActMode.from_dict(p["act"])
        x, w = ins["x"], ins["w"]
        bias = ins["bias"].ravel() if "bias" in ins else None
        if "en" in p:
            x = self._normalize(p["en"], x, ExpParams.from_dict(p["exp"]))
        if p["trans_b"]:
            w = w.T
        if loop.engine == "cluster":
            self.store(c["out"], act.apply(gemm_acc(x, w, bias), q))
            return
        ki, nk = c["k"]
        if ki == 0:
            self.tile = OutputTile(x.shape[0], w.shape[1], bias, self.hw.ita_acc_bits)
        self.tile.accumulate(x, w)
        if ki == nk - 1:
            out = self.tile.emit(act, q)
            self.tile = None
            self.store(c["out"], out)
            if "da" in p:
                self._absorb(p["da"], out, ExpParams.from_dict(p["exp"]))

    def _groups(self, key: str, exp: ExpParams) -> List[ItaMaxState]:
        if key not in self.bands:
            g = self.hw.ita.itamax_rows
            self.bands[key] = [ItaMaxState(g, exp) for _ in range(self.hw.ita_vec_len // g)]
        return self.bands[key]

    def _absorb(self, key: str, s_tile: np.ndarray, exp: ExpParams) -> None:
        g = self.hw.ita.itamax_rows
        for gi, st in enumerate(self._groups(key, exp)):
            itamax_absorb(st, s_tile[gi * g:(gi + 1) * g])

    def _normalize(self, key: str, s_tile: np.ndarray, exp: ExpParams) -> np.ndarray:
        g = self.hw.ita.itamax_rows
        groups = self.bands.get(key)
        if groups is None:
            raise ExecutionError(f"softmax band {key!r} used before its scores were absorbed")
        parts = []
        for gi, st in enumerate(groups):
            if st.phase is Phase.DA:
                itamax_finalize(st)
            parts.append(itamax_normalize(st, s_tile[gi * g:(gi + 1) * g]))
        return np.concatenate(parts).astype(np.int64)

    def step(self, st: Step) -> None:
        # compute reads the state before this step's prefetch lands
        if st.compute is not None:
            self.compute(self.s.loops[st.loop], st.compute)
        for t in st.dma_out:
            self.dma(t)
        for t in st.dma_in:
            self.dma(t)


def _weight_value(g: GraphIR, name: str, weights: Optional[Mapping[str, np.ndarray]]):
    if weights is not None and name in weights:
        return weights[name]
    if name in g.weights:
        return g.weights[name]
    raise MissingTensor(f"no value for weight {name!r}")


def run_schedule(s: Schedule, feeds: Mapping[str, np.ndarray],
                 weights: Optional[Mapping[str, np.ndarray]] = None,
                 hw: HwConfig = HwConfig(), en: EnergyConfig = EnergyConfig(),
                 functional: bool = True, capture: bool = False) -> RunResult:
    """Execute (optionally) and time a schedule; returns graph outputs and the report."""
    g = s.graph
    rep = time_schedule(s, hw, en)
    if not functional:
        return RunResult({}, rep)
    m = Machine(s, hw, capture)
    for name, t in g.tensors.items():
        if t.kind == "weight" and t.view is None:
            m.write_tensor(name, _weight_value(g, name, weights))
    for name in g.inputs:
        if name not in feeds:
            raise MissingTensor(f"no value for graph input {name!r}")
        m.write_tensor(name, feeds[name])
    for st in s.steps:
        m.step(st)
    outputs = {name: m.read_tensor(name) for name in g.outputs}
    tensors = {k: v.reshape(g.tensors[k].shape) if k in g.tensors else v for k, v in m.tensors.items()}
    return RunResult(outputs, rep, tensors)
