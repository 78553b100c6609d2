"""Canned benchmark scenarios: GEMM, single-head attention, end-to-end MobileBERT."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .graph import GraphIR
from .ita import ExpParams
from .mobilebert import ModelConfig, build_mobilebert, make_inputs
from .passes import lower
from .quant import QuantParams
from .reference import execute_graph
from .runtime import run_schedule
from .schedule import Schedule, compile_schedule, validate_schedule
from .timing import CycleReport, EnergyConfig, HwConfig


@dataclass
class BenchResult:
    scenario: str
    params: Dict
    report: CycleReport
    schedule: Schedule
    outputs: Dict[str, np.ndarray] = field(default_factory=dict)
    bit_exact: Optional[bool] = None

    @property
    def output_sha256(self) -> Optional[str]:
        if not self.outputs:
            return None
        h = hashlib.sha256()
        for name in sorted(self.outputs):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.outputs[name], dtype=np.int64).tobytes())
        return h.hexdigest()


def _weights(rng, shape, lo=-64, hi=64) -> np.ndarray:
    return rng.integers(lo, hi, size=shape, dtype=np.int64)


def gemm_graph(R: int, K: int, C: int, seed: int = 0) -> GraphIR:
    """x[R,K] @ w[K,C] + b, requantized for ~unit-variance outputs."""
    rng = np.random.default_rng(seed)
    g = GraphIR(f"gemm_{R}x{K}x{C}")
    g.add_tensor("x", (R, K), "i8", 1 / 32, "input")
    g.add_tensor("w", (K, C), "i8", 1 / 64, "weight", _weights(rng, (K, C)))
    g.add_tensor("b", (C,), "i24", 1 / 2048, "weight", _weights(rng, (C,), -4096, 4096))
    m = 32 / (np.sqrt(K) * 32 * 37)
    g.add_tensor("y", (R, C), "i8", 1 / 32, "act")
    g.add_node("gemm", "Gemm", ["x", "w", "b"], ["y"], mode="matmul",
               quant=QuantParams.from_real(m).to_dict())
    g.outputs = ["y"]
    return g


def attention_graph(S: int, E: int, P: int, seed: int = 0) -> GraphIR:
    """One attention head with seeded weights."""
    rng = np.random.default_rng(seed)
    g = GraphIR(f"attention_{S}x{E}x{P}")
    g.add_tensor("x", (S, E), "i8", 1 / 32, "input")
    for name, shape in (("wq", (E, P)), ("wk", (E, P)), ("wv", (E, P)), ("wo", (P, E))):
        g.add_tensor(name, shape, "i8", 1 / 64, "weight", _weights(rng, shape))
    for name, n in (("bq", P), ("bk", P), ("bv", P), ("bo", E)):
        g.add_tensor(name, (n,), "i24", 1 / 2048, "weight", _weights(rng, (n,), -4096, 4096))
    proj = QuantParams.from_real(32 / (np.sqrt(E) * 32 * 37)).to_dict()
    quant = {"q": proj, "k": proj, "v": proj,
             "s": QuantParams.from_real(24 / (np.sqrt(P) * 32 * 32)).to_dict(),
             "av": QuantParams.from_real(1 / 8).to_dict(),
             "o": QuantParams.from_real(32 / (np.sqrt(P) * 32 * 37)).to_dict()}
    g.add_tensor("y", (S, E), "i8", 1 / 32, "act")
    g.add_node("attn", "AttentionHead", ["x", "wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"], ["y"],
               heads=1, quant=quant, exp=ExpParams.from_input_scale(0.06).to_dict())
    g.outputs = ["y"]
    return g


def run_graph(name: str, params: dict, g: GraphIR, mapping: str, hw: HwConfig, en: EnergyConfig,
              functional: bool = True, feeds=None, check: bool = True) -> BenchResult:
    lowered = lower(g, mapping, hw.ita)
    s = compile_schedule(lowered, hw)
    validate_schedule(s, hw)
    if feeds is None:
        feeds = make_inputs(g, 1)
    res = run_schedule(s, feeds, g.weights, hw, en, functional=functional)
    out = BenchResult(name, dict(params, mapping=mapping, functional=functional), res.report, s,
                      res.outputs)
    if functional and check:
        ref = execute_graph(g, feeds)
        out.bit_exact = all(np.array_equal(ref[k], res.outputs[k]) for k in ref)
    return out


def bench_gemm(dims: Sequence[int] = (512, 512, 512), hw: HwConfig = HwConfig(),
               en: EnergyConfig = EnergyConfig(), mapping: str = "ita",
               functional: bool = True) -> BenchResult:
    R, K, C = (int(d) for d in dims)
    return run_graph("gemm", {"dims": [R, K, C]}, gemm_graph(R, K, C), mapping, hw, en, functional)


def bench_attention(S: int = 512, E: int = 512, P: int = 64, hw: HwConfig = HwConfig(),
                    en: EnergyConfig = EnergyConfig(), mapping: str = "ita",
                    functional: bool = True) -> BenchResult:
    return run_graph("attention", {"S": S, "E": E, "P": P}, attention_graph(S, E, P), mapping, hw,
                     en, functional)


def bench_e2e(cfg: ModelConfig = ModelConfig(), mapping: str = "ita", hw: HwConfig = HwConfig(),
              en: EnergyConfig = EnergyConfig(), functional: bool = True) -> BenchResult:
    g = build_mobilebert(cfg)
    return run_graph("e2e", {"model": cfg.to_dict()}, g, mapping, hw, en, functional)
