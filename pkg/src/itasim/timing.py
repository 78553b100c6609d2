"""Cycle-approximate cost model of the cluster and the accelerator.

Costs are analytic per step.  A step is one double-buffered slot: the compute
task of tile t runs while the DMA fetches tile t+1 and drains tile t-1, so the
step takes ``max(compute, dma)`` cycles.  Bank contention is modeled
separately, cycle by cycle, in :mod:`itasim.arbiter`.
"""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .ita import ItaConfig

CONFIG_ENV = "ITASIM_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HwConfig:
    clock_mhz: float = 425.0
    n_worker_cores: int = 8
    tcdm_banks: int = 32
    bank_bytes: int = 4096
    tcdm_word_bytes: int = 8
    hwpe_ports: int = 16
    axi_wide_bits: int = 512
    axi_narrow_bits: int = 64
    l1_bytes: int = 131072
    l1_reserve_bytes: int = 10240
    icache_bytes: int = 8192
    l2_bytes: int = 64 << 20
    ita_units: int = 16
    ita_vec_len: int = 64
    ita_acc_bits: int = 26
    ita_max_dim: int = 512
    dma_setup_cycles: int = 16
    ita_pipeline_fill: int = 0
    ita_task_overhead: int = 36
    ita_drain_cycles: int = 158
    cluster_startup_cycles: int = 300
    cpm: float = 9.0
    cpe: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be non-negative")
        if self.tcdm_banks * self.bank_bytes != self.l1_bytes:
            raise ConfigError("tcdm_banks * bank_bytes must equal l1_bytes")
        if self.l1_reserve_bytes >= self.l1_bytes:
            raise ConfigError("l1_reserve_bytes leaves no L1 for buffers")
        if self.n_worker_cores < 1 or self.clock_mhz <= 0:
            raise ConfigError("need at least one core and a positive clock")

    @property
    def tcdm_bw_bytes_per_cycle(self) -> int:
        return self.tcdm_banks * self.tcdm_word_bytes

    @property
    def hwpe_bw_bytes_per_cycle(self) -> int:
        return self.hwpe_ports * self.tcdm_word_bytes

    @property
    def dma_bytes_per_cycle(self) -> int:
        return self.axi_wide_bits // 8

    @property
    def l1_budget(self) -> int:
        return self.l1_bytes - self.l1_reserve_bytes

    @property
    def ita(self) -> ItaConfig:
        return ItaConfig(self.ita_units, self.ita_vec_len, self.ita_acc_bits, self.ita_max_dim)

    @property
    def peak_ops_per_cycle(self) -> int:
        return 2 * self.ita_units * self.ita_vec_len

    @property
    def peak_gops(self) -> float:
        return self.peak_ops_per_cycle * self.clock_mhz / 1e3


@dataclass(frozen=True)
class EnergyConfig:
    """Linear activity model; powers in mW, calibrated rather than physical."""

    p_idle_mw: float = 6.0
    p_cluster_mw: float = 20.0
    p_ita_mw: float = 125.0
    p_dma_mw: float = 5.0
    calibration: str = "mobilebert-e2e"

    def __post_init__(self):
        for name in ("p_idle_mw", "p_cluster_mw", "p_ita_mw", "p_dma_mw"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


_DOCS = {
    "clock_mhz": "cluster clock",
    "n_worker_cores": "worker cores running cluster kernels",
    "tcdm_banks": "L1 banks",
    "bank_bytes": "bytes per bank",
    "tcdm_word_bytes": "bank word width",
    "hwpe_ports": "accelerator master ports on the L1 interconnect",
    "axi_wide_bits": "DMA interconnect width",
    "axi_narrow_bits": "core interconnect width (accounting only)",
    "l1_bytes": "L1 scratchpad size",
    "l1_reserve_bytes": "L1 held back for core stacks and scratch",
    "icache_bytes": "instruction cache (accounting only)",
    "l2_bytes": "background memory size",
    "ita_units": "dot-product units",
    "ita_vec_len": "dot-product vector length",
    "ita_acc_bits": "accumulator width",
    "ita_max_dim": "largest matrix dimension per task",
    "dma_setup_cycles": "fixed cycles per DMA transfer",
    "ita_pipeline_fill": "extra cycles per accelerator step",
    "ita_task_overhead": "task programming and handshake cycles per accelerator step",
    "ita_drain_cycles": "output drain cycles per emitted 64x64 tile",
    "cluster_startup_cycles": "fork/join and setup cycles per cluster kernel call",
    "cpm": "cycles per MAC per core",
    "cpe": "cycles per element per pass per core",
    "p_idle_mw": "always-on power",
    "p_cluster_mw": "extra power while cores compute",
    "p_ita_mw": "extra power while the accelerator computes",
    "p_dma_mw": "extra power while the DMA moves data",
    "calibration": "label of the energy calibration",
}


def _coerce(cls, name: str, text: str):
    ftype = {f.name: f.type for f in fields(cls)}[name]
    try:
        if ftype in (int, "int"):
            return int(text)
        if ftype in (float, "float"):
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"{name}: cannot parse {text!r}") from e


def parse_config(text: str) -> Tuple[HwConfig, EnergyConfig]:
    """Parse flat ``key = value`` lines (``#`` starts a comment)."""
    hw_keys = {f.name for f in fields(HwConfig)}
    en_keys = {f.name for f in fields(EnergyConfig)}
    hw, en = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in hw_keys:
            hw[key] = _coerce(HwConfig, key, value)
        elif key in en_keys:
            en[key] = _coerce(EnergyConfig, key, value)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return HwConfig(**hw), EnergyConfig(**en)


def format_config(hw: HwConfig = HwConfig(), en: EnergyConfig = EnergyConfig()) -> str:
    lines = ["# itasim hardware and energy configuration"]
    for obj in (hw, en):
        for f in fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}  # {_DOCS[f.name]}")
    return "\n".join(lines) + "\n"


def load_config(path=None) -> Tuple[HwConfig, EnergyConfig]:
    """Load a config file; falls back to $ITASIM_CONFIG, then to the defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return HwConfig(), EnergyConfig()
    return parse_config(Path(path).read_text())


# --------------------------------------------------------------------------- #
# Cost functions
# --------------------------------------------------------------------------- #

def ita_tile_cycles(k_chunks: int, hw: HwConfig = HwConfig()) -> int:
    """Compute cycles of one 64x64 output tile over ``k_chunks`` inner chunks."""
    per_chunk = hw.ita_vec_len * hw.ita_vec_len // hw.ita_units
    return k_chunks * per_chunk + hw.ita_pipeline_fill


def dma_cycles(nbytes: int, hw: HwConfig = HwConfig()) -> int:
    if nbytes < 0:
        raise ValueError("negative transfer size")
    return math.ceil(nbytes / hw.dma_bytes_per_cycle) + hw.dma_setup_cycles


def streamer_cycles(bytes_in: int, bytes_out: int, hw: HwConfig = HwConfig()) -> int:
    """Cycles for the accelerator streamers; input and output share the ports."""
    return math.ceil((bytes_in + bytes_out) / hw.hwpe_bw_bytes_per_cycle)


def worst_case_tile_bytes(hw: HwConfig = HwConfig(), bias_bytes: int = 3) -> int:
    """Input and weight tiles, 24-bit biases and one output tile."""
    m = hw.ita_vec_len
    return 2 * m * m + m * bias_bytes + m * m


def dma_demand(nbytes: int, cycles: int) -> float:
    return nbytes / cycles


ELEMENTWISE_PASSES = {"add": 1, "affine": 1, "relu": 1, "requant": 1,
                      "head_accum": 1, "gelu": 2, "softmax": 3}


def cluster_kernel_cycles(kind: str, elements: int = 0, macs: int = 0,
                          hw: HwConfig = HwConfig()) -> int:
    """Cycles of a parallel kernel on the worker cores."""
    n = hw.n_worker_cores
    if kind == "gemm":
        work = macs * hw.cpm / n
    else:
        work = elements * hw.cpe * ELEMENTWISE_PASSES.get(kind, 1) / n
    return hw.cluster_startup_cycles + math.ceil(work)


# --------------------------------------------------------------------------- #
# Double-buffer overlap and reports
# --------------------------------------------------------------------------- #

@dataclass
class StepCost:
    compute: int = 0
    dma: int = 0
    engine: str = "none"        # ita | cluster | none
    ops: int = 0
    bytes_moved: int = 0
    node: str = ""
    layer: int = -1
    mac_cycles: int = 0


@dataclass
class StepTiming:
    cycles: int
    compute: int
    dma: int
    stall: int
    engine: str
    node: str
    layer: int


@dataclass
class CycleReport:
    clock_mhz: float
    peak_ops_per_cycle: int
    total_cycles: int = 0
    ops_total: int = 0
    mac_cycles_busy: int = 0
    bytes_moved: int = 0
    compute_cycles: Dict[str, int] = field(default_factory=dict)
    dma_cycles: int = 0
    stall_cycles: int = 0
    energy_mj: float = 0.0
    steps: List[StepTiming] = field(default_factory=list)
    per_layer: Dict[int, Dict[str, float]] = field(default_factory=dict)
    per_node: Dict[str, Dict[str, float]] = field(default_factory=dict)
    inferences: int = 1

    @property
    def time_s(self) -> float:
        return self.total_cycles / (self.clock_mhz * 1e6)

    @property
    def utilization(self) -> float:
        if not self.total_cycles:
            return 0.0
        return self.ops_total / (self.peak_ops_per_cycle * self.total_cycles)

    @property
    def gops(self) -> float:
        return self.ops_total / self.time_s / 1e9 if self.total_cycles else 0.0

    @property
    def inf_per_s(self) -> float:
        return self.inferences / self.time_s if self.total_cycles else 0.0

    @property
    def gop_per_j(self) -> float:
        return self.ops_total / 1e9 / (self.energy_mj / 1e3) if self.energy_mj else 0.0

    @property
    def power_mw(self) -> float:
        return self.energy_mj / self.time_s if self.total_cycles else 0.0

    def summary(self) -> Dict[str, float]:
        return {
            "total_cycles": self.total_cycles,
            "time_s": self.time_s,
            "ops_total": self.ops_total,
            "gops": self.gops,
            "utilization": self.utilization,
            "inf_per_s": self.inf_per_s,
            "energy_mj": self.energy_mj,
            "gop_per_j": self.gop_per_j,
            "power_mw": self.power_mw,
            "bytes_moved": self.bytes_moved,
            "mac_cycles_busy": self.mac_cycles_busy,
            "dma_cycles": self.dma_cycles,
            "stall_cycles": self.stall_cycles,
            "ita_compute_cycles": self.compute_cycles.get("ita", 0),
            "cluster_compute_cycles": self.compute_cycles.get("cluster", 0),
        }


def overlap_schedule(steps: Iterable[StepCost], hw: HwConfig = HwConfig(),
                     keep_steps: bool = True) -> CycleReport:
    """Fold per-step costs into a report: latency = max(compute, dma)."""
    rep = CycleReport(hw.clock_mhz, hw.peak_ops_per_cycle)
    for s in steps:
        cycles = max(s.compute, s.dma)
        stall = max(0, s.dma - s.compute)
        rep.total_cycles += cycles
        rep.ops_total += s.ops
        rep.mac_cycles_busy += s.mac_cycles
        rep.bytes_moved += s.bytes_moved
        rep.dma_cycles += s.dma
        rep.stall_cycles += stall
        if s.engine != "none":
            rep.compute_cycles[s.engine] = rep.compute_cycles.get(s.engine, 0) + s.compute
        if keep_steps:
            rep.steps.append(StepTiming(cycles, s.compute, s.dma, stall, s.engine, s.node, s.layer))
        for key, table in ((s.layer, rep.per_layer), (s.node, rep.per_node)):
            row = table.setdefault(key, {"cycles": 0, "ita": 0, "cluster": 0, "stall": 0, "ops": 0})
            row["cycles"] += cycles
            row["stall"] += stall
            row["ops"] += s.ops
            if s.engine in ("ita", "cluster"):
                row[s.engine] += s.compute
    return rep


def energy(rep: CycleReport, en: EnergyConfig = EnergyConfig()) -> float:
    """Energy in mJ: idle power over the run plus per-component active time."""
    f = rep.clock_mhz * 1e6
    t_total = rep.total_cycles / f
    t_cluster = rep.compute_cycles.get("cluster", 0) / f
    t_ita = rep.compute_cycles.get("ita", 0) / f
    t_dma = rep.dma_cycles / f
    return (en.p_idle_mw * t_total + en.p_cluster_mw * t_cluster
            + en.p_ita_mw * t_ita + en.p_dma_mw * t_dma)
