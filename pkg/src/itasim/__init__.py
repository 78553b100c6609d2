"""Functional and cycle-approximate simulator of an 8-bit transformer accelerator
attached to a RISC-V compute cluster, with a small deployment compiler."""

from .graph import GraphIR, parse_graph
from .ita import ExpParams, GeluParams, ItaConfig, ita_attention_head, ita_gemm, softmax_rows
from .mobilebert import ModelConfig, build_mobilebert
from .passes import fuse_mha, lower, map_engines, split_heads
from .quant import QTensor, QuantParams, requantize
from .runtime import run_schedule
from .schedule import compile_schedule, validate_schedule
from .timing import EnergyConfig, HwConfig

__version__ = "0.1.0"
