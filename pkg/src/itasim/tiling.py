"""Tile-size selection under the L1 budget.

Accelerator GEMMs always use 64x64 output tiles (one pass of the 16 dot
product units over 64 output rows).  Their inner dimension is either kept
whole or streamed as a chain of 64-wide chunks accumulated in place.  Cluster
GEMMs keep the full inner dimension and pick the output tile with the best
compute-per-byte ratio.  Elementwise kernels tile by rows.

Every candidate must fit double buffered:
``2 * sum(tile buffers) <= l1_budget``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple


class TilingInfeasible(ValueError):
    def __init__(self, message: str, required: int = 0):
        super().__init__(message)
        self.required = required


@dataclass
class TilingSolution:
    kind: str
    engine: str
    tile: Dict[str, int]                 # tm/tk/tn for gemm, rows for elementwise
    tiles_per_dim: Dict[str, int]
    buffers: Dict[str, int]              # bytes per role, one phase
    double_buffer: bool = True

    @property
    def working_set(self) -> int:
        return (2 if self.double_buffer else 1) * sum(self.buffers.values())

    @property
    def n_tiles(self) -> int:
        n = 1
        for v in self.tiles_per_dim.values():
            n *= v
        return n

    def to_dict(self) -> dict:
        return {"kind": self.kind, "engine": self.engine, "tile": dict(self.tile),
                "tiles_per_dim": dict(self.tiles_per_dim), "buffers": dict(self.buffers),
                "double_buffer": self.double_buffer, "working_set": self.working_set}


def _ceil(a: int, b: int) -> int:
    return -(-a // b)


def gemm_buffers(tm: int, tk: int, tn: int, x_bytes=1, w_bytes=1, bias_bytes=3,
                 has_bias=True, out_bytes=1) -> Dict[str, int]:
    bufs = {"x": tm * tk * x_bytes, "w": tk * tn * w_bytes, "out": tm * tn * out_bytes}
    if has_bias:
        bufs["bias"] = tn * bias_bytes
    return bufs


def solve_ita_gemm(R: int, K: int, C: int, budget: int, vec: int = 64, has_bias: bool = True,
                   x_bytes: int = 1) -> TilingSolution:
    """64x64 output tiles; the whole K if it fits double buffered, else a 64-chunk chain."""
    for d in (R, K, C):
        if d % vec:
            raise TilingInfeasible(f"accelerator dimension {d} is not a multiple of {vec}")
    candidates = [K] if K == vec else [K, vec]
    need = None
    for tk in candidates:
        bufs = gemm_buffers(vec, tk, vec, x_bytes, 1, 3, has_bias)
        ws = 2 * sum(bufs.values())
        need = ws if need is None else min(need, ws)
        if ws <= budget:
            return TilingSolution("gemm", "ita", {"tm": vec, "tk": tk, "tn": vec},
                                  {"m": R // vec, "k": K // tk, "n": C // vec}, bufs)
    raise TilingInfeasible(f"no accelerator tile fits: needs {need} B, budget {budget} B", need)


def _sizes(n: int) -> List[int]:
    out = {n}
    p = 1
    while p < n:
        out.add(p)
        p *= 2
    return sorted(out)


def solve_cluster_gemm(R: int, K: int, C: int, budget: int, has_bias: bool = True,
                       x_bytes: int = 1) -> TilingSolution:
    """Full-K tiles maximizing MACs per byte; ties prefer more output rows."""
    best = None
    need = None
    for tm in _sizes(R):
        for tn in _sizes(C):
            bufs = gemm_buffers(tm, K, tn, x_bytes, 1, 3, has_bias)
            ws = 2 * sum(bufs.values())
            need = ws if need is None else min(need, ws)
            if ws > budget:
                continue
            score = (tm * K * tn / sum(bufs.values()), tm, tn)
            if best is None or score > best[0]:
                best = (score, tm, tn, bufs)
    if best is None:
        raise TilingInfeasible(f"no cluster GEMM tile fits: needs {need} B, budget {budget} B", need)
    _, tm, tn, bufs = best
    return TilingSolution("gemm", "cluster", {"tm": tm, "tk": K, "tn": tn},
                          {"m": _ceil(R, tm), "k": 1, "n": _ceil(C, tn)}, bufs)


def solve_rows(kind: str, rows: int, row_bytes_in: Sequence[int], row_bytes_out: int,
               budget: int, fixed_bytes: int = 0) -> TilingSolution:
    """Largest row band whose double-buffered inputs and outputs fit."""
    per_row = sum(row_bytes_in) + row_bytes_out
    avail = budget // 2 - fixed_bytes
    r = min(rows, avail // per_row) if per_row else rows
    if r < 1:
        need = 2 * (per_row + fixed_bytes)
        raise TilingInfeasible(f"{kind}: one row needs {need} B, budget {budget} B", need)
    bufs = {f"in{i}": r * b for i, b in enumerate(row_bytes_in)}
    bufs["out"] = r * row_bytes_out
    if fixed_bytes:
        bufs["params"] = fixed_bytes
    return TilingSolution(kind, "cluster", {"rows": r}, {"rows": _ceil(rows, r)}, bufs)


def tile_solve(kind: str, engine: str, budget: int, **dims) -> TilingSolution:
    """Dispatch: ``gemm`` needs R, K, C (and has_bias, x_bytes); others need rows etc."""
    if kind == "gemm":
        fn = solve_ita_gemm if engine == "ita" else solve_cluster_gemm
        return fn(dims["R"], dims["K"], dims["C"], budget, has_bias=dims.get("has_bias", True),
                  x_bytes=dims.get("x_bytes", 1))
    return solve_rows(kind, dims["rows"], dims["row_bytes_in"], dims["row_bytes_out"], budget,
                      dims.get("fixed_bytes", 0))
