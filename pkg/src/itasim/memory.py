"""Tensor lifetimes and static offline memory allocation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .graph import GraphIR, Node

Interval = Tuple[int, int]
ALIGN = 8


class AllocationError(MemoryError):
    def __init__(self, message: str, peak: int = 0, tensor: str = ""):
        super().__init__(message)
        self.peak = peak
        self.tensor = tensor


def align(n: int, a: int = ALIGN) -> int:
    return -(-n // a) * a


def lifetimes(g: GraphIR, order: Sequence[Node]) -> Dict[str, Interval]:
    """[producing step, last consuming step] for every activation tensor.

    Graph inputs are live from step 0; graph outputs stay live to the end.
    """
    pos = {n.name: i for i, n in enumerate(order)}
    last = len(order) - 1
    out: Dict[str, Interval] = {}
    for name in g.inputs:
        out[name] = (0, 0)
    for n in order:
        i = pos[n.name]
        for t in n.outputs:
            out[t] = (i, i)
    for n in order:
        i = pos[n.name]
        for t in n.inputs:
            if t in out:
                s, e = out[t]
                out[t] = (s, max(e, i))
    for t in g.outputs:
        if t in out:
            out[t] = (out[t][0], max(last, 0))
    return out


def live_bytes_per_step(intervals: Mapping[str, Interval], sizes: Mapping[str, int]) -> List[int]:
    """Brute-force liveness: bytes of all tensors alive at each step."""
    if not intervals:
        return []
    end = max(e for _, e in intervals.values())
    steps = [0] * (end + 1)
    for t, (s, e) in intervals.items():
        for i in range(s, e + 1):
            steps[i] += sizes[t]
    return steps


def liveness_lower_bound(intervals, sizes) -> int:
    return max(live_bytes_per_step(intervals, sizes), default=0)


@dataclass
class Placement:
    offset: int
    size: int
    level: str = "L2"

    def to_dict(self) -> dict:
        return {"offset": self.offset, "size": self.size, "level": self.level}


@dataclass
class MemoryMap:
    placements: Dict[str, Placement] = field(default_factory=dict)
    intervals: Dict[str, Interval] = field(default_factory=dict)
    base: int = 0
    peak: int = 0

    def to_dict(self) -> dict:
        return {"base": self.base, "peak": self.peak,
                "tensors": {k: {**p.to_dict(), "interval": list(self.intervals.get(k, (0, 0)))}
                            for k, p in sorted(self.placements.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryMap":
        m = cls(base=int(d["base"]), peak=int(d["peak"]))
        for k, v in d["tensors"].items():
            m.placements[k] = Placement(int(v["offset"]), int(v["size"]), v.get("level", "L2"))
            m.intervals[k] = tuple(v["interval"])
        return m


def static_alloc(intervals: Mapping[str, Interval], sizes: Mapping[str, int], budget: int,
                 base: int = 0, level: str = "L2") -> MemoryMap:
    """First-fit offsets, visiting tensors by (start, larger size first, name)."""
    order = sorted(intervals, key=lambda t: (intervals[t][0], -sizes[t], t))
    placed: List[Tuple[int, int, int, int]] = []   # (offset, end, start, stop)
    mm = MemoryMap(base=base)
    for t in order:
        s, e = intervals[t]
        size = align(max(sizes[t], 1))
        busy = sorted((o, oe) for o, oe, ps, pe in placed if ps <= e and s <= pe)
        off = 0
        for o, oe in busy:
            if off + size <= o:
                break
            off = max(off, oe)
        if off + size > budget:
            live = sum(align(sizes[x]) for x in intervals
                       if intervals[x][0] <= e and s <= intervals[x][1])
            raise AllocationError(
                f"{level} budget {budget} B exceeded placing {t!r} ({size} B at offset {off}); "
                f"live requirement around it is {live} B", peak=off + size, tensor=t)
        placed.append((off, off + size, s, e))
        mm.placements[t] = Placement(base + off, size, level)
        mm.intervals[t] = (s, e)
        mm.peak = max(mm.peak, off + size)
    return mm


def check_no_overlap(mm: MemoryMap) -> List[Tuple[str, str]]:
    """Independent pairwise check: tensors alive together must not share bytes."""
    bad = []
    names = sorted(mm.placements)
    for i, a in enumerate(names):
        pa, (sa, ea) = mm.placements[a], mm.intervals[a]
        for b in names[i + 1:]:
            pb, (sb, eb) = mm.placements[b], mm.intervals[b]
            if pa.level != pb.level:
                continue
            if sa <= eb and sb <= ea and pa.offset < pb.offset + pb.size and pb.offset < pa.offset + pa.size:
                bad.append((a, b))
    return bad
