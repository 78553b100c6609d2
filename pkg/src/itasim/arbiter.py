"""Cycle-stepped TCDM bank contention with round-robin arbitration.

Every requester keeps an in-order queue of word addresses.  Each cycle the head
request of every non-empty queue competes for its bank; a bank grants one
request per cycle and its round-robin pointer moves past the winner.  Losers
retry in the next cycle.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

Request = Tuple[int, int]   # (requester id, byte address)


def bank_of(addr: int, n_banks: int = 32, word_bytes: int = 8) -> int:
    return (addr // word_bytes) % n_banks


@dataclass
class Grant:
    cycle: int
    requester: int
    bank: int
    issued: int

    @property
    def latency(self) -> int:
        """Cycles from becoming head of line to grant (1 when uncontended)."""
        return self.cycle - self.issued + 1


@dataclass
class GrantTimeline:
    grants: List[Grant] = field(default_factory=list)
    cycles: int = 0
    n_requests: int = 0

    def per_cycle(self) -> Dict[int, List[Tuple[int, int]]]:
        out: Dict[int, List[Tuple[int, int]]] = {}
        for g in self.grants:
            out.setdefault(g.cycle, []).append((g.requester, g.bank))
        return out

    @property
    def max_latency(self) -> int:
        return max((g.latency for g in self.grants), default=0)

    @property
    def throughput(self) -> float:
        return self.n_requests / self.cycles if self.cycles else 0.0


def contention_sim(accesses: Sequence[Sequence[Request]], n_banks: int = 32,
                   word_bytes: int = 8, max_cycles: int = 1 << 20) -> GrantTimeline:
    """Simulate ``accesses[c]``: requests issued in cycle c, as (requester, address).

    Returns every grant with the cycle it happened in.
    """
    queues: Dict[int, List[Tuple[int, int]]] = {}      # requester -> [(bank, issue cycle)]
    heads_since: Dict[int, int] = {}
    pointer = [0] * n_banks
    requesters = sorted({r for cyc in accesses for r, _ in cyc})
    tl = GrantTimeline(n_requests=sum(len(c) for c in accesses))
    if not requesters:
        return tl
    n_req = max(requesters) + 1
    cycle = 0
    while cycle < len(accesses) or any(queues.values()):
        if cycle >= max_cycles:
            raise RuntimeError("contention simulation did not drain")
        if cycle < len(accesses):
            for r, addr in accesses[cycle]:
                q = queues.setdefault(r, [])
                if not q:
                    heads_since[r] = cycle
                q.append((bank_of(addr, n_banks, word_bytes), cycle))
        contenders: Dict[int, List[int]] = {}
        for r, q in queues.items():
            if q:
                contenders.setdefault(q[0][0], []).append(r)
        for bank, reqs in sorted(contenders.items()):
            p = pointer[bank]
            winner = min(reqs, key=lambda r: (r - p) % n_req)
            pointer[bank] = (winner + 1) % n_req
            queues[winner].pop(0)
            tl.grants.append(Grant(cycle, winner, bank, heads_since[winner]))
            if queues[winner]:
                heads_since[winner] = cycle + 1
        cycle += 1
    tl.cycles = cycle
    return tl
