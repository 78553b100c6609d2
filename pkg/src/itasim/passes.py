"""Graph-to-graph compiler passes: MHA fusion, head splitting, engine mapping."""
from __future__ import annotations

import os
from typing import List, Optional

from .graph import GraphIR, Node, Tensor, quant_attr, stage_quants
from .ita import A_SCALE, ItaConfig
from .quant import QuantParams

MHA_STAGES = ("q", "k", "v", "s", "av", "o")


def _only_consumer(cons, tensor: str, node: Node) -> bool:
    users = cons.get(tensor, [])
    return len(users) == 1 and users[0] is node


def _plain_proj(n: Optional[Node]) -> bool:
    return (n is not None and n.op == "Gemm" and n.mode == "matmul"
            and not n.attrs.get("trans_b")
            and n.attrs.get("act", {"kind": "identity"}).get("kind", "identity") == "identity")


def _match_mha(g: GraphIR, sm: Node, prod, cons) -> Optional[dict]:
    """Nodes of the pattern x->{q,k,v}, qk, softmax, av, head_proj rooted at ``sm``."""
    qk = prod.get(sm.inputs[0])
    if qk is None or qk.op != "Gemm" or qk.mode != "qk":
        return None
    if not _only_consumer(cons, sm.inputs[0], sm):
        return None
    users = cons.get(sm.outputs[0], [])
    if len(users) != 1 or users[0].op != "Gemm" or users[0].mode != "av":
        return None
    av = users[0]
    if av.inputs[0] != sm.outputs[0] or sm.outputs[0] in g.outputs:
        return None
    users = cons.get(av.outputs[0], [])
    if len(users) != 1 or users[0].op != "Gemm" or users[0].mode != "head_proj":
        return None
    proj = users[0]
    nq, nk, nv = prod.get(qk.inputs[0]), prod.get(qk.inputs[1]), prod.get(av.inputs[1])
    if not all(_plain_proj(n) for n in (nq, nk, nv)):
        return None
    if len({id(nq), id(nk), id(nv)}) != 3:
        return None
    x = nq.inputs[0]
    if nk.inputs[0] != x or nv.inputs[0] != x:
        return None
    heads = {int(n.attrs.get("heads", 1)) for n in (qk, av, proj)}
    if len(heads) != 1:
        return None
    inner = [(qk.inputs[0], qk), (qk.inputs[1], qk), (av.inputs[1], av),
             (sm.inputs[0], sm), (av.outputs[0], proj)]
    if any(not _only_consumer(cons, t, n) or t in g.outputs for t, n in inner):
        return None
    return {"q": nq, "k": nk, "v": nv, "qk": qk, "sm": sm, "av": av, "proj": proj,
            "heads": heads.pop(), "x": x}


def _common_prefix(names: List[str]) -> str:
    prefix = os.path.commonprefix(names).rstrip(".")
    return prefix or "mha"


def fuse_mha(g: GraphIR) -> GraphIR:
    """Replace every Q/K/V -> QK^T -> Softmax -> AV -> out-projection chain with FusedMHA."""
    g = g.copy()
    while True:
        prod, cons = g.producers(), g.consumers()
        match = None
        for n in g.nodes:
            if n.op == "Softmax":
                match = _match_mha(g, n, prod, cons)
                if match:
                    break
        if match is None:
            return g
        parts = [match[k] for k in ("q", "k", "v", "qk", "sm", "av", "proj")]
        name = _common_prefix([p.name for p in parts])
        taken = {n.name for n in g.nodes}
        if name in taken:
            name += ".mha"
        nq, nk, nv, nqk, nsm, nav, proj = parts
        bias = lambda n: n.inputs[2] if len(n.inputs) > 2 else ""
        quant = {"q": nq.attrs["quant"], "k": nk.attrs["quant"], "v": nv.attrs["quant"],
                 "s": nqk.attrs["quant"], "av": nav.attrs["quant"], "o": proj.attrs["quant"],
                 "accum": proj.attrs["accum_quant"]}
        attrs = {"heads": match["heads"], "quant": quant, "exp": nsm.attrs["exp"]}
        for key in ("layer", "engine"):
            if key in proj.attrs:
                attrs[key] = proj.attrs[key]
        fused = Node(name, "FusedMHA",
                     [match["x"], nq.inputs[1], nk.inputs[1], nv.inputs[1], proj.inputs[1],
                      bias(nq), bias(nk), bias(nv), bias(proj)],
                     list(proj.outputs), attrs)
        drop = {id(p) for p in parts}
        pos = g.nodes.index(proj)
        new_nodes = []
        for i, n in enumerate(g.nodes):
            if i == pos:
                new_nodes.append(fused)
            elif id(n) not in drop:
                new_nodes.append(n)
        g.nodes = new_nodes
        for p in parts[:-1]:
            g.tensors.pop(p.outputs[0], None)


def _view(g: GraphIR, parent: str, name: str, axis: int, start: int, stop: int) -> str:
    if not parent:
        return ""
    src = g.tensors[parent]
    if src.view is not None:
        v = src.view
        parent, start, stop = v["of"], int(v["start"]) + start, int(v["start"]) + stop
        if int(v["axis"]) != axis:
            raise ValueError(f"cannot slice view {src.name!r} along a different axis")
    shape = list(g.tensors[parent].shape)
    shape[axis] = stop - start
    if name not in g.tensors:
        g.tensors[name] = Tensor(name, tuple(shape), src.dtype, src.scale, "weight",
                                 {"of": parent, "axis": axis, "start": start, "stop": stop})
    return name


def head_partial_scale(g: GraphIR, n: Node) -> float:
    """Scale of one head's partial output projection."""
    qp = stage_quants(n)
    x, wv, wo = (g.tensors[t].scale for t in (n.inputs[0], n.inputs[3], n.inputs[4]))
    v_scale = x * wv / qp["v"].real_multiplier
    av_scale = A_SCALE * v_scale / qp["av"].real_multiplier
    return av_scale * wo / qp["o"].real_multiplier


def split_heads(g: GraphIR) -> GraphIR:
    """FusedMHA -> H AttentionHead nodes (sliced weights) + one HeadAccum."""
    g = g.copy()
    out_nodes = []
    for n in g.nodes:
        if n.op != "FusedMHA":
            out_nodes.append(n)
            continue
        H = int(n.attrs.get("heads", 1))
        ins = list(n.inputs) + [""] * (9 - len(n.inputs))
        x, wq, wk, wv, wo, bq, bk, bv, bo = ins
        S, E = g.tensors[x].shape
        P = g.tensors[wq].shape[1] // H
        quant = dict(n.attrs["quant"])
        accum = quant.pop("accum")
        part_scale = head_partial_scale(g, n)
        partials = []
        for h in range(H):
            lo, hi = h * P, (h + 1) * P
            hn = f"{n.name}.h{h}"
            inputs = [x,
                      _view(g, wq, f"{wq}.h{h}", 1, lo, hi),
                      _view(g, wk, f"{wk}.h{h}", 1, lo, hi),
                      _view(g, wv, f"{wv}.h{h}", 1, lo, hi),
                      _view(g, wo, f"{wo}.h{h}", 0, lo, hi),
                      _view(g, bq, f"{bq}.h{h}", 0, lo, hi),
                      _view(g, bk, f"{bk}.h{h}", 0, lo, hi),
                      _view(g, bv, f"{bv}.h{h}", 0, lo, hi),
                      bo if h == 0 else ""]
            y = f"{hn}.y"
            g.tensors[y] = Tensor(y, (S, E), "i8", part_scale, "act")
            attrs = {"head": h, "heads": 1, "quant": quant, "exp": n.attrs["exp"]}
            for key in ("layer", "engine"):
                if key in n.attrs:
                    attrs[key] = n.attrs[key]
            out_nodes.append(Node(hn, "AttentionHead", inputs, [y], attrs))
            partials.append(y)
        attrs = {"quant": accum}
        for key in ("layer",):
            if key in n.attrs:
                attrs[key] = n.attrs[key]
        out_nodes.append(Node(f"{n.name}.accum", "HeadAccum", partials, list(n.outputs), attrs))
    g.nodes = out_nodes
    return g


def ita_eligible(g: GraphIR, n: Node, cfg: ItaConfig = ItaConfig()) -> bool:
    def ok(*dims):
        return all(d > 0 and d % cfg.vec_len == 0 and d <= cfg.max_dim for d in dims)

    if n.op == "Gemm" and n.mode == "matmul" and not n.attrs.get("trans_b"):
        R, K = g.tensors[n.inputs[0]].shape
        C = g.tensors[n.inputs[1]].shape[1]
        return ok(R, K, C) and g.tensors[n.inputs[0]].dtype == "i8"
    if n.op == "AttentionHead":
        S, E = g.tensors[n.inputs[0]].shape
        P = g.tensors[n.inputs[1]].shape[1]
        return ok(S, E, P)
    return False


def map_engines(g: GraphIR, mapping: str = "ita", cfg: ItaConfig = ItaConfig()) -> GraphIR:
    """Tag every node with ``engine``: ita for eligible nodes under ``ita`` mapping."""
    if mapping not in ("ita", "cluster"):
        raise ValueError(f"unknown mapping {mapping!r}")
    g = g.copy()
    for n in g.nodes:
        n.attrs["engine"] = "ita" if mapping == "ita" and ita_eligible(g, n, cfg) else "cluster"
    return g


def lower(g: GraphIR, mapping: str = "ita", cfg: ItaConfig = ItaConfig()) -> GraphIR:
    """fuse_mha -> split_heads -> map_engines, validated."""
    out = map_engines(split_heads(fuse_mha(g)), mapping, cfg)
    out.validate()
    return out
