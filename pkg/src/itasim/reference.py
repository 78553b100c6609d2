"""Direct whole-tensor execution of a graph with the cluster kernels.

This is the value oracle for every compiler pass: whatever fusion, head
splitting, tiling and scheduling do, the outputs must match this executor
bit for bit.
"""
from __future__ import annotations

from typing import Dict, Mapping, Optional

import numpy as np

from .graph import GraphIR, Node, act_attr, exp_attr, quant_attr, stage_quants, topo_order
from .ita import A_SCALE, AttentionHeadTask, GeluParams, softmax_rows
from .kernels import (add_residual, cluster_attention_head, cluster_gemm, cluster_gelu,
                      cluster_relu, cluster_requant, elementwise_affine, head_accumulate)
from .quant import QTensor


class MissingTensor(KeyError):
    pass


def _qt(g: GraphIR, env: Mapping[str, np.ndarray], name: str) -> QTensor:
    t = g.tensors[name]
    return QTensor(env[name], t.scale, signed=t.dtype != "u8")


def _opt(env, name):
    return env[name] if name else None


def head_slices(hp: int, heads: int):
    p = hp // heads
    return [slice(h * p, (h + 1) * p) for h in range(heads)]


def attention_task(g: GraphIR, n: Node, env, h_slice=None, with_bias_o=True) -> AttentionHeadTask:
    """Build an AttentionHeadTask from a FusedMHA (sliced by ``h_slice``) or AttentionHead node."""
    ins = list(n.inputs) + [""] * (9 - len(n.inputs))
    x = _qt(g, env, ins[0])
    sl = h_slice if h_slice is not None else slice(None)

    def w(i, cols=True):
        t = g.tensors[ins[i]]
        d = env[ins[i]]
        return QTensor(d[:, sl] if cols else d[sl, :], t.scale)

    def b(i):
        return None if not ins[i] else np.asarray(env[ins[i]])[sl]

    qp = stage_quants(n)
    return AttentionHeadTask(
        x, w(1), w(2), w(3), w(4, cols=False), b(5), b(6), b(7),
        np.asarray(env[ins[8]]) if ins[8] and with_bias_o else None,
        {k: qp[k] for k in ("q", "k", "v", "s", "av", "o")}, exp_attr(n))


def run_node(g: GraphIR, n: Node, env: Dict[str, np.ndarray]) -> np.ndarray:
    op = n.op
    ins = n.inputs
    if op == "Gemm":
        x = _qt(g, env, ins[0])
        w = _qt(g, env, ins[1])
        bias = _opt(env, ins[2]) if len(ins) > 2 else None
        p = quant_attr(n)
        mode = n.mode
        if mode == "matmul":
            return cluster_gemm(x, w, bias, p, act_attr(n), bool(n.attrs.get("trans_b"))).data
        H = int(n.attrs.get("heads", 1))
        if mode == "qk":
            sls = head_slices(x.shape[1], H)
            return np.stack([cluster_gemm(QTensor(x.data[:, s], x.scale), QTensor(w.data[:, s], w.scale),
                                          None, p, trans_b=True).data for s in sls])
        if mode == "av":
            sls = head_slices(w.shape[1], H)
            return np.concatenate([cluster_gemm(QTensor(x.data[h], x.scale, signed=False),
                                                QTensor(w.data[:, s], w.scale), None, p).data
                                   for h, s in enumerate(sls)], axis=1)
        sls = head_slices(x.shape[1], H)
        parts = [cluster_gemm(QTensor(x.data[:, s], x.scale), QTensor(w.data[s, :], w.scale),
                              bias if h == 0 else None, p) for h, s in enumerate(sls)]
        return head_accumulate(parts, quant_attr(n, "accum_quant")).data
    if op == "Softmax":
        return softmax_rows(env[ins[0]], exp_attr(n))
    if op == "Add":
        return add_residual(_qt(g, env, ins[0]), _qt(g, env, ins[1]), quant_attr(n),
                            int(n.attrs.get("mul_a", 1)), int(n.attrs.get("mul_b", 1))).data
    if op == "Affine":
        return elementwise_affine(_qt(g, env, ins[0]), env[ins[1]], env[ins[2]], quant_attr(n)).data
    if op == "GeLU":
        return cluster_gelu(_qt(g, env, ins[0]), GeluParams.from_dict(n.attrs["gelu"])).data
    if op == "ReLU":
        return cluster_relu(_qt(g, env, ins[0])).data
    if op == "Requant":
        return cluster_requant(_qt(g, env, ins[0]), quant_attr(n)).data
    if op == "FusedMHA":
        H = int(n.attrs.get("heads", 1))
        sls = head_slices(g.tensors[ins[1]].shape[1], H)
        parts = [cluster_attention_head(attention_task(g, n, env, s, with_bias_o=(h == 0)))
                 for h, s in enumerate(sls)]
        return head_accumulate(parts, stage_quants(n)["accum"]).data
    if op == "AttentionHead":
        return cluster_attention_head(attention_task(g, n, env)).data
    if op == "HeadAccum":
        return head_accumulate([_qt(g, env, t) for t in ins], quant_attr(n)).data
    raise ValueError(f"unsupported op {op}")


def execute_graph(g: GraphIR, feeds: Mapping[str, np.ndarray], keep_all: bool = False,
                  weights: Optional[Mapping[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """Run every node in topological order; returns graph outputs (or all tensors).

    ``weights`` overrides the values carried by the graph (for graphs parsed
    from JSON, which carry none).
    """
    if weights is not None:
        g = g.copy()
        g.weights = dict(weights)
    missing = [k for k, t in g.tensors.items()
               if t.kind == "weight" and (t.view or {}).get("of", k) not in g.weights]
    if missing:
        raise MissingTensor(f"no value for weight(s) {missing[:3]}")
    env: Dict[str, np.ndarray] = {
        k: np.asarray(g.value(k), dtype=np.int64) for k, t in g.tensors.items() if t.kind == "weight"}
    for name in g.inputs:
        if name not in feeds:
            raise MissingTensor(f"no value for graph input {name!r}")
        env[name] = np.asarray(feeds[name], dtype=np.int64)
    for n in topo_order(g):
        for t in n.inputs:
            if t and t not in env:
                raise MissingTensor(f"node {n.name!r}: no value for {t!r}")
        env[n.outputs[0]] = np.asarray(run_node(g, n, env), dtype=np.int64)
    if keep_all:
        return env
    return {k: env[k] for k in g.outputs}
