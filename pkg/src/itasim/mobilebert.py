"""Synthetic 8-bit MobileBERT encoder stack.

Per layer (29 nodes before fusion)::

    bottleneck-in   Gemm  [S, d_hidden] -> [S, E]
    attention       Gemm q/k/v [S, E] -> [S, H*P], Gemm(qk) -> [H, S, S],
                    Softmax, Gemm(av) -> [S, H*P], Gemm(head_proj) -> [S, E]
                    Add (bottleneck output), Affine
    4 x FFN         Gemm+GeLU [S, E] -> [S, d_ff], Gemm -> [S, E], Add, Affine
    bottleneck-out  Gemm [S, E] -> [S, d_hidden], Add (layer input), Affine

Embedding lookup and the classifier head are not part of the stack.  Weights
are seeded uniform integers in [-64, 63]; every requantizer is sized so that
activations keep roughly 32 LSB of standard deviation on a seeded calibration
input.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from scipy.special import erf

from .graph import GraphIR
from .ita import ExpParams, GeluParams
from .quant import QuantParams
from .reference import run_node

W_LO, W_HI = -64, 64
W_STD = 37.0          # std of the uniform weight distribution
ACT_SCALE = 1.0 / 32
ACT_STD = 32.0
S_STD = 24.0                # attention logits
MAX_SOFTMAX_SCALE = 0.08    # keeps the exponent spread inside the denominator guard
GELU_MIN_SCALE = 0.0125
GELU_IN_STD = 1.5     # output LSB needed for the 2-LSB GeLU bound


@dataclass(frozen=True)
class ModelConfig:
    S: int = 128
    E: int = 128
    P: int = 64
    H: int = 4
    n_layers: int = 24
    d_ff: int = 512
    d_hidden: int = 512
    n_ffn: int = 4
    seed: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "seed" and v <= 0:
                raise ValueError(f"ModelConfig.{k} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)



def nodes_per_layer(cfg: ModelConfig) -> int:
    return 10 + 4 * cfg.n_ffn + 3


class _Builder:
    """Adds nodes and calibrates each requantizer on a seeded calibration input.

    Every multiplier is chosen from the observed accumulator spread so that
    the output keeps about ``ACT_STD`` LSB of standard deviation, as a
    post-training quantization flow would.
    """

    def __init__(self, cfg: ModelConfig, name: str):
        self.cfg = cfg
        self.g = GraphIR(name)
        self.rng = np.random.default_rng(cfg.seed)
        self.env: Dict[str, np.ndarray] = {}

    def weight(self, name, shape, scale):
        data = self.rng.integers(W_LO, W_HI, size=shape)
        self.g.add_tensor(name, shape, "i8", scale, "weight", data)
        self.env[name] = data
        return name

    def bias(self, name, n, std, dtype="i24", scale=1.0, center=None):
        """Random bias; ``center`` (the calibration accumulator) also removes its
        per-channel mean, keeping token-to-token variation from collapsing."""
        lim = max(1, int(std))
        data = self.rng.integers(-lim, lim + 1, size=n)
        if center is not None:
            data = data - np.rint(np.asarray(center).reshape(-1, n).mean(axis=0)).astype(np.int64)
        self.g.add_tensor(name, (n,), dtype, scale, "weight", data)
        self.env[name] = data
        return name

    def act(self, name, shape, scale=ACT_SCALE, dtype="i8"):
        self.g.add_tensor(name, shape, dtype, scale, "act")
        return name

    def scale(self, t):
        return self.g.tensors[t].scale

    def emit(self, node):
        self.env[node.outputs[0]] = np.asarray(run_node(self.g, node, self.env), dtype=np.int64)
        return node.outputs[0]

    @staticmethod
    def _m(acc, target=ACT_STD):
        return target / max(float(np.std(acc)), 1.0)

    def linear(self, name, x, k, c, layer, act="identity", bias=True):
        S = self.g.tensors[x].shape[0]
        w = self.weight(f"{name}.w", (k, c), 1.0 / (W_STD * math.sqrt(k)))
        acc = self.env[x] @ self.env[w]
        if act == "gelu":
            # weight scale puts the pre-activation at GELU_IN_STD real units
            self.g.tensors[w].scale = GELU_IN_STD / max(float(np.std(acc)), 1.0) / self.scale(x)
        acc_scale = self.scale(x) * self.scale(w)
        b = ""
        if bias:
            b = self.bias(f"{name}.b", c, np.std(acc) / 64, scale=acc_scale, center=acc)
            acc = acc + self.env[b]
        attrs = {"mode": "matmul", "layer": layer, "act": {"kind": act}}
        if act == "gelu":
            real = acc * acc_scale
            gelu_std = float(np.std(real * 0.5 * (1 + erf(real / math.sqrt(2)))))
            out_scale = float(np.clip(gelu_std / ACT_STD, GELU_MIN_SCALE, 0.1))
            m = acc_scale / out_scale
            attrs["act"]["gelu"] = GeluParams.from_scales(acc_scale, out_scale).to_dict()
        else:
            m = self._m(acc)
            out_scale = acc_scale / m
        attrs["quant"] = QuantParams.from_real(m).to_dict()
        y = self.act(f"{name}.y", (S, c), acc_scale / QuantParams.from_dict(attrs["quant"]).real_multiplier
                     if act != "gelu" else out_scale)
        return self.emit(self.g.add_node(name, "Gemm", [x, w, b] if b else [x, w], [y], **attrs))

    def add(self, name, a, b, layer):
        sa, sb = self.scale(a), self.scale(b)
        hi = max(sa, sb)
        if math.isclose(sa, sb, rel_tol=1e-12):
            mul_a = mul_b = 1
            unit = sa
        else:
            # align to the coarser scale with 8 fractional bits
            mul_a, mul_b = max(1, round(256 * sa / hi)), max(1, round(256 * sb / hi))
            unit = hi / 256
        acc = mul_a * self.env[a] + mul_b * self.env[b]
        p = QuantParams.from_real(self._m(acc))
        y = self.act(f"{name}.y", self.g.tensors[a].shape, unit / p.real_multiplier)
        return self.emit(self.g.add_node(name, "Add", [a, b], [y], layer=layer, mul_a=mul_a,
                                         mul_b=mul_b, quant=p.to_dict()))

    def affine(self, name, x, layer):
        c = self.g.tensors[x].shape[-1]
        g_scale = 1.0 / 64
        gamma = f"{name}.gamma"
        gdata = self.rng.integers(48, 81, size=c)
        self.g.add_tensor(gamma, (c,), "i8", g_scale, "weight", gdata)
        self.env[gamma] = gdata
        acc = self.env[x] * gdata
        beta = self.bias(f"{name}.beta", c, np.std(acc) / 64, dtype="i32",
                         scale=self.scale(x) * g_scale, center=acc)
        acc = acc + self.env[beta]
        p = QuantParams.from_real(self._m(acc))
        y = self.act(f"{name}.y", self.g.tensors[x].shape, self.scale(x) * g_scale / p.real_multiplier)
        return self.emit(self.g.add_node(name, "Affine", [x, gamma, beta], [y], layer=layer,
                                         quant=p.to_dict()))

    def mha(self, name, x, layer):
        cfg = self.cfg
        S, E = self.g.tensors[x].shape
        H, P = cfg.H, cfg.P
        q = self.linear(f"{name}.q", x, E, H * P, layer)
        k = self.linear(f"{name}.k", x, E, H * P, layer)
        v = self.linear(f"{name}.v", x, E, H * P, layer)
        sl = [slice(h * P, (h + 1) * P) for h in range(H)]
        acc = np.stack([self.env[q][:, s] @ self.env[k][:, s].T for s in sl])
        p_s = QuantParams.from_real(self._m(acc, S_STD))
        # S carries the 1/sqrt(P) attention temperature in its scale
        s_scale = self.scale(q) * self.scale(k) / math.sqrt(P) / p_s.real_multiplier
        s_scale = min(s_scale, MAX_SOFTMAX_SCALE)
        s = self.act(f"{name}.qk.y", (H, S, S), s_scale)
        self.emit(self.g.add_node(f"{name}.qk", "Gemm", [q, k], [s], mode="qk", heads=H,
                                  layer=layer, quant=p_s.to_dict()))
        a = self.act(f"{name}.softmax.y", (H, S, S), 1.0 / 255, "u8")
        self.emit(self.g.add_node(f"{name}.softmax", "Softmax", [s], [a], layer=layer,
                                  exp=ExpParams.from_input_scale(s_scale).to_dict()))
        acc = np.concatenate([self.env[a][h] @ self.env[v][:, s] for h, s in enumerate(sl)], axis=1)
        p_av = QuantParams.from_real(self._m(acc))
        av = self.act(f"{name}.av.y", (S, H * P), (1.0 / 255) * self.scale(v) / p_av.real_multiplier)
        self.emit(self.g.add_node(f"{name}.av", "Gemm", [a, v], [av], mode="av", heads=H,
                                  layer=layer, quant=p_av.to_dict()))
        s_wo = 1.0 / (W_STD * math.sqrt(P))
        wo = self.weight(f"{name}.o.w", (H * P, E), s_wo)
        parts = [self.env[av][:, s] @ self.env[wo][s, :] for s in sl]
        acc_scale = self.scale(av) * s_wo
        bo = self.bias(f"{name}.o.b", E, np.std(parts[0]) / 64, scale=acc_scale,
                       center=sum(parts))
        p_o = QuantParams.from_real(self._m(np.stack(parts)))
        part_scale = acc_scale / p_o.real_multiplier
        p_acc = QuantParams.from_real(1.0 / 2)
        y = self.act(f"{name}.o.y", (S, E), part_scale / p_acc.real_multiplier)
        return self.emit(self.g.add_node(
            f"{name}.o", "Gemm", [av, wo, bo], [y], mode="head_proj", heads=H, layer=layer,
            quant=p_o.to_dict(), accum_quant=p_acc.to_dict()))


def build_mobilebert(cfg: ModelConfig = ModelConfig()) -> GraphIR:
    """Pre-fusion MobileBERT encoder graph with seeded synthetic weights."""
    b = _Builder(cfg, f"mobilebert-L{cfg.n_layers}")
    x = b.g.add_tensor("input", (cfg.S, cfg.d_hidden), "i8", ACT_SCALE, "input").name
    b.env.update(make_inputs(b.g, cfg.seed + 1))
    for li in range(cfg.n_layers):
        p = f"l{li}"
        h = b.linear(f"{p}.bin", x, cfg.d_hidden, cfg.E, li)
        a = b.mha(f"{p}.attn", h, li)
        h = b.affine(f"{p}.attn.norm", b.add(f"{p}.attn.add", a, h, li), li)
        for fi in range(cfg.n_ffn):
            f = f"{p}.ffn{fi}"
            u = b.linear(f"{f}.fc1", h, cfg.E, cfg.d_ff, li, act="gelu")
            u = b.linear(f"{f}.fc2", u, cfg.d_ff, cfg.E, li)
            h = b.affine(f"{f}.norm", b.add(f"{f}.add", u, h, li), li)
        o = b.linear(f"{p}.bout", h, cfg.E, cfg.d_hidden, li)
        x = b.affine(f"{p}.out.norm", b.add(f"{p}.out.add", o, x, li), li)
    b.g.outputs = [x]
    b.g.validate()
    return b.g


def make_inputs(g: GraphIR, seed: int = 1) -> Dict[str, np.ndarray]:
    """Seeded int8 activations with ~32 LSB standard deviation."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in g.inputs:
        shape = g.tensors[name].shape
        out[name] = np.clip(np.rint(rng.normal(0, ACT_STD, size=shape)), -128, 127).astype(np.int64)
    return out
