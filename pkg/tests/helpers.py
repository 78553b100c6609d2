"""Small hand-built graphs shared by the compiler tests."""
import numpy as np

from itasim.graph import GraphIR
from itasim.ita import ExpParams
from itasim.quant import QuantParams


def q(m):
    return QuantParams.from_real(m).to_dict()


def add_mha(g: GraphIR, prefix: str, x: str, S: int, E: int, P: int, H: int, rng) -> str:
    """Unfused Q/K/V -> QK^T -> Softmax -> AV -> out-projection chain; returns its output."""
    HP = H * P
    w = lambda name, shape: g.add_tensor(name, shape, "i8", 1 / 64, "weight",
                                         rng.integers(-64, 64, size=shape))
    b = lambda name, n: g.add_tensor(name, (n,), "i24", 1 / 2048, "weight",
                                     rng.integers(-2000, 2000, size=n))
    proj = q(32 / (np.sqrt(E) * 32 * 37))
    for s in ("q", "k", "v"):
        w(f"{prefix}.w{s}", (E, HP))
        b(f"{prefix}.b{s}", HP)
        g.add_tensor(f"{prefix}.{s}", (S, HP), "i8", 1 / 32, "act")
        g.add_node(f"{prefix}.{s}_proj", "Gemm", [x, f"{prefix}.w{s}", f"{prefix}.b{s}"], [f"{prefix}.{s}"],
                   mode="matmul", quant=proj)
    g.add_tensor(f"{prefix}.s", (H, S, S), "i8", 0.05, "act")
    g.add_node(f"{prefix}.qk", "Gemm", [f"{prefix}.q", f"{prefix}.k"], [f"{prefix}.s"], mode="qk",
               heads=H, quant=q(24 / (np.sqrt(P) * 32 * 32)))
    g.add_tensor(f"{prefix}.a", (H, S, S), "u8", 1 / 255, "act")
    g.add_node(f"{prefix}.softmax", "Softmax", [f"{prefix}.s"], [f"{prefix}.a"],
               exp=ExpParams.from_input_scale(0.05).to_dict())
    g.add_tensor(f"{prefix}.av", (S, HP), "i8", 1 / 32, "act")
    g.add_node(f"{prefix}.av_mm", "Gemm", [f"{prefix}.a", f"{prefix}.v"], [f"{prefix}.av"], mode="av",
               heads=H, quant=q(1 / 8))
    w(f"{prefix}.wo", (HP, E))
    b(f"{prefix}.bo", E)
    g.add_tensor(f"{prefix}.y", (S, E), "i8", 1 / 32, "act")
    g.add_node(f"{prefix}.out", "Gemm", [f"{prefix}.av", f"{prefix}.wo", f"{prefix}.bo"], [f"{prefix}.y"],
               mode="head_proj", heads=H, quant=q(32 / (np.sqrt(P) * 32 * 37)), accum_quant=q(0.5))
    return f"{prefix}.y"


def two_mha_graph(S=64, E=64, P=64, H=2, seed=0) -> GraphIR:
    rng = np.random.default_rng(seed)
    g = GraphIR("two_mha")
    g.add_tensor("x0", (S, E), "i8", 1 / 32, "input")
    g.add_tensor("x1", (S, E), "i8", 1 / 32, "input")
    y0 = add_mha(g, "m0", "x0", S, E, P, H, rng)
    y1 = add_mha(g, "m1", "x1", S, E, P, H, rng)
    g.add_tensor("y", (S, E), "i8", 1 / 32, "act")
    g.add_node("sum", "Add", [y0, y1], ["y"], quant=q(0.5))
    g.outputs = ["y"]
    return g


def single_gemm_graph(R=64, K=64, C=64, seed=0) -> GraphIR:
    rng = np.random.default_rng(seed)
    g = GraphIR("gemm")
    g.add_tensor("x", (R, K), "i8", 1 / 32, "input")
    g.add_tensor("w", (K, C), "i8", 1 / 64, "weight", rng.integers(-64, 64, size=(K, C)))
    g.add_tensor("y", (R, C), "i8", 1 / 32, "act")
    g.add_node("mm", "Gemm", ["x", "w", ""], ["y"], mode="matmul", quant=q(1 / 300))
    g.outputs = ["y"]
    return g
