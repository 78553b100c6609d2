"""Acceptance criteria 1-9.  Each criterion prints one PASS/FAIL line; the
lines are repeated in the pytest terminal summary.  Also runnable as a script."""
import functools
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

from itasim.bench import bench_attention, bench_e2e, bench_gemm
from itasim.cli import main as cli_main
from itasim.mobilebert import ModelConfig, build_mobilebert, make_inputs
from itasim.timing import HwConfig, dma_demand, ita_tile_cycles, worst_case_tile_bytes

sys.path.insert(0, str(Path(__file__).parent))
import test_arbiter  # noqa: E402
import test_ita  # noqa: E402
import test_runtime  # noqa: E402
import test_tiling_memory  # noqa: E402

RESULTS = {}


def _within(x, target, rel):
    return abs(x - target) <= rel * target


@functools.lru_cache(maxsize=None)
def _e2e(mapping):
    return bench_e2e(ModelConfig(), mapping).report


def crit_1():
    r = bench_gemm((64, 64, 64)).report
    ok = ita_tile_cycles(1) == 256 and r.mac_cycles_busy == 256
    return ok, f"64x64x64 tile: {r.mac_cycles_busy} accelerator compute cycles (want 256)"


def crit_2():
    d = dma_demand(worst_case_tile_bytes(), 256)
    return d == 48.75, f"worst-case tile transfer demand {d} B/cycle (want 48.75)"


def crit_3():
    res = bench_gemm((512, 512, 512))
    r = res.report
    ok = (HwConfig().peak_gops == pytest.approx(870.4) and _within(r.gops, 718, 0.04)
          and 0.80 <= r.utilization <= 0.85 and res.bit_exact)
    return ok, (f"GEMM 512^3: {r.gops:.1f} GOp/s (718 +-4%), utilization {r.utilization:.2%} "
                f"([80%, 85%]), bit-exact {res.bit_exact}")


def crit_4():
    res = bench_attention(512, 512, 64)
    r = res.report
    ok = abs(r.utilization - 0.695) <= 0.05 and _within(r.gops, 620, 0.08) and res.bit_exact
    return ok, (f"attention S=E=512 P=64: {r.gops:.1f} GOp/s (620 +-8%), utilization "
                f"{r.utilization:.2%} (69.5% +-5 pp), bit-exact {res.bit_exact}")


def crit_5():
    ops = build_mobilebert(ModelConfig()).total_ops() / 1e9
    return _within(ops, 4.74, 0.15), f"MobileBERT op count {ops:.3f} GOp (4.74 +-15%)"


def crit_6():
    r = _e2e("ita")
    inf_s = 1 / r.time_s
    gop_j = r.ops_total / 1e9 / (r.energy_mj * 1e-3)
    ok = (_within(r.gops, 154, 0.15) and _within(inf_s, 32.5, 0.15)
          and _within(r.energy_mj, 1.60, 0.10) and _within(gop_j, 2960, 0.15))
    return ok, (f"end-to-end with accelerator: {r.gops:.1f} GOp/s (154 +-15%), {inf_s:.2f} inf/s "
                f"(32.5 +-15%), {r.energy_mj:.3f} mJ (1.60 +-10%), {gop_j:.0f} GOp/J (2960 +-15%)")


def crit_7():
    ita, cl = _e2e("ita"), _e2e("cluster")
    ratio = ita.gops / cl.gops
    ok = _within(cl.gops, 0.752, 0.15) and 150 <= ratio <= 260
    return ok, f"cluster-only {cl.gops:.4f} GOp/s (0.752 +-15%), speedup {ratio:.0f}x ([150, 260])"


def crit_8():
    g = build_mobilebert(ModelConfig(n_layers=2))
    two_layer = (g, make_inputs(g, 1))
    parts = {
        "a": [test_ita.test_gemm_matches_naive_oracle_200_cases],
        "b": [test_ita.test_itamax_chunk_invariance_500_rows],
        "c": [test_ita.test_softmax_vs_float],
        "d": [functools.partial(test_ita.test_gelu_sweep_within_two_lsb, a, b)
              for a, b in [(1 / 2048, 0.04), (1 / 256, 0.1), (1 / 4096, 0.0125)]],
        "e": [functools.partial(test_runtime.test_two_layer_cross_mapping_identical, two_layer)],
        "f": [test_tiling_memory.test_random_interval_sets_within_twice_lower_bound],
        "g": [functools.partial(test_arbiter.test_starvation_bound_exhaustive, n)
              for n in (1, 2, 3, 4)],
    }
    failed = []
    for key, fns in parts.items():
        for fn in fns:
            try:
                fn()
            except AssertionError:
                failed.append(key)
                break
    ok = not failed
    return ok, "functional suite (a)-(g): " + ("all hold" if ok else f"failed {failed}")


def crit_9():
    with tempfile.TemporaryDirectory() as d:
        paths = [Path(d) / f"run{i}.json" for i in (1, 2)]
        codes = []
        for p in paths:
            codes.append(cli_main(["bench", "e2e", "--report", str(p)]))
        a, b = (p.read_bytes() for p in paths)
    ok = codes == [0, 0] and a == b
    return ok, f"two `bench e2e` reports byte-identical: {a == b} ({len(a)} B, exit codes {codes})"


CRITERIA = {n: globals()[f"crit_{n}"] for n in range(1, 10)}


def evaluate(n):
    ok, detail = CRITERIA[n]()
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok


@pytest.mark.parametrize("n", list(CRITERIA))
def test_criterion(n, capsys):
    ok = evaluate(n)
    with capsys.disabled():
        print("\n" + RESULTS[n])
    assert ok, RESULTS[n]


if __name__ == "__main__":
    bad = [n for n in CRITERIA if not evaluate(n)]
    sys.exit(1 if bad else 0)
