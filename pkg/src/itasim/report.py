"""Benchmark reports: JSON for machines, aligned text for people, PNG figures."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

from .bench import BenchResult
from .timing import CycleReport, EnergyConfig, HwConfig

REPORT_VERSION = "itasim-report/1"


def _num(v):
    # fixed precision keeps reports byte-stable across platforms
    if isinstance(v, float):
        return float(f"{v:.9g}")
    return v


def report_dict(res: BenchResult, hw: HwConfig, en: EnergyConfig) -> dict:
    rep = res.report
    layers = {str(k): {kk: _num(vv) for kk, vv in v.items()}
              for k, v in sorted(rep.per_layer.items())}
    return {
        "version": REPORT_VERSION,
        "scenario": res.scenario,
        "params": res.params,
        "config": {"hw": asdict(hw), "energy": asdict(en)},
        "peak_gops": _num(hw.peak_gops),
        "summary": {k: _num(v) for k, v in rep.summary().items()},
        "per_layer": layers,
        "schedule": {"loops": len(res.schedule.loops), "steps": len(res.schedule.steps),
                     "weights_bytes": res.schedule.weights_bytes,
                     "l2_activation_peak_bytes": res.schedule.memory.peak,
                     "l1_budget_bytes": res.schedule.l1_budget},
        "outputs": {"sha256": res.output_sha256, "bit_exact_vs_reference": res.bit_exact},
    }


def report_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, indent=2) + "\n"


SUMMARY_ROWS = [
    ("total_cycles", "cycles", "{:d}"),
    ("time_s", "s", "{:.6f}"),
    ("ops_total", "Op", "{:d}"),
    ("gops", "GOp/s", "{:.2f}"),
    ("utilization", "%", "{:.2%}"),
    ("inf_per_s", "inf/s", "{:.2f}"),
    ("energy_mj", "mJ", "{:.4f}"),
    ("gop_per_j", "GOp/J", "{:.1f}"),
    ("power_mw", "mW", "{:.2f}"),
    ("ita_compute_cycles", "cycles", "{:d}"),
    ("cluster_compute_cycles", "cycles", "{:d}"),
    ("dma_cycles", "cycles", "{:d}"),
    ("stall_cycles", "cycles", "{:d}"),
    ("bytes_moved", "B", "{:d}"),
]


def report_text(d: dict) -> str:
    lines = [f"scenario  {d['scenario']}  {json.dumps(d['params'], sort_keys=True)}"]
    s = d["summary"]
    width = max(len(k) for k, _, _ in SUMMARY_ROWS)
    for key, unit, fmt in SUMMARY_ROWS:
        val = fmt.format(s[key]).replace("%", "") if unit == "%" else fmt.format(s[key])
        lines.append(f"  {key:<{width}}  {val:>16}  {unit}")
    lines.append(f"  {'outputs_sha256':<{width}}  {d['outputs']['sha256']}")
    if d["outputs"]["bit_exact_vs_reference"] is not None:
        lines.append(f"  {'bit_exact':<{width}}  {d['outputs']['bit_exact_vs_reference']}")
    layers = [(k, v) for k, v in d["per_layer"].items() if k != "-1"]
    if len(layers) > 1:
        lines.append("")
        lines.append(f"  {'layer':>5}  {'cycles':>10}  {'ita':>10}  {'cluster':>10}  {'stall':>8}")
        for k, v in sorted(layers, key=lambda kv: int(kv[0])):
            lines.append(f"  {k:>5}  {v['cycles']:>10d}  {v['ita']:>10d}  {v['cluster']:>10d}  "
                         f"{v['stall']:>8d}")
    return "\n".join(lines) + "\n"


def render_figures(res: BenchResult, outdir, prefix: Optional[str] = None) -> List[Path]:
    """Per-layer cycle breakdown and cumulative engine activity; returns the files written."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    prefix = prefix or f"{res.scenario}_{res.params.get('mapping', '')}".rstrip("_")
    rep: CycleReport = res.report
    paths = []

    rows = sorted(rep.per_layer.items())
    labels = [str(k) if k >= 0 else "io" for k, _ in rows]
    ita = [v["ita"] for _, v in rows]
    cl = [v["cluster"] for _, v in rows]
    other = [v["cycles"] - min(v["cycles"], v["ita"] + v["cluster"]) for _, v in rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.3 * len(rows) + 2), 3.2))
    x = range(len(rows))
    ax.bar(x, ita, label="accelerator", color="#3b6ea5")
    ax.bar(x, cl, bottom=ita, label="cluster", color="#d98c3f")
    ax.bar(x, other, bottom=[a + b for a, b in zip(ita, cl)], label="DMA stall / non-overlap",
           color="#9a9a9a")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, fontsize=6)
    ax.set_xlabel("layer")
    ax.set_ylabel("cycles")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    p = outdir / f"{prefix}_layers.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    if rep.steps:
        t, busy_ita, busy_cl = [0], [0], [0]
        for st in rep.steps:
            t.append(t[-1] + st.cycles)
            busy_ita.append(busy_ita[-1] + (st.compute if st.engine == "ita" else 0))
            busy_cl.append(busy_cl[-1] + (st.compute if st.engine == "cluster" else 0))
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(t, busy_ita, label="accelerator busy", color="#3b6ea5")
        ax.plot(t, busy_cl, label="cluster busy", color="#d98c3f")
        ax.plot(t, t, ":", color="#555555", lw=0.8, label="elapsed")
        ax.set_xlabel("elapsed cycles")
        ax.set_ylabel("cumulative busy cycles")
        ax.legend(fontsize=7, frameon=False)
        fig.tight_layout()
        p = outdir / f"{prefix}_activity.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)
    return paths
