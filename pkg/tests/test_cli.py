import json
import os
import subprocess
import sys

from itasim.cli import BEGIN_JSON, END_JSON, main


def _json(out: str) -> dict:
    body = out.split(BEGIN_JSON + "\n", 1)[1].split(END_JSON, 1)[0]
    return json.loads(body)


def test_print_config(capsys):
    assert main(["--print-config"]) == 0
    out = capsys.readouterr().out
    assert "clock_mhz = 425" in out and "ita_task_overhead" in out


def test_bench_gemm_report_and_figures(tmp_path, capsys):
    rep = tmp_path / "r.json"
    figs = tmp_path / "figs"
    code = main(["bench", "gemm", "--dims", "128x128x128", "--report", str(rep),
                 "--figures", str(figs)])
    out = capsys.readouterr().out
    assert code == 0
    d = _json(out)
    assert d["outputs"]["bit_exact_vs_reference"] is True
    assert d["summary"]["ops_total"] == 2 * 128 ** 3
    assert json.loads(rep.read_text()) == d
    assert sorted(p.name for p in figs.iterdir()) == ["gemm_ita_activity.png", "gemm_ita_layers.png"]
    assert "gops" in out.split(BEGIN_JSON)[0]


def test_compile_validate_run_roundtrip(tmp_path, capsys):
    g, w, x = tmp_path / "g.json", tmp_path / "w.bin", tmp_path / "x.bin"
    s, y = tmp_path / "s.json", tmp_path / "y.bin"
    assert main(["mobilebert", "--layers", "1", "--graph", str(g), "--weights", str(w),
                 "--inputs", str(x)]) == 0
    assert main(["compile", str(g), "--out", str(s)]) == 0
    assert main(["validate", str(s)]) == 0
    capsys.readouterr()
    assert main(["run", str(s), "--weights", str(w), "--inputs", str(x), "--outputs", str(y),
                 "--check"]) == 0
    d = _json(capsys.readouterr().out)
    assert d["outputs"]["bit_exact_vs_reference"] is True
    assert y.exists()


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 2
    assert main(["bench", "gemm", "--dims", "12x3"]) == 2
    assert main(["bench", "nope"]) == 2
    assert main(["validate", str(tmp_path / "missing.json")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["validate", str(bad)]) == 4
    g, w = tmp_path / "g.json", tmp_path / "w.bin"
    assert main(["mobilebert", "--layers", "1", "--graph", str(g), "--weights", str(w)]) == 0
    s = tmp_path / "s.json"
    assert main(["compile", str(g), "--out", str(s)]) == 0
    w.write_bytes(w.read_bytes()[:-100])
    assert main(["run", str(s), "--weights", str(w)]) == 5
    assert main(["bench", "gemm", "--dims", "64x64x64", "--config", str(tmp_path / "none.cfg")]) == 3
    err = capsys.readouterr().err
    assert "error:" in err


def test_compile_error_exit_code(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("l1_reserve_bytes = 131000\n")
    g = tmp_path / "g.json"
    assert main(["mobilebert", "--layers", "1", "--graph", str(g), "--weights",
                 str(tmp_path / "w.bin")]) == 0
    assert main(["compile", str(g), "--config", str(cfg)]) == 6


def test_entry_point_deterministic(tmp_path):
    env = dict(os.environ, MPLBACKEND="Agg")
    cmd = [sys.executable, "-m", "itasim.cli", "bench", "attention", "--S", "128", "--E", "128"]
    a = subprocess.run(cmd, capture_output=True, text=True, env=env, check=True).stdout
    b = subprocess.run(cmd, capture_output=True, text=True, env=env, check=True).stdout
    assert a == b and _json(a)["outputs"]["bit_exact_vs_reference"] is True
