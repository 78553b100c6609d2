import json

import pytest

from itasim.bench import attention_graph, gemm_graph
from itasim.passes import lower
from itasim.schedule import (ScheduleError, compile_schedule, parse_schedule,
                             validate_schedule)
from itasim.timing import HwConfig

HW = HwConfig()


def _sched(g, mapping="ita"):
    s = compile_schedule(lower(g, mapping, HW.ita), HW)
    validate_schedule(s, HW)
    return s


@pytest.fixture(scope="module")
def gemm256():
    return _sched(gemm_graph(256, 128, 64))


def test_single_tile_three_steps():
    s = _sched(gemm_graph(64, 64, 64))
    assert len(s.loops) == 1 and len(s.steps) == 3
    a, b, c = s.steps
    assert a.dma_in and a.compute is None and not a.dma_out
    assert b.compute is not None and not b.dma_in and not b.dma_out
    assert c.compute is None and c.dma_out and not c.dma_in


def test_prefetch_pipeline(gemm256):
    s = gemm256
    loop = s.loops[0]
    tiles = [st for st in s.steps if st.compute]
    assert len(tiles) == 4 and len(s.steps) == 6
    for i, st in enumerate(s.steps[1:-1]):
        # compute on tile i while tile i+1 arrives in the other half
        assert st.compute["tile"] == i
        assert st.phase == i % 2
        if i + 1 < len(tiles):
            assert {t.l1 for t in st.dma_in} <= {offs[(i + 1) % 2] for offs in loop.l1.values()}
        if i > 0:
            assert len(st.dma_out) == 1
    assert [st.preprogram for st in s.steps if st.compute] == [[0, 1], [0, 2], [0, 3], None]


def test_attention_schedule_valid():
    s = _sched(attention_graph(128, 128, 64))
    kinds = [l.kind for l in s.loops]
    assert kinds.count("gemm") >= 5
    assert all(l.engine == "ita" for l in s.loops if l.kind == "gemm")
    s = _sched(attention_graph(128, 128, 64), "cluster")
    assert "softmax" in [l.kind for l in s.loops]


def test_two_layer_schedule_valid(two_layer):
    g, _ = two_layer
    for mapping in ("ita", "cluster"):
        s = _sched(g, mapping)
        assert s.memory.peak > 0 and s.weights_bytes > 0


def test_json_deterministic_and_roundtrip(gemm256):
    text = gemm256.to_json()
    again = _sched(gemm_graph(256, 128, 64)).to_json()
    assert text == again
    back = parse_schedule(text)
    assert back.to_json() == text
    validate_schedule(back, HW)


def _corrupt(s, fn):
    d = json.loads(s.to_json())
    fn(d)
    bad = parse_schedule(json.dumps(d))
    with pytest.raises(ScheduleError):
        validate_schedule(bad, HW)


def test_validator_catches_dropped_prefetch(gemm256):
    _corrupt(gemm256, lambda d: d["steps"][2].update(dma_in=[]))


def test_validator_catches_phase_swap(gemm256):
    def swap(d):
        for role, op in d["steps"][2]["compute"]["ins"].items():
            offs = d["loops"][0]["l1"][role]
            op["l1"] = offs[0] if op["l1"] == offs[1] else offs[1]
    _corrupt(gemm256, swap)


def test_validator_catches_bad_preprogram(gemm256):
    _corrupt(gemm256, lambda d: d["steps"][1].update(preprogram=[0, 3]))


def test_validator_catches_dropped_writeback(gemm256):
    _corrupt(gemm256, lambda d: d["steps"][-1].update(dma_out=[]))


def test_validator_catches_l2_overlap(two_layer):
    g, _ = two_layer
    s = _sched(g)
    d = json.loads(s.to_json())
    pl = d["memory"]["tensors"]
    acts = [k for k in pl if k not in g.weights]
    a, b = next((a, b) for a in acts for b in acts if a < b
                and pl[a]["interval"][0] <= pl[b]["interval"][1]
                and pl[b]["interval"][0] <= pl[a]["interval"][1])
    pl[b]["offset"] = pl[a]["offset"]
    bad = parse_schedule(json.dumps(d))
    with pytest.raises(ScheduleError):
        validate_schedule(bad, HW)


def test_validator_catches_l1_overflow(gemm256):
    _corrupt(gemm256, lambda d: d.update(l1_budget=4096))


def test_malformed_schedule_json():
    with pytest.raises(ScheduleError):
        parse_schedule("{not json")
    with pytest.raises(ScheduleError):
        parse_schedule(json.dumps({"version": "other/9"}))
