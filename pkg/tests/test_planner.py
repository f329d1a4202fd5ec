import itertools

import numpy as np
import pytest

from tinydeploy import model as M
from tinydeploy.fusion import fuse
from tinydeploy.planner import (
    BufferPlan,
    PlanError,
    fused_footprint,
    memory_report,
    naive_footprint,
    pingpong_plan,
    plan_tensor_sizes,
    unit_tensor_map,
)


def brute_force_two_buffer_min(sizes):
    """Minimum total over every two-buffer labeling that never puts adjacent
    tensors in the same buffer.  Independent of the planner's construction."""
    n = len(sizes)
    best = None
    for labels in itertools.product("AB", repeat=n):
        if any(labels[i] == labels[i + 1] for i in range(n - 1)):
            continue
        cap_a = max((s for s, l in zip(sizes, labels) if l == "A"), default=0)
        cap_b = max((s for s, l in zip(sizes, labels) if l == "B"), default=0)
        total = cap_a + cap_b
        if best is None or total < best:
            best = total
    return best


def top_two_sum(sizes):
    ordered = sorted(sizes, reverse=True)
    return ordered[0] + (ordered[1] if len(ordered) > 1 else 0)


def test_naive_footprint_lenet5(lenet5):
    assert naive_footprint(lenet5) == 36472


def test_naive_footprint_single_linear():
    graph = M.ModelGraph(M.Flat(4), M.ElementType.FP32, (M.Linear(4, 2),))
    assert naive_footprint(graph) == 24


def test_naive_footprint_testnet(testnet):
    # Enumerated from infer_shapes with ReLU/Flatten contributing 0 bytes:
    # 3072 + 32768 + 8192 + 4096 + 1024 + 2048 + 512 + 10.
    shapes = M.infer_shapes(testnet)
    expected = shapes[0].element_count
    for layer, shape in zip(testnet.layers, shapes[1:]):
        if isinstance(layer, (M.ReLU, M.Flatten)):
            continue
        expected += shape.element_count
    assert expected == 51722
    assert naive_footprint(testnet) == expected


def test_fused_footprint_lenet5(lenet5):
    assert fused_footprint(fuse(lenet5)) == 11256


def test_fused_footprint_no_pool_equals_naive():
    graph = M.ModelGraph(M.Spatial(1, 8, 8), M.ElementType.FP32,
                         (M.Conv2d(1, 2, 3), M.ReLU(), M.MaxPool2d(3, 2)))
    assert fused_footprint(fuse(graph)) == naive_footprint(graph)


def test_pingpong_lenet5(lenet5):
    plan = pingpong_plan(fuse(lenet5))
    assert plan.tensor_sizes == (4096, 4704, 1600, 480, 336, 40)
    assert plan.buffer_a_bytes == 4096
    assert plan.buffer_b_bytes == 4704
    assert plan.total_bytes == 8800


def test_pingpong_testnet(testnet):
    plan = pingpong_plan(fuse(testnet))
    assert plan.tensor_sizes == (3072, 8192, 1024, 512, 10)
    assert plan.buffer_a_bytes == 3072
    assert plan.buffer_b_bytes == 8192
    assert plan.total_bytes == 11264


def test_pingpong_single_unit():
    graph = M.ModelGraph(M.Flat(25), M.ElementType.FP32, (M.Linear(25, 15),))
    plan = pingpong_plan(fuse(graph))
    assert plan.buffer_a_bytes == 100
    assert plan.buffer_b_bytes == 60
    assert plan.total_bytes == 160


def test_pingpong_alternation_and_liveness(lenet5):
    graph_plan = fuse(lenet5)
    plan = pingpong_plan(graph_plan)
    for first, second in zip(plan.assignments, plan.assignments[1:]):
        assert first.buffer != second.buffer
    for a in plan.assignments:
        assert a.offset == 0
        cap = plan.buffer_a_bytes if a.buffer == "A" else plan.buffer_b_bytes
        assert a.size_bytes <= cap
    # Every unit reads and writes different buffers (flatten aliases).
    mapping = unit_tensor_map(graph_plan)
    for in_idx, out_idx in mapping:
        if in_idx != out_idx:
            assert plan.assignments[in_idx].buffer != plan.assignments[out_idx].buffer


def test_pingpong_example_beats_top_two_bound():
    sizes = [10, 100, 5, 90]
    assert brute_force_two_buffer_min(sizes) == 110
    assert top_two_sum(sizes) == 190


def test_pingpong_matches_brute_force_random():
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        sizes = [int(rng.integers(1, 1000)) for _ in range(n)]
        cap_a = max(sizes[0::2], default=0)
        cap_b = max(sizes[1::2], default=0)
        assert cap_a + cap_b == brute_force_two_buffer_min(sizes)
        assert cap_a + cap_b <= top_two_sum(sizes)


def test_memory_report_lenet5(lenet5):
    report = memory_report(lenet5)
    assert report.parameter_bytes == 246824
    assert report.naive_buffer_bytes == 36472
    assert report.fused_buffer_bytes == 11256
    assert report.pingpong_bytes == 8800
    assert report.savings_fused_pct == 69
    assert report.savings_pingpong_vs_fused_pct == 22
    assert report.savings_total_pct == 76


def test_memory_report_monotone_chain(lenet5, testnet):
    for graph in (lenet5, testnet):
        report = memory_report(graph)
        assert report.pingpong_bytes <= report.fused_buffer_bytes
        assert report.fused_buffer_bytes <= report.naive_buffer_bytes


def test_memory_report_flatten_only():
    # A graph with no buffer-producing layers: all footprints collapse to the
    # input, and the single tensor leaves buffer B empty.
    graph = M.ModelGraph(M.Spatial(2, 3, 3), M.ElementType.FP32, (M.Flatten(),))
    report = memory_report(graph)
    input_bytes = 2 * 3 * 3 * 4
    assert report.naive_buffer_bytes == input_bytes
    assert report.fused_buffer_bytes == input_bytes
    assert report.pingpong_bytes == input_bytes
    plan = pingpong_plan(fuse(graph))
    assert plan.buffer_b_bytes == 0


def test_pingpong_requires_units(lenet5):
    plan = fuse(lenet5)
    empty = type(plan)(plan.input_shape, plan.element_type, (), ())
    with pytest.raises(PlanError):
        pingpong_plan(empty)


def test_plan_tensor_sizes_skip_flatten(lenet5):
    sizes = plan_tensor_sizes(fuse(lenet5))
    assert len(sizes) == 6  # input + 5 non-flatten unit outputs
