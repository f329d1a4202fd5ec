import numpy as np
import pytest

from tinydeploy import model as M
from tinydeploy.fusion import fuse
from tinydeploy.interpreter import (
    Tensor,
    classify,
    conv2d_naive,
    flatten,
    linear_naive,
    maxpool2d_naive,
    relu,
    run_fused,
    run_fused_traced,
    run_naive,
)
from tinydeploy.planner import pingpong_plan

import oracles
from conftest import int8_fixture, random_input, random_store
from netgen import random_graph

F32 = M.ElementType.FP32


def t(array):
    return Tensor.from_array(np.asarray(array, dtype=np.float32), F32)


def bits(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32, copy=False).view(np.uint32)


# ---------------------------------------------------------------------------
# Single ops
# ---------------------------------------------------------------------------

def test_conv_scalar_case():
    out = conv2d_naive(t([[[3.0]]]), np.full((1, 1, 1, 1), 2.0, np.float32),
                       np.array([0.5], np.float32), 1, 0)
    assert out.data.reshape(-1).tolist() == [6.5]


def test_conv_sums_window():
    x = t([[[1.0, 2.0], [3.0, 4.0]]])
    out = conv2d_naive(x, np.ones((1, 1, 2, 2), np.float32), None, 1, 0)
    assert out.data.reshape(-1).tolist() == [10.0]


def test_conv_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 5, 5)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    ours = conv2d_naive(Tensor.from_array(x, F32), w, b, 1, 2)
    ref = oracles.conv2d_scalar(x, w, b, 1, 2)
    np.testing.assert_array_equal(bits(ours.data), bits(ref))


def test_conv_strided_padded_matches_oracle():
    rng = np.random.default_rng(4)
    for stride, padding, k in [(2, 1, 3), (3, 2, 4), (1, 0, 1)]:
        x = rng.standard_normal((2, 9, 7)).astype(np.float32)
        w = rng.standard_normal((3, 2, k, k)).astype(np.float32)
        ours = conv2d_naive(Tensor.from_array(x, F32), w, None, stride, padding)
        ref = oracles.conv2d_scalar(x, w, None, stride, padding)
        np.testing.assert_array_equal(bits(ours.data), bits(ref))


def test_maxpool_trivial_and_iota():
    assert maxpool2d_naive(t([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2, 0).data.tolist() == [[[4.0]]]
    iota = t(np.arange(16, dtype=np.float32).reshape(1, 4, 4))
    out = maxpool2d_naive(iota, 2, 2, 0)
    assert out.data.tolist() == [[[5.0, 7.0], [13.0, 15.0]]]
    ident = maxpool2d_naive(iota, 1, 1, 0)
    np.testing.assert_array_equal(ident.data, iota.data)


def test_maxpool_padded_matches_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 6, 6)).astype(np.float32)
    ours = maxpool2d_naive(Tensor.from_array(x, F32), 3, 2, 1)
    np.testing.assert_array_equal(ours.data, oracles.maxpool_scalar(x, 3, 2, 1))


def test_relu_linear_flatten():
    assert relu(t([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    out = linear_naive(t([1.0, 1.0]),
                       np.array([[1.0, 2.0], [3.0, 4.0]], np.float32),
                       np.zeros(2, np.float32))
    assert out.data.tolist() == [3.0, 7.0]
    flat = flatten(t([[[1.0, 2.0], [3.0, 4.0]]]))
    assert flat.shape == M.Flat(4)
    assert flat.data.tolist() == [1.0, 2.0, 3.0, 4.0]


def test_linear_matches_scalar_oracle():
    rng = np.random.default_rng(6)
    x = rng.standard_normal(37).astype(np.float32)
    w = rng.standard_normal((11, 37)).astype(np.float32)
    b = rng.standard_normal(11).astype(np.float32)
    ours = linear_naive(Tensor.from_array(x, F32), w, b)
    np.testing.assert_array_equal(bits(ours.data), bits(oracles.linear_scalar(x, w, b)))


def test_classify():
    assert classify(t([0.1, 0.9, 0.3])) == 1
    assert classify(t([0.5, 0.5, 0.5])) == 0
    shifted = t(np.array([0.1, 0.9, 0.3]) + 100.0)
    assert classify(shifted) == 1


# ---------------------------------------------------------------------------
# Whole-graph execution
# ---------------------------------------------------------------------------

def test_run_naive_zero_weights(lenet5):
    zero = M.WeightStore(F32, {
        idx: M.LayerWeights(weight=np.zeros(ws, np.float32),
                            bias=np.zeros(bs, np.float32))
        for idx, (ws, bs) in M.weight_layout(lenet5).items()})
    x = Tensor.from_array(np.ones((1, 32, 32), np.float32), F32)
    out = run_naive(lenet5, zero, x)
    assert out.data.tolist() == [0.0] * 10
    assert classify(out) == 0


def test_run_naive_single_relu_graph():
    graph = M.ModelGraph(M.Flat(4), F32, (M.Flatten(),))
    x = Tensor.from_array(np.array([-1.0, 2.0, -3.0, 4.0], np.float32), F32)
    out = run_naive(graph, M.WeightStore(F32, {}), x)
    assert out.data.tolist() == [-1.0, 2.0, -3.0, 4.0]


def test_fused_identity_pool_unit():
    graph = M.ModelGraph(M.Spatial(1, 2, 2), F32,
                         (M.Conv2d(1, 1, 1, has_bias=False), M.ReLU(),
                          M.MaxPool2d(2, 2)))
    store = M.WeightStore(F32, {0: M.LayerWeights(
        weight=np.ones((1, 1, 1, 1), np.float32))})
    x = t([[[0.3, -0.2], [0.9, 0.1]]])
    plan = fuse(graph)
    out = run_fused(plan, store, x, pingpong_plan(plan))
    assert out.data.reshape(-1).tolist() == [pytest.approx(0.9)]


def test_fused_equals_naive_lenet5(lenet5):
    rng = np.random.default_rng(11)
    store = random_store(lenet5, rng)
    x = random_input(lenet5, rng)
    naive = run_naive(lenet5, store, x)
    plan = fuse(lenet5)
    fused = run_fused(plan, store, x, pingpong_plan(plan))
    np.testing.assert_array_equal(bits(naive.data), bits(fused.data))


def test_fused_equals_naive_random_graphs():
    rng = np.random.default_rng(2024)
    for trial in range(30):
        graph = random_graph(rng)
        store = random_store(graph, rng)
        x = random_input(graph, rng)
        naive = run_naive(graph, store, x)
        plan = fuse(graph)
        fused = run_fused(plan, store, x, pingpong_plan(plan))
        assert naive.shape == fused.shape, f"trial {trial}"
        np.testing.assert_array_equal(bits(naive.data.reshape(-1)),
                                      bits(fused.data.reshape(-1)),
                                      err_msg=f"trial {trial}: {graph}")


def test_fused_equals_naive_int8_random_graphs():
    rng = np.random.default_rng(99)
    for trial in range(15):
        graph = random_graph(rng)
        int8_graph, qstore, params, x = int8_fixture(graph, rng)
        naive = run_naive(int8_graph, qstore, x, params.layer_output_scales)
        plan = fuse(int8_graph)
        fused = run_fused(plan, qstore, x, pingpong_plan(plan),
                          params.layer_output_scales)
        np.testing.assert_array_equal(naive.data.reshape(-1),
                                      fused.data.reshape(-1),
                                      err_msg=f"trial {trial}")


def test_wide_stride_pool_fuses_correctly():
    # stride 3 > kernel 2 is still legal: the fused path simply never
    # computes the convolution columns no window selects
    graph = M.ModelGraph(M.Spatial(1, 6, 6), F32,
                         (M.Conv2d(1, 2, 1), M.ReLU(), M.MaxPool2d(2, 3)))
    rng = np.random.default_rng(77)
    plan = fuse(graph)
    assert plan.units[0].pool is not None
    for _ in range(20):
        store = random_store(graph, rng)
        x = Tensor.from_array(
            rng.standard_normal((1, 6, 6)).astype(np.float32), F32)
        naive = run_naive(graph, store, x)
        fused = run_fused(plan, store, x, pingpong_plan(plan))
        np.testing.assert_array_equal(bits(naive.data), bits(fused.data))


def test_liveness_trace_lenet5(lenet5):
    rng = np.random.default_rng(12)
    store = random_store(lenet5, rng)
    x = random_input(lenet5, rng)
    plan = fuse(lenet5)
    buffers = pingpong_plan(plan)
    out, trace = run_fused_traced(plan, store, x, buffers)
    assert trace.high_water_bytes == buffers.total_bytes
    ref = run_fused(plan, store, x, buffers)
    np.testing.assert_array_equal(out.data, ref.data)


def test_run_fused_rejects_wrong_input(lenet5):
    rng = np.random.default_rng(13)
    store = random_store(lenet5, rng)
    plan = fuse(lenet5)
    bad = Tensor.from_array(np.zeros((1, 16, 16), np.float32), F32)
    with pytest.raises(M.ShapeError):
        run_fused(plan, store, bad, pingpong_plan(plan))
