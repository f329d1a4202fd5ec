"""Demonstrate that fusion is a pure reordering, not an approximation.

The fused engine computes each convolution result at the moment the pooling
window needs it and keeps only the running maximum.  Because the per-element
accumulation order is pinned (input channel, kernel row, kernel column),
the fused path reproduces the layer-by-layer reference bit for bit in FP32.
"""

import numpy as np

from tinydeploy import (
    Conv2d,
    ElementType,
    Flatten,
    Linear,
    MaxPool2d,
    ModelGraph,
    ReLU,
    Spatial,
    Tensor,
    fuse,
    pingpong_plan,
    run_fused,
    run_naive,
)
from tinydeploy.model import LayerWeights, WeightStore, weight_layout

rng = np.random.default_rng(0)

graph = ModelGraph(
    input_shape=Spatial(3, 16, 16),
    element_type=ElementType.FP32,
    layers=(
        Conv2d(3, 8, kernel_size=3, padding=1), ReLU(), MaxPool2d(2, 2),
        Conv2d(8, 4, kernel_size=3), ReLU(), MaxPool2d(2, 3),  # stride > kernel
        Flatten(),
        Linear(16, 5),
    ),
)

store = WeightStore(ElementType.FP32, {
    idx: LayerWeights(
        weight=rng.standard_normal(wshape).astype(np.float32),
        bias=rng.standard_normal(bshape).astype(np.float32) if bshape else None)
    for idx, (wshape, bshape) in weight_layout(graph).items()})

x = Tensor.from_array(rng.uniform(0, 1, (3, 16, 16)).astype(np.float32),
                      ElementType.FP32)

plan = fuse(graph)
print("Execution plan:")
for unit, shape in zip(plan.units, plan.output_shapes):
    print(f"  {unit} -> {shape}")

naive = run_naive(graph, store, x)
fused = run_fused(plan, store, x, pingpong_plan(plan))

print("\nnaive logits:", naive.data)
print("fused logits:", fused.data)

same_bits = np.array_equal(naive.data.view(np.uint32),
                           fused.data.view(np.uint32))
print(f"\nbitwise identical: {same_bits}")
assert same_bits

# Many trials, many geometries: still bitwise.
trials = 50
for t in range(trials):
    data = rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)
    xt = Tensor.from_array(data, ElementType.FP32)
    a = run_naive(graph, store, xt)
    b = run_fused(plan, store, xt, pingpong_plan(plan))
    assert np.array_equal(a.data.view(np.uint32), b.data.view(np.uint32))
print(f"{trials} random inputs: all bitwise identical")
