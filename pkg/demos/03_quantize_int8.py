"""Quantize the larger three-conv reference network to int8.

Symmetric per-tensor scales (zero point 0, range [-127, 127]), 32-bit
accumulators, and one float multiplier per fused unit for requantization.
The int8 engine is deterministic: naive and fused execution agree exactly.
"""

from pathlib import Path

import numpy as np

from tinydeploy import (
    ElementType,
    ModelGraph,
    Tensor,
    calibrate_activations,
    fuse,
    memory_report,
    parse_model,
    pingpong_plan,
    quantize_weights,
    run_fused,
    run_naive,
)
from tinydeploy.model import LayerWeights, WeightStore, weight_layout
from tinydeploy.quantize import quantize_input

rng = np.random.default_rng(1)

model_path = Path(__file__).parent.parent / "models" / "testnet.json"
int8_graph = parse_model(model_path.read_text())
# start from an FP32 twin of the document, with synthetic weights
graph = ModelGraph(int8_graph.input_shape, ElementType.FP32, int8_graph.layers)

store = WeightStore(ElementType.FP32, {
    idx: LayerWeights(weight=(0.2 * rng.standard_normal(wshape)).astype(np.float32))
    for idx, (wshape, _) in weight_layout(graph).items()})

samples = [Tensor.from_array(rng.uniform(0, 1, (3, 32, 32)).astype(np.float32),
                             ElementType.FP32) for _ in range(8)]

params = calibrate_activations(graph, store, samples)
qstore, params = quantize_weights(store, params)
print("Activation scales (input, then per layer output):")
for i, s in enumerate(params.layer_output_scales):
    print(f"  {i - 1:3d}: {s:.6f}")

report = memory_report(int8_graph)
print(f"\nint8 accounting: parameters {report.parameter_bytes} bytes "
      f"(33 KB in flash), ping-pong RAM {report.pingpong_bytes} bytes")

plan = fuse(int8_graph)
buffers = pingpong_plan(plan)
x = Tensor.from_array(
    quantize_input(samples[0].data, params.layer_output_scales[0]),
    ElementType.INT8, params.layer_output_scales[0])

naive = run_naive(int8_graph, qstore, x, params.layer_output_scales)
fused = run_fused(plan, qstore, x, buffers, params.layer_output_scales)
print(f"\nnaive int8 logits: {naive.data}")
print(f"fused int8 logits: {fused.data}")
assert np.array_equal(naive.data, fused.data)
print("integer execution paths agree exactly")
