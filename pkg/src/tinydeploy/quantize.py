"""Symmetric per-tensor int8 quantization.

Scheme: zero point 0, values in [-127, 127], scale = max|x| / 127, 32-bit
integer accumulators, biases stored as int32 at weight_scale * input
activation scale, and a per-unit float32 requantization multiplier applied
with half-away-from-zero rounding.  Activation scales come from max-abs
calibration over FP32 runs of sample inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import interpreter, ops
from .fusion import FusedConv, FusedLinear, Standalone, fuse
from .model import (
    Conv2d,
    ElementType,
    Flatten,
    Linear,
    MaxPool2d,
    ModelGraph,
    ReLU,
    LayerWeights,
    WeightStore,
)

SCALE_FLOOR = 1e-8
BIAS_LIMIT = 1 << 30


@dataclass(frozen=True)
class QuantParams:
    """Per-layer weight scales plus per-tensor activation scales.

    layer_output_scales has one entry per layer output, preceded by the input
    scale (length = layer count + 1).  Layers interior to a fused unit share
    the unit's output scale, which keeps the naive and fused int8 paths in
    exact agreement.
    """
    weight_scales: dict[int, float]
    layer_output_scales: tuple[float, ...]


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(values: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor quantization to int8; scale 1.0 for all-zero input."""
    if not np.isfinite(values).all():
        raise ValueError("non-finite weight value")
    v = values.astype(np.float64)
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    scale = peak / 127.0 if peak > 0.0 else 1.0
    q = np.clip(_round_half_away(v / scale), ops.QMIN, ops.QMAX)
    return q.astype(np.int8), scale


def dequantize(q: np.ndarray, scale: float) -> np.ndarray:
    return q.astype(np.float64) * scale


def quantize_weights(store: WeightStore, activations: QuantParams
                     ) -> tuple[WeightStore, QuantParams]:
    """Quantize an FP32 store; biases need the input activation scale of
    their layer, so calibrate_activations runs first."""
    if store.element_type is not ElementType.FP32:
        raise ValueError("store is already quantized")
    layers: dict[int, LayerWeights] = {}
    weight_scales: dict[int, float] = {}
    for index, lw in store.layers.items():
        q, w_scale = quantize_tensor(lw.weight)
        weight_scales[index] = w_scale
        bias = None
        bias_scale = None
        if lw.bias is not None:
            s_in = activations.layer_output_scales[index]
            bias_scale = w_scale * s_in
            b = _round_half_away(lw.bias.astype(np.float64) / bias_scale)
            # Saturate with headroom so the int32 accumulator (tap sum plus
            # bias) can never overflow; only reachable when an activation
            # scale collapsed to the floor.
            bias = np.clip(b, -BIAS_LIMIT, BIAS_LIMIT).astype(np.int32)
        layers[index] = LayerWeights(weight=q, bias=bias,
                                     weight_scale=w_scale, bias_scale=bias_scale)
    params = replace(activations, weight_scales=weight_scales)
    return WeightStore(element_type=ElementType.INT8, layers=layers), params


def _spread_unit_scales(graph: ModelGraph, unit_maxima: list[float],
                        input_max: float) -> tuple[float, ...]:
    """Per-layer output scales from per-unit maxima.

    Layers inside a fused unit inherit the unit's output scale.  Standalone
    pools and flattens pass int8 values through unchanged, so their outputs
    keep the incoming scale.
    """
    plan = fuse(graph)
    scales = [max(input_max / 127.0, SCALE_FLOOR)]
    layer_scale: dict[int, float] = {}
    previous = scales[0]
    for unit, peak in zip(plan.units, unit_maxima):
        if isinstance(unit, Standalone):
            s = previous
        else:
            s = max(peak / 127.0, SCALE_FLOOR)
        for i in range(unit.layer_index, interpreter._unit_span(unit)):
            layer_scale[i] = s
        previous = s
    for i in range(len(graph.layers)):
        scales.append(layer_scale[i])
    return tuple(scales)


def calibrate_activations(graph: ModelGraph, store: WeightStore,
                          samples: list[interpreter.Tensor]) -> QuantParams:
    """Max-abs activation scales from FP32 runs over the sample set."""
    if not samples:
        raise ValueError("empty sample list")
    plan = fuse(graph)
    input_max = 0.0
    unit_maxima = [0.0] * len(plan.units)
    for sample in samples:
        input_max = max(input_max, float(np.max(np.abs(sample.data))))
        current = sample
        boundary = 0
        for uidx, unit in enumerate(plan.units):
            last = interpreter._unit_span(unit)
            for layer in graph.layers[boundary:last]:
                current = _apply_fp32_layer(layer, store, boundary, current)
                boundary += 1
            unit_maxima[uidx] = max(unit_maxima[uidx],
                                    float(np.max(np.abs(current.data))))
    return QuantParams(weight_scales={},
                       layer_output_scales=_spread_unit_scales(graph, unit_maxima, input_max))


def _apply_fp32_layer(layer, store: WeightStore, index: int,
                      current: interpreter.Tensor) -> interpreter.Tensor:
    if isinstance(layer, Conv2d):
        lw = store.layers[index]
        return interpreter.conv2d_naive(current, lw.weight, lw.bias,
                                        layer.stride, layer.padding)
    if isinstance(layer, ReLU):
        return interpreter.relu(current)
    if isinstance(layer, MaxPool2d):
        return interpreter.maxpool2d_naive(current, layer.kernel_size,
                                           layer.stride, layer.padding)
    if isinstance(layer, Flatten):
        return interpreter.flatten(current)
    lw = store.layers[index]
    return interpreter.linear_naive(current, lw.weight, lw.bias)


def int8_unit_execute(unit, weights: WeightStore, input: interpreter.Tensor,
                      s_in: float, s_out: float) -> interpreter.Tensor:
    """Execute one fused unit in int8 with explicit input/output scales."""
    if input.data.dtype != np.int8:
        raise ValueError("int8 input tensor required")
    if isinstance(unit, FusedConv):
        data = interpreter._execute_fused_conv(
            unit, weights.layers[unit.layer_index], input.data, input.shape,
            s_in, s_out)
    elif isinstance(unit, FusedLinear):
        data = interpreter._execute_fused_linear(
            unit, weights.layers[unit.layer_index], input.data, s_in, s_out)
    else:
        raise ValueError(f"unit has no affine kernel: {unit!r}")
    return interpreter.Tensor.from_array(data, ElementType.INT8, s_out)


def quantize_input(values: np.ndarray, scale: float) -> np.ndarray:
    """Quantize an FP32 activation (e.g. a preprocessed image) to int8."""
    q = np.clip(_round_half_away(values.astype(np.float64) / scale),
                ops.QMIN, ops.QMAX)
    return q.astype(np.int8)


def params_from_manifest(entries: list[dict]) -> QuantParams:
    """Recover QuantParams from a parsed int8 weight manifest."""
    weight_scales: dict[int, float] = {}
    activation: dict[int, float] = {}
    for entry in entries:
        if entry["tensor"] == "weight":
            weight_scales[int(entry["layer_index"])] = float(entry["scale"])
        elif entry["tensor"] == "activation":
            activation[int(entry["layer_index"])] = float(entry["scale"])
    if not activation:
        raise ValueError("manifest carries no activation scales")
    count = max(activation) + 2  # indices run -1 .. layer_count - 1
    scales = tuple(activation[i - 1] for i in range(count))
    return QuantParams(weight_scales=weight_scales, layer_output_scales=scales)
