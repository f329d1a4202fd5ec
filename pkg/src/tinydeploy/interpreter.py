"""Host-side execution of model graphs and fused plans.

run_naive applies the source layers one by one with a fresh buffer per layer;
run_fused executes the post-fusion plan inside the two planned ping-pong
buffers.  Both paths share the pinned accumulation order from ops.py, so for
identical inputs and weights the FP32 results agree bitwise and the INT8
results agree exactly; emitted C code follows the same contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .fusion import ExecutionPlan, FusedConv, FusedLinear, Standalone
from .model import (
    Conv2d,
    ElementType,
    Flat,
    Flatten,
    Linear,
    MaxPool2d,
    ModelGraph,
    ReLU,
    ShapeError,
    Spatial,
    TensorShape,
    WeightStore,
    conv_output_size,
    infer_shapes,
)
from .planner import BufferPlan, plan_tensor_sizes, unit_tensor_map


@dataclass
class Tensor:
    """Activation tensor in channel-major, row-major layout.

    data is (c, h, w) for spatial shapes and (n,) for flat ones; int8 tensors
    carry their activation scale.
    """
    shape: TensorShape
    element_type: ElementType
    data: np.ndarray
    scale: Optional[float] = None

    def __post_init__(self):
        if self.data.size != self.shape.element_count:
            raise ShapeError(
                f"data has {self.data.size} elements, shape implies "
                f"{self.shape.element_count}"
            )

    @classmethod
    def from_array(cls, array: np.ndarray, element_type: ElementType,
                   scale: Optional[float] = None) -> "Tensor":
        array = np.ascontiguousarray(array, dtype=element_type.numpy_dtype)
        if array.ndim == 3:
            shape: TensorShape = Spatial(*array.shape)
        elif array.ndim == 1:
            shape = Flat(array.shape[0])
        else:
            raise ShapeError(f"expected 1-D or 3-D data, got {array.ndim}-D")
        return cls(shape=shape, element_type=element_type, data=array, scale=scale)


def _dims(shape: TensorShape) -> tuple[int, int, int]:
    if not isinstance(shape, Spatial):
        raise ShapeError("spatial tensor required")
    return shape.dims


# ---------------------------------------------------------------------------
# Naive single-layer ops (FP32 reference semantics)
# ---------------------------------------------------------------------------

def conv2d_naive(input: Tensor, kernel: np.ndarray, bias: Optional[np.ndarray],
                 stride: int, padding: int) -> Tensor:
    """Cross-correlation (no kernel flip) with zero padding."""
    in_c, h, w = _dims(input.shape)
    out_c, kc, k, _ = kernel.shape
    if kc != in_c:
        raise ShapeError(f"kernel expects {kc} input channels, tensor has {in_c}")
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    acc = ops.conv_accumulate(input.data, kernel, stride, padding, oh, ow,
                              np.dtype(np.float32))
    if bias is not None:
        acc += bias[:, np.newaxis, np.newaxis]
    return Tensor(Spatial(out_c, oh, ow), input.element_type, acc)


def maxpool2d_naive(input: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    in_c, h, w = _dims(input.shape)
    oh = conv_output_size(h, kernel, stride, padding)
    ow = conv_output_size(w, kernel, stride, padding)
    out = ops.maxpool(input.data, kernel, stride, padding, oh, ow)
    return Tensor(Spatial(in_c, oh, ow), input.element_type, out, input.scale)


def relu(t: Tensor) -> Tensor:
    return Tensor(t.shape, t.element_type, ops.relu(t.data), t.scale)


def linear_naive(input: Tensor, weight: np.ndarray, bias: Optional[np.ndarray]) -> Tensor:
    if not isinstance(input.shape, Flat):
        raise ShapeError("linear requires a flat input")
    out_f, in_f = weight.shape
    if in_f != input.shape.length:
        raise ShapeError(f"weight expects {in_f} features, tensor has {input.shape.length}")
    acc = ops.linear_accumulate(input.data, weight, np.dtype(np.float32))
    if bias is not None:
        acc += bias
    return Tensor(Flat(out_f), input.element_type, acc)


def flatten(t: Tensor) -> Tensor:
    """Reinterpret only; the underlying element order is unchanged."""
    return Tensor(Flat(t.shape.element_count), t.element_type,
                  t.data.reshape(-1), t.scale)


def classify(logits: Tensor) -> int:
    """Index of the maximum logit; ties resolve to the lowest index."""
    if logits.data.size == 0:
        raise ValueError("empty logits tensor")
    return int(np.argmax(logits.data.reshape(-1)))


# ---------------------------------------------------------------------------
# Whole-graph execution
# ---------------------------------------------------------------------------

def _check_input(shape: TensorShape, input: Tensor):
    if input.shape != shape:
        raise ShapeError(f"input shape {input.shape} does not match model {shape}")


def _int8_affine(input: Tensor, layer, lw, s_in: float, s_out: float,
                 oh: Optional[int] = None, ow: Optional[int] = None) -> np.ndarray:
    """int32 accumulation + requantization for a conv2d/linear layer."""
    if isinstance(layer, Conv2d):
        acc = ops.conv_accumulate(input.data, lw.weight, layer.stride, layer.padding,
                                  oh, ow, np.dtype(np.int32))
        if lw.bias is not None:
            acc += lw.bias[:, np.newaxis, np.newaxis]
    else:
        acc = ops.linear_accumulate(input.data, lw.weight, np.dtype(np.int32))
        if lw.bias is not None:
            acc += lw.bias
    mult = ops.requant_multiplier(s_in, lw.weight_scale, s_out)
    return ops.requantize(acc, mult).astype(np.int8)


def run_naive(graph: ModelGraph, weights: WeightStore, input: Tensor,
              activation_scales: Optional[Sequence[float]] = None) -> Tensor:
    """Sequential layer-by-layer execution; the semantic baseline.

    INT8 graphs need the per-layer activation scales (index 0 = input) that
    quantize.calibrate_activations produces.
    """
    _check_input(graph.input_shape, input)
    int8 = graph.element_type is ElementType.INT8
    if int8 and activation_scales is None:
        raise ValueError("activation scales required for int8 execution")
    shapes = infer_shapes(graph)
    current = input
    if int8:
        current = Tensor(current.shape, current.element_type, current.data,
                         float(activation_scales[0]))
    for index, layer in enumerate(graph.layers):
        if isinstance(layer, Conv2d):
            out_shape = shapes[index + 1]
            if int8:
                s_in, s_out = current.scale, float(activation_scales[index + 1])
                data = _int8_affine(current, layer, weights.layers[index], s_in, s_out,
                                    out_shape.height, out_shape.width)
                current = Tensor(out_shape, current.element_type, data, s_out)
            else:
                lw = weights.layers[index]
                current = conv2d_naive(current, lw.weight, lw.bias,
                                       layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            current = relu(current)
        elif isinstance(layer, MaxPool2d):
            current = maxpool2d_naive(current, layer.kernel_size, layer.stride,
                                      layer.padding)
        elif isinstance(layer, Flatten):
            current = flatten(current)
        elif isinstance(layer, Linear):
            if int8:
                s_in, s_out = current.scale, float(activation_scales[index + 1])
                data = _int8_affine(current, layer, weights.layers[index], s_in, s_out)
                current = Tensor(Flat(layer.out_features), current.element_type, data, s_out)
            else:
                lw = weights.layers[index]
                current = linear_naive(current, lw.weight, lw.bias)
    return current


# ---------------------------------------------------------------------------
# Fused execution inside the planned ping-pong buffers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LivenessTrace:
    """Tensor bytes simultaneously live per unit; loop scalars excluded."""
    per_unit: tuple[tuple[int, int], ...]  # (unit index, live bytes)
    high_water_bytes: int


def _unit_span(unit) -> int:
    """Index one past the last source layer the unit consumes."""
    if isinstance(unit, FusedConv):
        return unit.layer_index + 1 + int(unit.relu) + int(unit.pool is not None)
    if isinstance(unit, FusedLinear):
        return unit.layer_index + 1 + int(unit.relu)
    return unit.layer_index + 1


def _execute_fused_conv(unit: FusedConv, lw, x: np.ndarray, in_shape: Spatial,
                        s_in=None, s_out=None) -> np.ndarray:
    conv = unit.conv
    oh = conv_output_size(in_shape.height, conv.kernel_size, conv.stride, conv.padding)
    ow = conv_output_size(in_shape.width, conv.kernel_size, conv.stride, conv.padding)
    int8 = x.dtype == np.int8
    if int8:
        acc = ops.conv_accumulate(x, lw.weight, conv.stride, conv.padding, oh, ow,
                                  np.dtype(np.int32))
        if lw.bias is not None:
            acc += lw.bias[:, np.newaxis, np.newaxis]
        mult = ops.requant_multiplier(s_in, lw.weight_scale, s_out)
        score = ops.requantize(acc, mult)
    else:
        score = ops.conv_accumulate(x, lw.weight, conv.stride, conv.padding, oh, ow,
                                    np.dtype(np.float32))
        if lw.bias is not None:
            score += lw.bias[:, np.newaxis, np.newaxis]
    if unit.relu:
        score = ops.relu(score)
    if unit.pool is not None:
        pk, ps = unit.pool.kernel_size, unit.pool.stride
        ph = conv_output_size(oh, pk, ps, 0)
        pw = conv_output_size(ow, pk, ps, 0)
        # Window scores in Algorithm-1 order: the running max starts at zero
        # when an activation guarantees non-negative scores, otherwise at the
        # first window element.
        candidates = [score[:, wy:wy + ph * ps:ps, wx:wx + pw * ps:ps]
                      for wy in range(pk) for wx in range(pk)]
        floor = np.zeros((score.shape[0], ph, pw), dtype=score.dtype) if unit.relu else None
        score = ops.max_reduce(candidates, floor=floor)
    return score.astype(np.int8) if int8 else score


def _execute_fused_linear(unit: FusedLinear, lw, x: np.ndarray,
                          s_in=None, s_out=None) -> np.ndarray:
    int8 = x.dtype == np.int8
    if int8:
        acc = ops.linear_accumulate(x, lw.weight, np.dtype(np.int32))
        if lw.bias is not None:
            acc += lw.bias
        mult = ops.requant_multiplier(s_in, lw.weight_scale, s_out)
        score = ops.requantize(acc, mult)
    else:
        score = ops.linear_accumulate(x, lw.weight, np.dtype(np.float32))
        if lw.bias is not None:
            score += lw.bias
    if unit.relu:
        score = ops.relu(score)
    return score.astype(np.int8) if int8 else score


def _buffer_views(buffers: BufferPlan, element_type: ElementType):
    storage = {
        "A": np.zeros(buffers.buffer_a_bytes, dtype=np.uint8),
        "B": np.zeros(buffers.buffer_b_bytes, dtype=np.uint8),
    }

    def view(tensor_index: int, shape: TensorShape) -> np.ndarray:
        assignment = buffers.assignments[tensor_index]
        nbytes = shape.element_count * element_type.width
        if nbytes > storage[assignment.buffer].size:
            raise RuntimeError(
                f"planner bug: tensor {tensor_index} needs {nbytes} bytes, buffer "
                f"{assignment.buffer} holds {storage[assignment.buffer].size}"
            )
        flat = storage[assignment.buffer][:nbytes].view(element_type.numpy_dtype)
        dims = shape.dims if isinstance(shape, Spatial) else (shape.element_count,)
        return flat.reshape(dims)

    return view


def _run_fused(plan: ExecutionPlan, weights: WeightStore, input: Tensor,
               buffers: BufferPlan,
               activation_scales: Optional[Sequence[float]] = None,
               trace: Optional[list] = None) -> Tensor:
    _check_input(plan.input_shape, input)
    int8 = plan.element_type is ElementType.INT8
    if int8 and activation_scales is None:
        raise ValueError("activation scales required for int8 execution")
    sizes = plan_tensor_sizes(plan)
    io_map = unit_tensor_map(plan)
    view = _buffer_views(buffers, plan.element_type)

    current_shape: TensorShape = plan.input_shape
    current = view(0, current_shape)
    current[...] = input.data.reshape(current.shape)

    for uidx, unit in enumerate(plan.units):
        in_idx, out_idx = io_map[uidx]
        out_shape = plan.output_shapes[uidx]
        if isinstance(unit, Standalone) and isinstance(unit.layer, Flatten):
            current = current.reshape(-1)
            current_shape = out_shape
            continue
        if trace is not None:
            trace.append((uidx, sizes[in_idx] + sizes[out_idx]))
        if int8:
            s_in = float(activation_scales[unit.layer_index])
            s_out = float(activation_scales[_unit_span(unit)])
        else:
            s_in = s_out = None
        if isinstance(unit, FusedConv):
            result = _execute_fused_conv(unit, weights.layers[unit.layer_index],
                                         current, current_shape, s_in, s_out)
        elif isinstance(unit, FusedLinear):
            result = _execute_fused_linear(unit, weights.layers[unit.layer_index],
                                           current, s_in, s_out)
        else:  # standalone max pool
            pool = unit.layer
            oh = conv_output_size(current_shape.height, pool.kernel_size,
                                  pool.stride, pool.padding)
            ow = conv_output_size(current_shape.width, pool.kernel_size,
                                  pool.stride, pool.padding)
            result = ops.maxpool(current, pool.kernel_size, pool.stride,
                                 pool.padding, oh, ow)
        out = view(out_idx, out_shape)
        out[...] = result
        current = out
        current_shape = out_shape

    scale = float(activation_scales[_unit_span(plan.units[-1])]) if int8 else None
    return Tensor(current_shape, plan.element_type, current.copy(), scale)


def run_fused(plan: ExecutionPlan, weights: WeightStore, input: Tensor,
              buffers: BufferPlan,
              activation_scales: Optional[Sequence[float]] = None) -> Tensor:
    """Execute the fused plan inside the two planned buffers."""
    return _run_fused(plan, weights, input, buffers, activation_scales)


def run_fused_traced(plan: ExecutionPlan, weights: WeightStore, input: Tensor,
                     buffers: BufferPlan,
                     activation_scales: Optional[Sequence[float]] = None
                     ) -> tuple[Tensor, LivenessTrace]:
    """Diagnostic variant recording live tensor bytes per unit."""
    events: list[tuple[int, int]] = []
    out = _run_fused(plan, weights, input, buffers, activation_scales, trace=events)
    high = max((bytes_ for _, bytes_ in events), default=0)
    return out, LivenessTrace(per_unit=tuple(events), high_water_bytes=high)
