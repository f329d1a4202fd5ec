"""Static memory planning: naive/fused footprints and ping-pong buffers.

Inter-unit tensors alternate between two statically sized buffers; each
buffer's capacity is the maximum tensor assigned to it, so the total stays
within max1(L) + max2(L) over the per-tensor byte sizes L.  Flatten is a
pure reinterpretation: it adds no tensor and switches no buffer.

The final output may land in the same buffer as the network input when the
alternation's parity works out that way; by then the input is dead, so the
reuse is safe and deliberate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .fusion import ExecutionPlan, FusedConv, FusedLinear, Standalone, fuse
from .model import Flatten, ModelGraph, ReLU, infer_shapes, parameter_count


class PlanError(ValueError):
    """Plan cannot be assigned to ping-pong buffers."""


@dataclass(frozen=True)
class BufferAssignment:
    tensor_index: int  # 0 = network input, then one per non-flatten unit output
    buffer: str        # "A" or "B"
    size_bytes: int
    offset: int = 0    # tensors always occupy their buffer from the start


@dataclass(frozen=True)
class BufferPlan:
    buffer_a_bytes: int
    buffer_b_bytes: int
    assignments: tuple[BufferAssignment, ...]
    total_bytes: int
    tensor_sizes: tuple[int, ...]


@dataclass(frozen=True)
class MemoryReport:
    parameter_bytes: int
    naive_buffer_bytes: int
    fused_buffer_bytes: int
    pingpong_bytes: int
    savings_fused_pct: int
    savings_pingpong_vs_fused_pct: int
    savings_total_pct: int


def naive_footprint(graph: ModelGraph) -> int:
    """Input plus every layer-output buffer, with in-place ReLU and aliasing
    Flatten contributing nothing."""
    shapes = infer_shapes(graph)
    width = graph.element_type.width
    total = shapes[0].element_count * width
    for layer, shape in zip(graph.layers, shapes[1:]):
        if isinstance(layer, (ReLU, Flatten)):
            continue
        total += shape.element_count * width
    return total


def fused_footprint(plan: ExecutionPlan) -> int:
    """Input plus every execution-unit output buffer (Flatten contributes 0)."""
    width = plan.element_type.width
    total = plan.input_shape.element_count * width
    for unit, shape in zip(plan.units, plan.output_shapes):
        if isinstance(unit, Standalone) and isinstance(unit.layer, Flatten):
            continue
        total += shape.element_count * width
    return total


def plan_tensor_sizes(plan: ExecutionPlan) -> list[int]:
    """Byte sizes of the inter-unit tensors: input, then each non-flatten
    unit output, in execution order."""
    width = plan.element_type.width
    sizes = [plan.input_shape.element_count * width]
    for unit, shape in zip(plan.units, plan.output_shapes):
        if isinstance(unit, Standalone) and isinstance(unit.layer, Flatten):
            continue
        sizes.append(shape.element_count * width)
    return sizes


def unit_tensor_map(plan: ExecutionPlan) -> list[tuple[int, int]]:
    """Per unit, the (input, output) tensor indices into plan_tensor_sizes.

    Flatten units map to (i, i): they reinterpret the live tensor in place.
    """
    mapping: list[tuple[int, int]] = []
    current = 0
    for unit in plan.units:
        if isinstance(unit, Standalone) and isinstance(unit.layer, Flatten):
            mapping.append((current, current))
        else:
            mapping.append((current, current + 1))
            current += 1
    return mapping


def pingpong_plan(plan: ExecutionPlan) -> BufferPlan:
    """Assign alternating tensors to buffers A and B, starting with A.

    Buffer capacities are the per-parity maxima, which never exceed the
    max1(L) + max2(L) bound and guarantee every unit's input and output live
    in different buffers.
    """
    if not plan.units:
        raise PlanError("plan has no execution units")
    sizes = plan_tensor_sizes(plan)
    assignments = tuple(
        BufferAssignment(tensor_index=i, buffer="A" if i % 2 == 0 else "B", size_bytes=s)
        for i, s in enumerate(sizes)
    )
    buffer_a = max((s for i, s in enumerate(sizes) if i % 2 == 0), default=0)
    buffer_b = max((s for i, s in enumerate(sizes) if i % 2 == 1), default=0)
    return BufferPlan(
        buffer_a_bytes=buffer_a,
        buffer_b_bytes=buffer_b,
        assignments=assignments,
        total_bytes=buffer_a + buffer_b,
        tensor_sizes=tuple(sizes),
    )


def _savings_pct(before: int, after: int) -> int:
    """100 * (1 - after/before), rounded half up to the nearest integer."""
    if before == 0:
        return 0
    return int(math.floor(100.0 * (1.0 - after / before) + 0.5))


def memory_report(graph: ModelGraph) -> MemoryReport:
    plan = fuse(graph)
    naive = naive_footprint(graph)
    fused = fused_footprint(plan)
    pingpong = pingpong_plan(plan).total_bytes
    return MemoryReport(
        parameter_bytes=parameter_count(graph).bytes,
        naive_buffer_bytes=naive,
        fused_buffer_bytes=fused,
        pingpong_bytes=pingpong,
        savings_fused_pct=_savings_pct(naive, fused),
        savings_pingpong_vs_fused_pct=_savings_pct(fused, pingpong),
        savings_total_pct=_savings_pct(naive, pingpong),
    )
