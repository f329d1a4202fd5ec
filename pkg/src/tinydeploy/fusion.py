"""Rewrite a sequential graph into fused execution units.

Conv2d -> ReLU -> MaxPool2d chains collapse into a single unit when the pool
can run in place (stride >= kernel_size, padding 0: pool windows are mutually
exclusive, so the full convolution output never has to exist).  ReLU always
folds into the preceding conv2d/linear.  Everything else runs standalone.

On the direction of the legality inequality: it is stride >= kernel that
makes windows mutually exclusive.  The reversed reading (kernel >= stride)
describes overlapping windows, which would need convolution results to be
revisited and therefore stored; such pools stay standalone here.  Strides
strictly greater than the kernel are accepted and simply skip the
convolution outputs no window selects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from .model import (
    Conv2d,
    ElementType,
    Flatten,
    Linear,
    MaxPool2d,
    ModelGraph,
    ReLU,
    TensorShape,
    infer_shapes,
)


class FusionError(ValueError):
    """Graph cannot be lowered to an execution plan."""


@dataclass(frozen=True)
class PoolAttachment:
    kernel_size: int
    stride: int
    padding: int = 0

    def __post_init__(self):
        if self.padding != 0:
            raise FusionError("fused pooling requires padding 0")
        if self.stride < self.kernel_size:
            raise FusionError("fused pooling requires stride >= kernel_size")


@dataclass(frozen=True)
class FusedConv:
    conv: Conv2d
    layer_index: int
    relu: bool = False
    pool: Optional[PoolAttachment] = None


@dataclass(frozen=True)
class FusedLinear:
    linear: Linear
    layer_index: int
    relu: bool = False


@dataclass(frozen=True)
class Standalone:
    layer: Union[MaxPool2d, Flatten]
    layer_index: int


ExecutionUnit = Union[FusedConv, FusedLinear, Standalone]


@dataclass(frozen=True)
class ExecutionPlan:
    input_shape: TensorShape
    element_type: ElementType
    units: tuple[ExecutionUnit, ...]
    output_shapes: tuple[TensorShape, ...]


def fusion_legal(pool: MaxPool2d) -> bool:
    """True when the pool's windows are mutually exclusive and unpadded."""
    return pool.stride >= pool.kernel_size and pool.padding == 0


def fuse(graph: ModelGraph) -> ExecutionPlan:
    """Lower a validated graph to an ExecutionPlan.

    Raises FusionError for a ReLU whose predecessor is not a conv2d/linear
    (activations are never materialized on their own).
    """
    shapes = infer_shapes(graph)
    layers = graph.layers
    units: list[ExecutionUnit] = []
    output_shapes: list[TensorShape] = []
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, Conv2d):
            start = i
            relu = False
            pool: Optional[PoolAttachment] = None
            j = i + 1
            if j < len(layers) and isinstance(layers[j], ReLU):
                relu = True
                j += 1
            if j < len(layers) and isinstance(layers[j], MaxPool2d) and fusion_legal(layers[j]):
                p = layers[j]
                pool = PoolAttachment(p.kernel_size, p.stride, p.padding)
                j += 1
            units.append(FusedConv(conv=layer, layer_index=start, relu=relu, pool=pool))
            output_shapes.append(shapes[j])
            i = j
        elif isinstance(layer, Linear):
            relu = i + 1 < len(layers) and isinstance(layers[i + 1], ReLU)
            units.append(FusedLinear(linear=layer, layer_index=i, relu=relu))
            i += 2 if relu else 1
            output_shapes.append(shapes[i])
        elif isinstance(layer, (MaxPool2d, Flatten)):
            units.append(Standalone(layer=layer, layer_index=i))
            i += 1
            output_shapes.append(shapes[i])
        elif isinstance(layer, ReLU):
            raise FusionError(f"orphan activation at layer {i}")
        else:  # pragma: no cover - exhaustive over LayerSpec
            raise FusionError(f"cannot lower layer {i}: {layer!r}")
    return ExecutionPlan(
        input_shape=graph.input_shape,
        element_type=graph.element_type,
        units=tuple(units),
        output_shapes=tuple(output_shapes),
    )
