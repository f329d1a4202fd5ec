"""tinydeploy: deployment compiler for small sequential CNNs.

Fuses conv/relu/maxpool chains into in-place pooling units, plans activation
memory with two alternating ping-pong buffers, verifies everything against a
reference interpreter, and emits freestanding C99 with read-only weights.
"""

from .model import (
    Conv2d,
    ElementType,
    Flat,
    Flatten,
    Linear,
    MaxPool2d,
    ModelGraph,
    ParseError,
    ReLU,
    ShapeError,
    Spatial,
    WeightError,
    WeightStore,
    infer_shapes,
    load_weights,
    parameter_count,
    parse_model,
)
from .fusion import ExecutionPlan, FusionError, fuse, fusion_legal
from .planner import (
    BufferPlan,
    MemoryReport,
    fused_footprint,
    memory_report,
    naive_footprint,
    pingpong_plan,
)
from .interpreter import Tensor, classify, run_fused, run_fused_traced, run_naive
from .quantize import QuantParams, calibrate_activations, quantize_weights
from .emitter import EmittedBundle, emit, predict_sizes, verify_emitted, write_bundle

__version__ = "0.1.0"

__all__ = [
    "Conv2d", "ElementType", "Flat", "Flatten", "Linear", "MaxPool2d",
    "ModelGraph", "ParseError", "ReLU", "ShapeError", "Spatial", "WeightError",
    "WeightStore", "infer_shapes", "load_weights", "parameter_count",
    "parse_model", "ExecutionPlan", "FusionError", "fuse", "fusion_legal",
    "BufferPlan", "MemoryReport", "fused_footprint", "memory_report",
    "naive_footprint", "pingpong_plan", "Tensor", "classify", "run_fused",
    "run_fused_traced", "run_naive", "QuantParams", "calibrate_activations",
    "quantize_weights", "EmittedBundle", "emit", "predict_sizes",
    "verify_emitted", "write_bundle", "__version__",
]
