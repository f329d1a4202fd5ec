"""Sequential CNN model description, interchange parsing, and weight loading.

A model is described by a JSON document::

    {
      "input": {"c": 1, "h": 32, "w": 32},      # or {"len": n} for flat inputs
      "dtype": "f32",                            # or "i8"
      "layers": [
        {"type": "conv2d", "in_channels": 1, "out_channels": 6, "kernel_size": 5},
        {"type": "relu"},
        {"type": "maxpool2d", "kernel_size": 2, "stride": 2},
        ...
      ]
    }

Layer parameter keys mirror the dataclasses below.  Optional keys take the
usual framework defaults (stride 1, padding 0, has_bias true; maxpool2d
stride defaults to its kernel size).

Weights travel separately as a manifest (JSON list) plus a raw little-endian
blob.  Each manifest entry is::

    {"layer_index": 0, "tensor": "weight", "offset": 0, "elements": 150}

with an additional "scale" field for int8 models.  Weight tensors are stored
as IEEE-754 binary32 (f32 models) or two's-complement int8 bytes (i8 models);
i8 bias tensors are 32-bit little-endian integers.  Entries with
``"tensor": "activation"`` carry per-tensor activation scales for int8 models
(zero byte extent; ``layer_index`` -1 denotes the network input).

All data is laid out channel-major, then row-major (channel, row, column).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np


class ParseError(ValueError):
    """Malformed model document or weight manifest."""


class ShapeError(ValueError):
    """Layer geometry inconsistent with its input tensor."""


class WeightError(ValueError):
    """Weight manifest or blob does not match the model graph."""


class ElementType(Enum):
    FP32 = "f32"
    INT8 = "i8"

    @property
    def width(self) -> int:
        """Bytes per activation element."""
        return 4 if self is ElementType.FP32 else 1

    @property
    def numpy_dtype(self) -> np.dtype:
        return np.dtype("<f4") if self is ElementType.FP32 else np.dtype("i1")


# ---------------------------------------------------------------------------
# Tensor shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Spatial:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("channels", "height", "width"):
            if getattr(self, name) < 1:
                raise ShapeError(f"non-positive dimension: {name}={getattr(self, name)}")

    @property
    def element_count(self) -> int:
        return self.channels * self.height * self.width

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass(frozen=True)
class Flat:
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise ShapeError(f"non-positive dimension: length={self.length}")

    @property
    def element_count(self) -> int:
        return self.length


TensorShape = Union[Spatial, Flat]


# ---------------------------------------------------------------------------
# Layer specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("non-positive channel count")
        if self.kernel_size < 1:
            raise ShapeError("non-positive kernel_size")
        if self.stride < 1:
            raise ShapeError("non-positive stride")
        if self.padding < 0:
            raise ShapeError("negative padding")


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2d:
    kernel_size: int
    stride: int
    padding: int = 0

    def __post_init__(self):
        if self.kernel_size < 1:
            raise ShapeError("non-positive kernel_size")
        if self.stride < 1:
            raise ShapeError("non-positive stride")
        if self.padding < 0:
            raise ShapeError("negative padding")
        # A window fully inside the zero padding would have no defined maximum.
        if self.padding >= self.kernel_size:
            raise ShapeError("pool padding must be smaller than kernel_size")


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int
    has_bias: bool = True

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ShapeError("non-positive feature count")


LayerSpec = Union[Conv2d, ReLU, MaxPool2d, Flatten, Linear]


@dataclass(frozen=True)
class ModelGraph:
    input_shape: TensorShape
    element_type: ElementType
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise ParseError("empty model")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _require(entry: dict, key: str, index: int):
    if key not in entry:
        raise ParseError(f"layer {index}: missing required field '{key}'")
    return entry[key]


def _parse_layer(entry: dict, index: int) -> LayerSpec:
    kind = _require(entry, "type", index)
    try:
        if kind == "conv2d":
            return Conv2d(
                in_channels=int(_require(entry, "in_channels", index)),
                out_channels=int(_require(entry, "out_channels", index)),
                kernel_size=int(_require(entry, "kernel_size", index)),
                stride=int(entry.get("stride", 1)),
                padding=int(entry.get("padding", 0)),
                has_bias=bool(entry.get("has_bias", True)),
            )
        if kind == "relu":
            return ReLU()
        if kind == "maxpool2d":
            kernel = int(_require(entry, "kernel_size", index))
            return MaxPool2d(
                kernel_size=kernel,
                stride=int(entry.get("stride", kernel)),
                padding=int(entry.get("padding", 0)),
            )
        if kind == "flatten":
            return Flatten()
        if kind == "linear":
            return Linear(
                in_features=int(_require(entry, "in_features", index)),
                out_features=int(_require(entry, "out_features", index)),
                has_bias=bool(entry.get("has_bias", True)),
            )
    except ShapeError as exc:
        raise ParseError(f"layer {index}: {exc}") from None
    raise ParseError(f"layer {index}: unknown layer type '{kind}'")


def parse_model(text: str) -> ModelGraph:
    """Parse an interchange document into a validated ModelGraph."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from None
    if not isinstance(doc, dict):
        raise ParseError("top-level value must be an object")

    dtype = doc.get("dtype", "f32")
    try:
        element_type = ElementType(dtype)
    except ValueError:
        raise ParseError(f"unknown dtype '{dtype}'") from None

    inp = doc.get("input")
    if not isinstance(inp, dict):
        raise ParseError("missing required field 'input'")
    try:
        if "len" in inp:
            input_shape: TensorShape = Flat(int(inp["len"]))
        else:
            input_shape = Spatial(int(inp["c"]), int(inp["h"]), int(inp["w"]))
    except KeyError as exc:
        raise ParseError(f"input: missing required field {exc}") from None
    except ShapeError as exc:
        raise ParseError(f"input: {exc}") from None

    raw_layers = doc.get("layers")
    if raw_layers is None:
        raise ParseError("missing required field 'layers'")
    if not raw_layers:
        raise ParseError("empty model")
    layers = tuple(_parse_layer(entry, i) for i, entry in enumerate(raw_layers))
    return ModelGraph(input_shape=input_shape, element_type=element_type, layers=layers)


def model_to_document(graph: ModelGraph) -> dict:
    """Inverse of parse_model, for writing interchange files."""
    if isinstance(graph.input_shape, Spatial):
        inp = {"c": graph.input_shape.channels,
               "h": graph.input_shape.height,
               "w": graph.input_shape.width}
    else:
        inp = {"len": graph.input_shape.length}
    layers = []
    for layer in graph.layers:
        if isinstance(layer, Conv2d):
            layers.append({"type": "conv2d", "in_channels": layer.in_channels,
                           "out_channels": layer.out_channels,
                           "kernel_size": layer.kernel_size, "stride": layer.stride,
                           "padding": layer.padding, "has_bias": layer.has_bias})
        elif isinstance(layer, ReLU):
            layers.append({"type": "relu"})
        elif isinstance(layer, MaxPool2d):
            layers.append({"type": "maxpool2d", "kernel_size": layer.kernel_size,
                           "stride": layer.stride, "padding": layer.padding})
        elif isinstance(layer, Flatten):
            layers.append({"type": "flatten"})
        else:
            layers.append({"type": "linear", "in_features": layer.in_features,
                           "out_features": layer.out_features, "has_bias": layer.has_bias})
    return {"input": inp, "dtype": graph.element_type.value, "layers": layers}


# ---------------------------------------------------------------------------
# Shape inference
# ---------------------------------------------------------------------------

def conv_output_size(in_size: int, kernel: int, stride: int, padding: int) -> int:
    """Floor-division output size shared by conv and pool windows."""
    span = in_size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(
            f"kernel {kernel} larger than padded input {in_size + 2 * padding}"
        )
    return span // stride + 1


def infer_shapes(graph: ModelGraph) -> list[TensorShape]:
    """Per-layer output shapes, preceded by the input shape.

    Returns a list of layer count + 1 shapes.  Raises ShapeError for
    dimension underflow or feature-count mismatches.
    """
    shapes: list[TensorShape] = [graph.input_shape]
    current = graph.input_shape
    for index, layer in enumerate(graph.layers):
        if isinstance(layer, Conv2d):
            if not isinstance(current, Spatial):
                raise ShapeError(f"layer {index}: conv2d requires a spatial input")
            if current.channels != layer.in_channels:
                raise ShapeError(
                    f"layer {index}: conv2d expects {layer.in_channels} input "
                    f"channels, got {current.channels}"
                )
            oh = conv_output_size(current.height, layer.kernel_size, layer.stride, layer.padding)
            ow = conv_output_size(current.width, layer.kernel_size, layer.stride, layer.padding)
            current = Spatial(layer.out_channels, oh, ow)
        elif isinstance(layer, ReLU):
            pass
        elif isinstance(layer, MaxPool2d):
            if not isinstance(current, Spatial):
                raise ShapeError(f"layer {index}: maxpool2d requires a spatial input")
            oh = conv_output_size(current.height, layer.kernel_size, layer.stride, layer.padding)
            ow = conv_output_size(current.width, layer.kernel_size, layer.stride, layer.padding)
            current = Spatial(current.channels, oh, ow)
        elif isinstance(layer, Flatten):
            current = Flat(current.element_count)
        elif isinstance(layer, Linear):
            if not isinstance(current, Flat):
                raise ShapeError(f"layer {index}: linear requires a flat input (flatten first)")
            if current.length != layer.in_features:
                raise ShapeError(
                    f"layer {index}: linear expects {layer.in_features} input "
                    f"features, got {current.length}"
                )
            current = Flat(layer.out_features)
        else:  # pragma: no cover - exhaustive over LayerSpec
            raise ShapeError(f"layer {index}: unsupported layer {layer!r}")
        shapes.append(current)
    return shapes


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------

def bias_width(element_type: ElementType) -> int:
    """Bias storage width: int8 models keep 32-bit integer biases."""
    return 4


@dataclass(frozen=True)
class ParameterCount:
    elements: int
    bytes: int


def parameter_count(graph: ModelGraph) -> ParameterCount:
    """Total parameter elements and stored bytes for the graph."""
    w = graph.element_type.width
    elements = 0
    total_bytes = 0
    for layer in graph.layers:
        if isinstance(layer, Conv2d):
            weights = layer.in_channels * layer.out_channels * layer.kernel_size ** 2
            biases = layer.out_channels if layer.has_bias else 0
        elif isinstance(layer, Linear):
            weights = layer.in_features * layer.out_features
            biases = layer.out_features if layer.has_bias else 0
        else:
            continue
        elements += weights + biases
        total_bytes += weights * w + biases * (bias_width(graph.element_type)
                                               if graph.element_type is ElementType.INT8
                                               else w)
    return ParameterCount(elements=elements, bytes=total_bytes)


# ---------------------------------------------------------------------------
# Weight storage
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerWeights:
    """Parameters of one conv2d/linear layer.

    f32 models: float32 weight and bias.  i8 models: int8 weight with a
    per-tensor scale, int32 bias quantized at weight_scale * input activation
    scale.
    """
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    weight_scale: Optional[float] = None
    bias_scale: Optional[float] = None


@dataclass(frozen=True)
class WeightStore:
    element_type: ElementType
    layers: dict[int, LayerWeights]


def weight_layout(graph: ModelGraph) -> dict[int, tuple[tuple[int, ...], Optional[tuple[int, ...]]]]:
    """Expected (weight shape, bias shape) per parameterized layer index."""
    layout: dict[int, tuple[tuple[int, ...], Optional[tuple[int, ...]]]] = {}
    for index, layer in enumerate(graph.layers):
        if isinstance(layer, Conv2d):
            wshape = (layer.out_channels, layer.in_channels,
                      layer.kernel_size, layer.kernel_size)
            bshape = (layer.out_channels,) if layer.has_bias else None
        elif isinstance(layer, Linear):
            wshape = (layer.out_features, layer.in_features)
            bshape = (layer.out_features,) if layer.has_bias else None
        else:
            continue
        layout[index] = (wshape, bshape)
    return layout


def _entry_dtype(element_type: ElementType, tensor: str) -> np.dtype:
    if element_type is ElementType.FP32:
        return np.dtype("<f4")
    return np.dtype("<i4") if tensor == "bias" else np.dtype("i1")


def parse_manifest(text: str) -> list[dict]:
    try:
        entries = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from None
    if not isinstance(entries, list):
        raise ParseError("manifest must be a list of entries")
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ParseError(f"manifest entry {i} must be an object")
        for key in ("layer_index", "tensor", "offset", "elements"):
            if key not in entry:
                raise ParseError(f"manifest entry {i}: missing required field '{key}'")
        if entry["tensor"] not in ("weight", "bias", "activation"):
            raise ParseError(f"manifest entry {i}: unknown tensor kind '{entry['tensor']}'")
    return entries


def load_weights(graph: ModelGraph, manifest: str, blob: bytes) -> WeightStore:
    """Slice per-layer tensors out of a blob, validating against the graph.

    Activation-scale entries (zero extent) are tolerated and skipped here;
    use quantize.params_from_manifest to recover them.
    """
    entries = parse_manifest(manifest)
    layout = weight_layout(graph)
    et = graph.element_type

    by_layer: dict[int, dict[str, dict]] = {}
    declared = 0
    for entry in entries:
        if entry["tensor"] == "activation":
            continue
        idx = int(entry["layer_index"])
        if idx not in layout:
            raise WeightError(f"unexpected tensor for non-parameterized layer {idx}")
        kind = entry["tensor"]
        if kind in by_layer.setdefault(idx, {}):
            raise WeightError(f"duplicate {kind} entry for layer {idx}")
        by_layer[idx][kind] = entry
        declared += int(entry["elements"]) * _entry_dtype(et, kind).itemsize

    if declared != len(blob):
        raise WeightError(
            f"blob length mismatch: manifest declares {declared} bytes, blob has {len(blob)}"
        )

    store: dict[int, LayerWeights] = {}
    for idx, (wshape, bshape) in layout.items():
        present = by_layer.get(idx, {})
        if "weight" not in present:
            raise WeightError(f"missing tensor for layer {idx} ('weight')")
        if bshape is not None and "bias" not in present:
            raise WeightError(f"missing tensor for layer {idx} ('bias')")
        if bshape is None and "bias" in present:
            raise WeightError(f"layer {idx} declares no bias but manifest has one")

        tensors: dict[str, np.ndarray] = {}
        scales: dict[str, Optional[float]] = {"weight": None, "bias": None}
        for kind, shape in (("weight", wshape), ("bias", bshape)):
            if shape is None:
                continue
            entry = present[kind]
            expected = int(np.prod(shape))
            if int(entry["elements"]) != expected:
                raise WeightError(
                    f"count mismatch for layer {idx} {kind}: manifest declares "
                    f"{entry['elements']} elements, graph implies {expected}"
                )
            dtype = _entry_dtype(et, kind)
            offset = int(entry["offset"])
            extent = expected * dtype.itemsize
            if offset < 0 or offset + extent > len(blob):
                raise WeightError(f"extent overflow for layer {idx} {kind}")
            data = np.frombuffer(blob, dtype=dtype, count=expected, offset=offset)
            tensors[kind] = data.reshape(shape).copy()
            if et is ElementType.INT8:
                if "scale" not in entry:
                    raise WeightError(f"missing scale for layer {idx} {kind}")
                scale = float(entry["scale"])
                if not scale > 0:
                    raise WeightError(f"non-positive scale for layer {idx} {kind}")
                scales[kind] = scale

        store[idx] = LayerWeights(
            weight=tensors["weight"],
            bias=tensors.get("bias"),
            weight_scale=scales["weight"],
            bias_scale=scales["bias"],
        )
    return WeightStore(element_type=et, layers=store)


def serialize_weights(graph: ModelGraph, store: WeightStore,
                      activation_scales: Optional[list[float]] = None) -> tuple[list[dict], bytes]:
    """Build (manifest entries, blob bytes) for a WeightStore.

    activation_scales, when given, is the per-tensor scale list
    [input, layer 0 output, ...] appended as zero-extent entries.
    """
    layout = weight_layout(graph)
    entries: list[dict] = []
    chunks: list[bytes] = []
    offset = 0
    for idx in sorted(layout):
        lw = store.layers[idx]
        for kind, array, scale in (("weight", lw.weight, lw.weight_scale),
                                   ("bias", lw.bias, lw.bias_scale)):
            if array is None:
                continue
            dtype = _entry_dtype(graph.element_type, kind)
            raw = np.ascontiguousarray(array, dtype=dtype).tobytes()
            entry = {"layer_index": idx, "tensor": kind,
                     "offset": offset, "elements": int(array.size)}
            if graph.element_type is ElementType.INT8:
                entry["scale"] = float(scale)
            entries.append(entry)
            chunks.append(raw)
            offset += len(raw)
    if activation_scales is not None:
        for i, scale in enumerate(activation_scales):
            entries.append({"layer_index": i - 1, "tensor": "activation",
                            "offset": offset, "elements": 0, "scale": float(scale)})
    return entries, b"".join(chunks)
