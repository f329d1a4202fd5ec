"""Command-line entry point.

Subcommands: inspect, plan, quantize, preprocess, run, emit, verify.
Exit codes: 0 success, 1 verification mismatch, 2 usage/IO/model errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import model as M
from . import quantize as Q
from .emitter import (
    EmitError,
    ToolchainError,
    emit,
    verify_emitted,
    write_bundle,
)
from .fusion import FusionError, fuse
from .interpreter import Tensor, classify, run_fused
from .planner import PlanError, memory_report, pingpong_plan

DEFAULT_HARNESS = Path("harness") / "main.c"


def _load_graph(args) -> M.ModelGraph:
    text = Path(args.model).read_text()
    graph = M.parse_model(text)
    if getattr(args, "dtype", None):
        graph = M.ModelGraph(graph.input_shape, M.ElementType(args.dtype), graph.layers)
    return graph


def _load_weights(args, graph: M.ModelGraph):
    if not args.manifest or not args.weights:
        raise FileNotFoundError("missing weights: pass --manifest and --weights")
    manifest_text = Path(args.manifest).read_text()
    blob = Path(args.weights).read_bytes()
    store = M.load_weights(graph, manifest_text, blob)
    scales = None
    if graph.element_type is M.ElementType.INT8:
        params = Q.params_from_manifest(M.parse_manifest(manifest_text))
        scales = params.layer_output_scales
    return store, scales


def _read_input_tensor(path, graph: M.ModelGraph) -> Tensor:
    raw = Path(path).read_bytes()
    dtype = graph.element_type.numpy_dtype
    expected = graph.input_shape.element_count * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"input file is {len(raw)} bytes, model expects {expected}")
    data = np.frombuffer(raw, dtype=dtype).copy()
    if isinstance(graph.input_shape, M.Spatial):
        data = data.reshape(graph.input_shape.dims)
    return Tensor.from_array(data, graph.element_type)


def _layer_label(layer) -> str:
    if isinstance(layer, M.Conv2d):
        return (f"conv2d({layer.in_channels}->{layer.out_channels}, "
                f"k={layer.kernel_size}, s={layer.stride}, p={layer.padding})")
    if isinstance(layer, M.ReLU):
        return "relu"
    if isinstance(layer, M.MaxPool2d):
        return f"maxpool2d(k={layer.kernel_size}, s={layer.stride}, p={layer.padding})"
    if isinstance(layer, M.Flatten):
        return "flatten"
    return f"linear({layer.in_features}->{layer.out_features})"


def _shape_label(shape) -> str:
    if isinstance(shape, M.Spatial):
        return f"{shape.channels}x{shape.height}x{shape.width}"
    return str(shape.length)


def _layer_params(layer) -> int:
    if isinstance(layer, M.Conv2d):
        elems = layer.in_channels * layer.out_channels * layer.kernel_size ** 2
        elems += layer.out_channels if layer.has_bias else 0
    elif isinstance(layer, M.Linear):
        elems = layer.in_features * layer.out_features
        elems += layer.out_features if layer.has_bias else 0
    else:
        elems = 0
    return elems


def cmd_inspect(args) -> int:
    graph = _load_graph(args)
    shapes = M.infer_shapes(graph)
    count = M.parameter_count(graph)
    rows = [{"layer": "input", "kind": "-", "output": _shape_label(shapes[0]),
             "params": 0}]
    for i, (layer, shape) in enumerate(zip(graph.layers, shapes[1:])):
        rows.append({"layer": str(i), "kind": _layer_label(layer),
                     "output": _shape_label(shape),
                     "params": _layer_params(layer)})
    if args.format == "json":
        print(json.dumps({"layers": rows, "total_elements": count.elements,
                          "total_bytes": count.bytes}, indent=2))
    else:
        widths = (5, 36, 10)
        print(f"{'layer':<{widths[0]}} {'kind':<{widths[1]}} "
              f"{'output':<{widths[2]}} params")
        for row in rows:
            print(f"{row['layer']:<{widths[0]}} {row['kind']:<{widths[1]}} "
                  f"{row['output']:<{widths[2]}} {row['params'] or '-'}")
        print(f"total: {count.elements} params / {count.bytes} bytes")
    return 0


def cmd_plan(args) -> int:
    graph = _load_graph(args)
    report = memory_report(graph)
    buffers = pingpong_plan(fuse(graph))
    if args.format == "json":
        doc = dataclasses.asdict(report)
        doc["buffer_a_bytes"] = buffers.buffer_a_bytes
        doc["buffer_b_bytes"] = buffers.buffer_b_bytes
        print(json.dumps(doc, indent=2))
    else:
        print(f"{'parameter bytes':<28}{report.parameter_bytes}")
        print(f"{'naive buffer bytes':<28}{report.naive_buffer_bytes}")
        print(f"{'fused buffer bytes':<28}{report.fused_buffer_bytes}")
        print(f"{'ping-pong bytes':<28}{report.pingpong_bytes}"
              f"  (A={buffers.buffer_a_bytes}, B={buffers.buffer_b_bytes})")
        print(f"{'savings fused vs naive':<28}{report.savings_fused_pct}%")
        print(f"{'savings ping-pong vs fused':<28}{report.savings_pingpong_vs_fused_pct}%")
        print(f"{'savings total':<28}{report.savings_total_pct}%")
    return 0


def cmd_run(args) -> int:
    graph = _load_graph(args)
    store, scales = _load_weights(args, graph)
    tensor = _read_input_tensor(args.input, graph)
    plan = fuse(graph)
    out = run_fused(plan, store, tensor, pingpong_plan(plan), scales)
    cls = classify(out)
    flat = out.data.reshape(-1)
    if args.format == "json":
        logits = [int(v) for v in flat] if graph.element_type is M.ElementType.INT8 \
            else [float(v) for v in flat]
        print(json.dumps({"logits": logits, "class": cls}))
    else:
        for v in flat:
            print(int(v) if graph.element_type is M.ElementType.INT8 else f"{v:.9g}")
        print(f"class={cls}")
    return 0


INVERT_THRESHOLD = 100


def preprocess_pixels(raw: np.ndarray) -> np.ndarray:
    """Camera bytes to model texture: invert, then zero anything below the
    threshold (applied to the inverted value)."""
    inverted = 255 - raw.astype(np.int32)
    return np.where(inverted < INVERT_THRESHOLD, 0, inverted).astype(np.uint8)


def cmd_preprocess(args) -> int:
    graph = _load_graph(args)
    raw = np.frombuffer(Path(args.input).read_bytes(), dtype=np.uint8)
    if raw.size != graph.input_shape.element_count:
        raise ValueError(
            f"image has {raw.size} pixels, model expects "
            f"{graph.input_shape.element_count}")
    pixels = preprocess_pixels(raw)
    scaled = pixels.astype(np.float32) / np.float32(255.0)
    if graph.element_type is M.ElementType.INT8:
        if not args.manifest:
            raise ValueError("int8 preprocessing needs --manifest for the input scale")
        params = Q.params_from_manifest(
            M.parse_manifest(Path(args.manifest).read_text()))
        out = Q.quantize_input(scaled, params.layer_output_scales[0])
    else:
        out = scaled
    Path(args.out).write_bytes(out.tobytes())
    return 0


def cmd_quantize(args) -> int:
    graph = _load_graph(args)
    if graph.element_type is not M.ElementType.FP32:
        raise ValueError("quantize expects an fp32 model document")
    store, _ = _load_weights(args, graph)
    samples = []
    for path in args.input or []:
        samples.append(_read_input_tensor(path, graph))
    if not samples:
        raise ValueError("pass at least one --input calibration tensor")
    params = Q.calibrate_activations(graph, store, samples)
    qstore, params = Q.quantize_weights(store, params)
    int8_graph = M.ModelGraph(graph.input_shape, M.ElementType.INT8, graph.layers)
    entries, blob = M.serialize_weights(
        int8_graph, qstore, activation_scales=list(params.layer_output_scales))
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "model.json").write_text(
        json.dumps(M.model_to_document(int8_graph), indent=2) + "\n")
    (outdir / "weights.manifest.json").write_text(json.dumps(entries, indent=2) + "\n")
    (outdir / "weights.bin").write_bytes(blob)
    print(f"wrote int8 model ({len(blob)} weight bytes) to {outdir}")
    return 0


def _emit_bundle(args):
    graph = _load_graph(args)
    store, scales = _load_weights(args, graph)
    plan = fuse(graph)
    buffers = pingpong_plan(plan)
    bundle = emit(plan, store, buffers, scales)
    return graph, store, scales, bundle


def cmd_emit(args) -> int:
    _, _, _, bundle = _emit_bundle(args)
    outdir = Path(args.out)
    paths = write_bundle(bundle, outdir)
    prediction = bundle.size_prediction.to_document()
    (outdir / "size_prediction.json").write_text(json.dumps(prediction, indent=2) + "\n")
    if args.format == "json":
        print(json.dumps({"files": [str(p) for p in paths], **prediction}, indent=2))
    else:
        for p in paths:
            print(f"wrote {p}")
        print(f"flash bytes (min): {prediction['flash_bytes_min']}")
        print(f"ram bytes:         {prediction['ram_bytes']}")
        for note in prediction["notes"]:
            print(f"note: {note}")
    return 0


def cmd_verify(args) -> int:
    graph, store, scales, bundle = _emit_bundle(args)
    rng = np.random.default_rng(args.seed)
    inputs = []
    if args.input:
        inputs.append(_read_input_tensor(args.input, graph))
    dtype = graph.element_type.numpy_dtype
    shape = (graph.input_shape.dims if isinstance(graph.input_shape, M.Spatial)
             else (graph.input_shape.element_count,))
    for _ in range(args.trials):
        if graph.element_type is M.ElementType.INT8:
            data = rng.integers(-127, 128, size=shape).astype(dtype)
        else:
            data = rng.uniform(0.0, 1.0, size=shape).astype(dtype)
        inputs.append(Tensor.from_array(data, graph.element_type))
    report = verify_emitted(bundle, graph, store, inputs, cc=args.cc,
                            harness_source=args.harness, activation_scales=scales)
    matched = sum(r.matched for r in report.results)
    for r in report.results:
        status = "ok" if r.matched else "MISMATCH"
        print(f"input {r.index}: {status} (class {r.actual_class})")
    print(f"{matched}/{len(report.results)} match")
    return 0 if report.all_matched else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinydeploy",
        description="Deployment compiler for small sequential CNNs "
                    "targeting kilobyte-scale microcontrollers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, weights=False, inp=False, out=False):
        p.add_argument("--model", required=True, help="model interchange JSON")
        p.add_argument("--dtype", choices=["f32", "i8"],
                       help="override the model's element type")
        p.add_argument("--format", choices=["table", "json"], default="table")
        if weights:
            p.add_argument("--manifest", help="weight manifest JSON")
            p.add_argument("--weights", help="weight blob")
        if inp:
            p.add_argument("--input", help="raw input tensor file")
        if out:
            p.add_argument("--out", required=True, help="output path")

    common(sub.add_parser("inspect", help="per-layer shapes and parameter counts"))
    common(sub.add_parser("plan", help="memory footprints and savings"))

    p = sub.add_parser("quantize", help="calibrate and quantize an fp32 model")
    common(p, weights=True, out=True)
    p.add_argument("--input", action="append",
                   help="raw fp32 calibration tensor (repeatable)")

    p = sub.add_parser("preprocess", help="invert/threshold a raw grayscale image")
    common(p, weights=False, inp=True, out=True)
    p.add_argument("--manifest", help="weight manifest (int8 input scale)")

    p = sub.add_parser("run", help="execute the fused engine on one input")
    common(p, weights=True, inp=True)

    p = sub.add_parser("emit", help="generate C sources")
    common(p, weights=True, out=True)

    p = sub.add_parser("verify", help="compile emitted code and compare outputs")
    common(p, weights=True, inp=True)
    p.add_argument("--cc", default="cc", help="host C compiler")
    p.add_argument("--harness", default=str(DEFAULT_HARNESS),
                   help="harness main.c source")
    p.add_argument("--trials", type=int, default=16,
                   help="number of random verification inputs")
    p.add_argument("--seed", type=int, default=0)
    return parser


HANDLERS = {
    "inspect": cmd_inspect,
    "plan": cmd_plan,
    "quantize": cmd_quantize,
    "preprocess": cmd_preprocess,
    "run": cmd_run,
    "emit": cmd_emit,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except (M.ParseError, M.ShapeError, M.WeightError, FusionError, PlanError,
            EmitError, ToolchainError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
