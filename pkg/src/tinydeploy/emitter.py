"""Freestanding C99 code generation for fused execution plans.

The emitted engine is three files: weights.c (read-only parameter arrays,
textually included by network.c so everything keeps internal linkage),
network.c (two static ping-pong buffers plus one loop nest per execution
unit, mirroring the fused interpreter's arithmetic exactly), and network.h
(entry point and geometry macros).  The inference path calls no library
functions, allocates nothing, and never recurses; float constants are hex
literals so every bit of the original weights survives the round trip.

Builds that compare against the interpreter must disable FMA contraction
(e.g. gcc/clang -ffp-contract=off) so float arithmetic stays plain IEEE
single precision.
"""

from __future__ import annotations

import math
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ops
from .fusion import ExecutionPlan, FusedConv, FusedLinear, Standalone
from .interpreter import Tensor, _unit_span, classify, run_fused
from .model import (
    ElementType,
    Flatten,
    ModelGraph,
    Spatial,
    WeightStore,
    conv_output_size,
)
from .planner import BufferPlan, pingpong_plan, unit_tensor_map
from .fusion import fuse


class EmitError(RuntimeError):
    """Code generation or compilation failure."""


class ToolchainError(RuntimeError):
    """Host compiler or harness unavailable."""


@dataclass(frozen=True)
class SizePrediction:
    flash_bytes_min: int
    ram_bytes: int
    notes: tuple[str, ...]

    def to_document(self) -> dict:
        return {"flash_bytes_min": self.flash_bytes_min,
                "ram_bytes": self.ram_bytes, "notes": list(self.notes)}


@dataclass(frozen=True)
class EmittedBundle:
    weights_unit: str
    inference_unit: str
    header: str
    size_prediction: SizePrediction


@dataclass(frozen=True)
class InputResult:
    index: int
    matched: bool
    expected_class: int
    actual_class: int


@dataclass(frozen=True)
class VerificationReport:
    results: tuple[InputResult, ...]

    @property
    def all_matched(self) -> bool:
        return all(r.matched for r in self.results)


# ---------------------------------------------------------------------------
# Literals and identifiers
# ---------------------------------------------------------------------------

def _f32_literal(value) -> str:
    v = float(np.float32(value))
    if not math.isfinite(v):
        raise EmitError("non-finite value in emitted constants")
    return float.hex(v) + "f"


def _weight_name(layer_index: int) -> str:
    return f"w_l{layer_index}"


def _bias_name(layer_index: int) -> str:
    return f"b_l{layer_index}"


def _array_lines(values, literal, per_line: int) -> list[str]:
    lines = []
    flat = list(values)
    for start in range(0, len(flat), per_line):
        chunk = ", ".join(literal(v) for v in flat[start:start + per_line])
        lines.append(f"    {chunk},")
    if lines:
        lines[-1] = lines[-1].rstrip(",")
    return lines


# ---------------------------------------------------------------------------
# weights.c
# ---------------------------------------------------------------------------

def _emit_weights(plan: ExecutionPlan, weights: WeightStore) -> tuple[str, int]:
    int8 = plan.element_type is ElementType.INT8
    lines = [
        "/*",
        " * Model parameters.  This file is included by network.c; every array",
        " * is const so the toolchain places it in non-volatile memory instead",
        " * of RAM.",
        " */",
        "",
    ]
    data_bytes = 0
    arrays = 0
    for unit in plan.units:
        if isinstance(unit, Standalone):
            continue
        idx = unit.layer_index
        lw = weights.layers[idx]
        kind = "conv2d" if isinstance(unit, FusedConv) else "linear"
        shape = "x".join(str(d) for d in lw.weight.shape)
        if int8:
            wtype, btype = "int8_t", "int32_t"
            wlit = blit = lambda v: str(int(v))
            per_line = 16
        else:
            wtype = btype = "float"
            wlit = blit = _f32_literal
            per_line = 4
        flat_w = lw.weight.reshape(-1)
        lines.append(f"/* layer {idx}: {kind} weight, {shape} */")
        lines.append(f"static const {wtype} {_weight_name(idx)}[{flat_w.size}] = {{")
        lines.extend(_array_lines(flat_w, wlit, per_line))
        lines.append("};")
        lines.append("")
        data_bytes += lw.weight.nbytes
        arrays += 1
        if lw.bias is not None:
            lines.append(f"/* layer {idx}: {kind} bias */")
            lines.append(f"static const {btype} {_bias_name(idx)}[{lw.bias.size}] = {{")
            lines.extend(_array_lines(lw.bias.reshape(-1), blit,
                                      per_line if int8 else 4))
            lines.append("};")
            lines.append("")
            data_bytes += lw.bias.nbytes
            arrays += 1
    if arrays == 0:
        lines.append("/* model has no parameters */")
        lines.append("")
    lines.insert(5, f"/* total parameter data: {data_bytes} bytes in {arrays} arrays */")
    return "\n".join(lines) + "\n", data_bytes


# ---------------------------------------------------------------------------
# network.h
# ---------------------------------------------------------------------------

def _emit_header(plan: ExecutionPlan) -> str:
    int8 = plan.element_type is ElementType.INT8
    elem = "int8_t" if int8 else "float"
    out_count = plan.output_shapes[-1].element_count
    lines = [
        "/* Inference engine entry point and geometry. */",
        "#ifndef NN_NETWORK_H",
        "#define NN_NETWORK_H",
        "",
        "#include <stdint.h>",
        "",
    ]
    if isinstance(plan.input_shape, Spatial):
        c, h, w = plan.input_shape.dims
        lines += [
            f"#define NN_INPUT_CHANNELS {c}",
            f"#define NN_INPUT_HEIGHT {h}",
            f"#define NN_INPUT_WIDTH {w}",
        ]
    lines += [
        f"#define NN_INPUT_ELEMENTS {plan.input_shape.element_count}",
        f"#define NN_OUTPUT_CLASSES {out_count}",
        f"#define NN_ELEM_FLOAT {0 if int8 else 1}",
        "",
        f"typedef {elem} nn_elem_t;",
        "",
        "/* Runs the network on `input`, writes NN_OUTPUT_CLASSES logits to",
        " * `logits_out`, and returns the index of the best-scoring class. */",
        "int nn_forward(const nn_elem_t *input, nn_elem_t *logits_out);",
        "",
        "#endif /* NN_NETWORK_H */",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# network.c
# ---------------------------------------------------------------------------

class _Block:
    """Indented line collector."""

    def __init__(self):
        self.lines: list[str] = []
        self.depth = 0

    def add(self, text: str = ""):
        self.lines.append("    " * self.depth + text if text else "")

    def open(self, text: str):
        self.add(text + " {")
        self.depth += 1

    def close(self, suffix: str = ""):
        self.depth -= 1
        self.add("}" + suffix)


def _conv_unit_code(block: _Block, unit: FusedConv, in_shape: Spatial,
                    src: str, dst: str, int8: bool,
                    multiplier: Optional[np.float32]):
    conv = unit.conv
    in_c, ih, iw = in_shape.dims
    k, cs, p = conv.kernel_size, conv.stride, conv.padding
    oc_n = conv.out_channels
    oh = conv_output_size(ih, k, cs, p)
    ow = conv_output_size(iw, k, cs, p)
    wname = _weight_name(unit.layer_index)
    bname = _bias_name(unit.layer_index)
    acc_t = "int32_t" if int8 else "float"
    score_t = "int8_t" if int8 else "float"
    zero = "0" if int8 else "0.0f"

    desc = f"conv2d({conv.in_channels}->{oc_n}, k={k}, s={cs}, p={p})"
    if unit.relu:
        desc += " + relu"
    if unit.pool:
        desc += f" + maxpool(k={unit.pool.kernel_size}, s={unit.pool.stride})"
    block.add(f"/* {desc}: {src} -> {dst} */")

    pad_term = f" - {p}" if p > 0 else ""

    def emit_score(u_expr: str, v_expr: str, indent_ctx: _Block):
        b = indent_ctx
        stride_u = f"{u_expr} * {cs}" if cs > 1 else u_expr
        stride_v = f"{v_expr} * {cs}" if cs > 1 else v_expr
        b.add(f"{acc_t} acc = {zero};")
        b.open(f"for (int z = 0; z < {in_c}; ++z)")
        b.open(f"for (int i = 0; i < {k}; ++i)")
        b.open(f"for (int j = 0; j < {k}; ++j)")
        b.add(f"const int r = {stride_u} + i{pad_term};")
        b.add(f"const int c = {stride_v} + j{pad_term};")
        tap_in = f"{src}[(z * {ih} + r) * {iw} + c]"
        tap_w = f"{wname}[((oc * {in_c} + z) * {k} + i) * {k} + j]"
        if int8:
            tap = f"acc += (int32_t){tap_in} * (int32_t){tap_w};"
        else:
            tap = f"acc += {tap_in} * {tap_w};"
        if p > 0:
            b.open(f"if (r >= 0 && r < {ih} && c >= 0 && c < {iw})")
            b.add(tap)
            b.close()
        else:
            b.add(tap)
        b.close()
        b.close()
        b.close()
        if conv.has_bias:
            b.add(f"acc += {bname}[oc];")
        if int8:
            b.add(f"{score_t} score = nn_requant(acc, {_f32_literal(multiplier)});")
            if unit.relu:
                b.open("if (score < 0)")
                b.add("score = 0;")
                b.close()
        else:
            if unit.relu:
                b.add(f"const {score_t} score = acc > 0.0f ? acc : 0.0f;")
            else:
                b.add(f"const {score_t} score = acc;")

    if unit.pool is None:
        block.open(f"for (int oc = 0; oc < {oc_n}; ++oc)")
        block.open(f"for (int oy = 0; oy < {oh}; ++oy)")
        block.open(f"for (int ox = 0; ox < {ow}; ++ox)")
        emit_score("oy", "ox", block)
        block.add(f"{dst}[(oc * {oh} + oy) * {ow} + ox] = score;")
        block.close()
        block.close()
        block.close()
        return

    pk, ps = unit.pool.kernel_size, unit.pool.stride
    ph = conv_output_size(oh, pk, ps, 0)
    pw = conv_output_size(ow, pk, ps, 0)
    block.open(f"for (int oc = 0; oc < {oc_n}; ++oc)")
    block.open(f"for (int py = 0; py < {ph}; ++py)")
    block.open(f"for (int px = 0; px < {pw}; ++px)")
    if unit.relu:
        # relu scores are non-negative, so zero seeds the running maximum
        block.add(f"{score_t} best = {zero};")
    else:
        block.add("int first = 1;")
        block.add(f"{score_t} best = {zero};")
    block.open(f"for (int wy = 0; wy < {pk}; ++wy)")
    block.open(f"for (int wx = 0; wx < {pk}; ++wx)")
    block.add(f"const int u = py * {ps} + wy;" if ps > 1 else "const int u = py + wy;")
    block.add(f"const int v = px * {ps} + wx;" if ps > 1 else "const int v = px + wx;")
    emit_score("u", "v", block)
    if unit.relu:
        block.open("if (score > best)")
        block.add("best = score;")
        block.close()
    else:
        block.open("if (first || score > best)")
        block.add("best = score;")
        block.add("first = 0;")
        block.close()
    block.close()
    block.close()
    block.add(f"{dst}[(oc * {ph} + py) * {pw} + px] = best;")
    block.close()
    block.close()
    block.close()


def _linear_unit_code(block: _Block, unit: FusedLinear, src: str, dst: str,
                      int8: bool, multiplier: Optional[np.float32]):
    lin = unit.linear
    wname = _weight_name(unit.layer_index)
    bname = _bias_name(unit.layer_index)
    acc_t = "int32_t" if int8 else "float"
    zero = "0" if int8 else "0.0f"
    desc = f"linear({lin.in_features}->{lin.out_features})"
    if unit.relu:
        desc += " + relu"
    block.add(f"/* {desc}: {src} -> {dst} */")
    block.open(f"for (int o = 0; o < {lin.out_features}; ++o)")
    block.add(f"{acc_t} acc = {zero};")
    block.open(f"for (int i = 0; i < {lin.in_features}; ++i)")
    if int8:
        block.add(f"acc += (int32_t){src}[i] * (int32_t){wname}[o * {lin.in_features} + i];")
    else:
        block.add(f"acc += {src}[i] * {wname}[o * {lin.in_features} + i];")
    block.close()
    if lin.has_bias:
        block.add(f"acc += {bname}[o];")
    if int8:
        block.add(f"int8_t score = nn_requant(acc, {_f32_literal(multiplier)});")
        if unit.relu:
            block.open("if (score < 0)")
            block.add("score = 0;")
            block.close()
        block.add(f"{dst}[o] = score;")
    else:
        if unit.relu:
            block.add(f"{dst}[o] = acc > 0.0f ? acc : 0.0f;")
        else:
            block.add(f"{dst}[o] = acc;")
    block.close()


def _pool_unit_code(block: _Block, pool, in_shape: Spatial, src: str, dst: str,
                    int8: bool):
    in_c, ih, iw = in_shape.dims
    pk, ps, p = pool.kernel_size, pool.stride, pool.padding
    oh = conv_output_size(ih, pk, ps, p)
    ow = conv_output_size(iw, pk, ps, p)
    elem = "int8_t" if int8 else "float"
    zero = "0" if int8 else "0.0f"
    block.add(f"/* maxpool(k={pk}, s={ps}, p={p}): {src} -> {dst} */")
    block.open(f"for (int ch = 0; ch < {in_c}; ++ch)")
    block.open(f"for (int py = 0; py < {oh}; ++py)")
    block.open(f"for (int px = 0; px < {ow}; ++px)")
    block.add("int first = 1;")
    block.add(f"{elem} best = {zero};")
    pad_term = f" - {p}" if p > 0 else ""
    stride_py = f"py * {ps}" if ps > 1 else "py"
    stride_px = f"px * {ps}" if ps > 1 else "px"
    block.open(f"for (int wy = 0; wy < {pk}; ++wy)")
    block.open(f"for (int wx = 0; wx < {pk}; ++wx)")
    block.add(f"const int r = {stride_py} + wy{pad_term};")
    block.add(f"const int c = {stride_px} + wx{pad_term};")
    if p > 0:
        block.open(f"if (r >= 0 && r < {ih} && c >= 0 && c < {iw})")
    block.add(f"const {elem} v = {src}[(ch * {ih} + r) * {iw} + c];")
    block.open("if (first || v > best)")
    block.add("best = v;")
    block.add("first = 0;")
    block.close()
    if p > 0:
        block.close()
    block.close()
    block.close()
    block.add(f"{dst}[(ch * {oh} + py) * {ow} + px] = best;")
    block.close()
    block.close()
    block.close()


def _emit_network(plan: ExecutionPlan, buffers: BufferPlan,
                  activation_scales: Optional[Sequence[float]],
                  weights: WeightStore) -> str:
    int8 = plan.element_type is ElementType.INT8
    elem = "int8_t" if int8 else "float"
    width = plan.element_type.width
    io_map = unit_tensor_map(plan)

    def buffer_of(tensor_index: int) -> str:
        return "buf_a" if buffers.assignments[tensor_index].buffer == "A" else "buf_b"

    block = _Block()
    block.add("/*")
    block.add(" * Generated inference engine: one loop nest per fused execution unit,")
    block.add(" * running inside two statically allocated ping-pong buffers.  The")
    block.add(" * inference path performs no library calls, no dynamic allocation and")
    block.add(" * no recursion.  Compile with FP contraction disabled (-ffp-contract=off)")
    block.add(" * for bit-exact agreement with the reference interpreter.")
    block.add(" */")
    block.add()
    block.add('#include "network.h"')
    block.add('#include "weights.c"')
    block.add()
    block.add(f"static {elem} buf_a[{buffers.buffer_a_bytes // width}];")
    if buffers.buffer_b_bytes:
        block.add(f"static {elem} buf_b[{buffers.buffer_b_bytes // width}];")
    block.add()
    if int8:
        block.add("/* Rescale a 32-bit accumulator to the int8 output scale; rounding is")
        block.add(" * half away from zero via trunc(x +/- 0.5f). */")
        block.open("static int8_t nn_requant(int32_t acc, float mult)")
        block.add("const float x = (float)acc * mult;")
        block.add("const float r = x >= 0.0f ? x + 0.5f : x - 0.5f;")
        block.add("int32_t q = (int32_t)r;")
        block.open("if (q > 127)")
        block.add("q = 127;")
        block.close()
        block.open("if (q < -127)")
        block.add("q = -127;")
        block.close()
        block.add("return (int8_t)q;")
        block.close()
        block.add()

    block.open("int nn_forward(const nn_elem_t *input, nn_elem_t *logits_out)")
    block.open(f"for (int n = 0; n < {plan.input_shape.element_count}; ++n)")
    block.add(f"{buffer_of(0)}[n] = input[n];")
    block.close()
    block.add()

    current_shape = plan.input_shape
    for uidx, unit in enumerate(plan.units):
        in_idx, out_idx = io_map[uidx]
        if isinstance(unit, Standalone) and isinstance(unit.layer, Flatten):
            block.add("/* flatten: reinterpretation only, no code */")
            block.add()
            current_shape = plan.output_shapes[uidx]
            continue
        src, dst = buffer_of(in_idx), buffer_of(out_idx)
        multiplier = None
        if int8 and not isinstance(unit, Standalone):
            s_in = float(activation_scales[unit.layer_index])
            s_out = float(activation_scales[_unit_span(unit)])
            lw = weights.layers[unit.layer_index]
            multiplier = ops.requant_multiplier(s_in, lw.weight_scale, s_out)
        if isinstance(unit, FusedConv):
            _conv_unit_code(block, unit, current_shape, src, dst, int8, multiplier)
        elif isinstance(unit, FusedLinear):
            _linear_unit_code(block, unit, src, dst, int8, multiplier)
        else:
            _pool_unit_code(block, unit.layer, current_shape, src, dst, int8)
        block.add()
        current_shape = plan.output_shapes[uidx]

    out_count = plan.output_shapes[-1].element_count
    final_idx = io_map[-1][1]
    block.add(f"const {elem} *logits = {buffer_of(final_idx)};")
    block.add("int best_class = 0;")
    block.open(f"for (int k = 0; k < {out_count}; ++k)")
    block.add("logits_out[k] = logits[k];")
    block.open("if (logits[k] > logits[best_class])")
    block.add("best_class = k;")
    block.close()
    block.close()
    block.add("return best_class;")
    block.close()
    return "\n".join(block.lines) + "\n"


def emit(plan: ExecutionPlan, weights: WeightStore, buffers: BufferPlan,
         activation_scales: Optional[Sequence[float]] = None) -> EmittedBundle:
    """Generate the three-source bundle for a fused plan.

    int8 plans need the per-layer activation scales so per-unit requantization
    multipliers can be baked in as float constants.
    """
    int8 = plan.element_type is ElementType.INT8
    if int8 and activation_scales is None:
        raise EmitError("activation scales required to emit an int8 engine")
    if weights.element_type is not plan.element_type:
        raise EmitError("weight store element type does not match the plan")
    weights_c, data_bytes = _emit_weights(plan, weights)
    network_c = _emit_network(plan, buffers, activation_scales, weights)
    header = _emit_header(plan)
    prediction = SizePrediction(
        flash_bytes_min=data_bytes,
        ram_bytes=buffers.total_bytes,
        notes=(
            "flash_bytes_min covers parameter data only; instruction and "
            "runtime bytes are toolchain-specific and out of prediction scope",
            "ram_bytes covers the two ping-pong buffers plus zero declared "
            "scratch; loop scalars live in registers or on the stack",
            "toolchains additionally reserve stack/heap space (commonly 4-6 "
            "KB on bare-metal projects), excluded here",
        ),
    )
    return EmittedBundle(weights_unit=weights_c, inference_unit=network_c,
                         header=header, size_prediction=prediction)


def predict_sizes(bundle: EmittedBundle) -> SizePrediction:
    return bundle.size_prediction


FILE_NAMES = ("weights.c", "network.c", "network.h")


def write_bundle(bundle: EmittedBundle, outdir) -> list[Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in zip(FILE_NAMES, (bundle.weights_unit, bundle.inference_unit,
                                       bundle.header)):
        path = out / name
        path.write_text(text)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Verification against the reference interpreter
# ---------------------------------------------------------------------------

def _parse_harness_output(stdout: str, int8: bool) -> tuple[np.ndarray, int]:
    lines = [line.strip() for line in stdout.splitlines() if line.strip()]
    if not lines or not lines[-1].startswith("class="):
        raise EmitError(f"malformed harness output: {stdout!r}")
    cls = int(lines[-1].split("=", 1)[1])
    if int8:
        logits = np.array([int(v) for v in lines[:-1]], dtype=np.int8)
    else:
        logits = np.array([np.float32(float(v)) for v in lines[:-1]], dtype=np.float32)
    return logits, cls


def verify_emitted(bundle: EmittedBundle, graph: ModelGraph, weights: WeightStore,
                   inputs: Sequence[Tensor], cc: str, harness_source,
                   activation_scales: Optional[Sequence[float]] = None
                   ) -> VerificationReport:
    """Compile the bundle with the harness and compare against run_fused.

    FP32 comparisons are bitwise (logits travel as round-trip decimal text);
    int8 comparisons are exact.  Raises ToolchainError before touching the
    filesystem if the compiler or harness is missing.
    """
    cc_path = shutil.which(cc)
    if cc_path is None:
        raise ToolchainError(f"toolchain unavailable: compiler '{cc}' not found")
    harness = Path(harness_source)
    if not harness.is_file():
        raise ToolchainError(f"toolchain unavailable: harness source {harness} not found")

    plan = fuse(graph)
    buffers = pingpong_plan(plan)
    int8 = graph.element_type is ElementType.INT8

    with tempfile.TemporaryDirectory(prefix="tinydeploy-verify-") as tmp:
        tmpdir = Path(tmp)
        write_bundle(bundle, tmpdir)
        (tmpdir / "main.c").write_text(harness.read_text())
        engine = tmpdir / "engine"
        cmd = [cc_path, "-std=c99", "-O2", "-ffp-contract=off",
               "-o", str(engine), "main.c", "network.c"]
        proc = subprocess.run(cmd, cwd=tmpdir, capture_output=True, text=True)
        if proc.returncode != 0:
            raise EmitError(f"compilation failed:\n{proc.stderr}")

        results = []
        for index, tensor in enumerate(inputs):
            expected = run_fused(plan, weights, tensor, buffers, activation_scales)
            expected_class = classify(expected)
            input_path = tmpdir / f"input_{index}.bin"
            input_path.write_bytes(tensor.data.tobytes())
            run = subprocess.run([str(engine), str(input_path)],
                                 capture_output=True, text=True)
            if run.returncode != 0:
                raise EmitError(
                    f"harness exited with {run.returncode} on input {index}: "
                    f"{run.stderr}")
            logits, actual_class = _parse_harness_output(run.stdout, int8)
            if int8:
                matched = np.array_equal(logits, expected.data.reshape(-1))
            else:
                matched = np.array_equal(
                    logits.view(np.uint32),
                    expected.data.reshape(-1).astype(np.float32).view(np.uint32))
            matched = bool(matched and actual_class == expected_class)
            results.append(InputResult(index=index, matched=matched,
                                       expected_class=expected_class,
                                       actual_class=actual_class))
    return VerificationReport(results=tuple(results))
