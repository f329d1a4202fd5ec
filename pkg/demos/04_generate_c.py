"""Emit the freestanding C engine and (when a compiler is around) prove it.

The generated bundle is three files: weights.c holds const parameter arrays
(flash-resident on a microcontroller), network.c holds the two static
ping-pong buffers and one loop nest per fused unit, network.h the entry
point.  With gcc installed, this script compiles the bundle with the test
harness and checks the binary against the interpreter bit for bit.
"""

import shutil
import subprocess
import tempfile
from pathlib import Path

import numpy as np

from tinydeploy import (
    ElementType,
    Tensor,
    emit,
    fuse,
    parse_model,
    pingpong_plan,
    verify_emitted,
    write_bundle,
)
from tinydeploy.model import LayerWeights, WeightStore, load_weights, weight_layout

repo = Path(__file__).parent.parent
fixture_dir = repo / "fixtures" / "lenet5"

if fixture_dir.exists():
    graph = parse_model((fixture_dir / "model.json").read_text())
    store = load_weights(graph, (fixture_dir / "weights.manifest.json").read_text(),
                         (fixture_dir / "weights.bin").read_bytes())
    print("using the trained fixture weights")
else:
    graph = parse_model((repo / "models" / "lenet5.json").read_text())
    rng = np.random.default_rng(0)
    store = WeightStore(ElementType.FP32, {
        idx: LayerWeights(
            weight=rng.standard_normal(ws).astype(np.float32),
            bias=rng.standard_normal(bs).astype(np.float32))
        for idx, (ws, bs) in weight_layout(graph).items()})
    print("fixtures not built; using random weights")

plan = fuse(graph)
buffers = pingpong_plan(plan)
bundle = emit(plan, store, buffers)

outdir = Path(tempfile.mkdtemp(prefix="tinydeploy-demo-"))
paths = write_bundle(bundle, outdir)
for p in paths:
    print(f"wrote {p} ({p.stat().st_size} bytes)")

pred = bundle.size_prediction
print(f"\npredicted flash (parameters only): {pred.flash_bytes_min} bytes")
print(f"predicted RAM (ping-pong buffers):  {pred.ram_bytes} bytes")

print("\nfirst lines of network.c:")
for line in bundle.inference_unit.splitlines()[:24]:
    print(f"    {line}")

cc = shutil.which("gcc") or shutil.which("cc")
if cc is None:
    print("\nno C compiler found; skipping the compile-and-compare step")
else:
    rng = np.random.default_rng(7)
    inputs = [Tensor.from_array(rng.uniform(0, 1, (1, 32, 32)).astype(np.float32),
                                ElementType.FP32) for _ in range(8)]
    result = verify_emitted(bundle, graph, store, inputs, cc=cc,
                            harness_source=repo / "harness" / "main.c")
    matched = sum(r.matched for r in result.results)
    print(f"\ncompiled with {cc}: {matched}/{len(result.results)} inputs "
          f"bitwise-identical to the interpreter")
