#!/usr/bin/env python3
"""Export a trained PyTorch sequential CNN to the interchange format.

Usage:
    python export.py <checkpoint.pt> <outdir> [--fixtures <image-dir>]

Writes model.json, weights.manifest.json and weights.bin (little-endian fp32,
bit-for-bit copies of the checkpoint tensors).  With --fixtures, every
32x32 raw grayscale image in the directory becomes a golden fixture: the
image bytes are copied to <outdir>/fixtures/ and expected.json records the
model's logits and predicted label for the preprocessed image.

The checkpoint must be a torch.nn.Sequential built from Conv2d, ReLU,
MaxPool2d, Flatten and Linear only.  This script deliberately speaks only
the interchange file formats; it does not import the deployment package.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from torch import nn


class ExportError(ValueError):
    pass


def _int_pair(value, what):
    if isinstance(value, (tuple, list)):
        a, b = value
        if a != b:
            raise ExportError(f"non-square {what}: {value}")
        return int(a)
    return int(value)


def layer_document(module) -> dict:
    if isinstance(module, nn.Conv2d):
        if module.groups != 1 or any(d != 1 for d in module.dilation):
            raise ExportError("unsupported layer: grouped or dilated conv2d")
        return {
            "type": "conv2d",
            "in_channels": module.in_channels,
            "out_channels": module.out_channels,
            "kernel_size": _int_pair(module.kernel_size, "kernel"),
            "stride": _int_pair(module.stride, "stride"),
            "padding": _int_pair(module.padding, "padding"),
            "has_bias": module.bias is not None,
        }
    if isinstance(module, nn.ReLU):
        return {"type": "relu"}
    if isinstance(module, nn.MaxPool2d):
        return {
            "type": "maxpool2d",
            "kernel_size": _int_pair(module.kernel_size, "kernel"),
            "stride": _int_pair(module.stride or module.kernel_size, "stride"),
            "padding": _int_pair(module.padding, "padding"),
        }
    if isinstance(module, nn.Flatten):
        return {"type": "flatten"}
    if isinstance(module, nn.Linear):
        return {
            "type": "linear",
            "in_features": module.in_features,
            "out_features": module.out_features,
            "has_bias": module.bias is not None,
        }
    raise ExportError(f"unsupported layer: {type(module).__name__}")


def tensor_bytes(t: torch.Tensor) -> bytes:
    array = t.detach().cpu().contiguous().numpy()
    if array.dtype != np.float32:
        raise ExportError(f"expected float32 parameters, got {array.dtype}")
    # no re-rounding: these are the checkpoint's bit patterns
    return array.astype("<f4", copy=False).tobytes()


def export_model(model: nn.Module, input_shape) -> tuple[dict, list, bytes]:
    if not isinstance(model, nn.Sequential):
        raise ExportError("non-sequential model")
    layers = []
    entries = []
    chunks = []
    offset = 0
    for index, module in enumerate(model):
        layers.append(layer_document(module))
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            for kind, tensor in (("weight", module.weight), ("bias", module.bias)):
                if tensor is None:
                    continue
                raw = tensor_bytes(tensor)
                entries.append({
                    "layer_index": index,
                    "tensor": kind,
                    "offset": offset,
                    "elements": tensor.numel(),
                })
                chunks.append(raw)
                offset += len(raw)
    c, h, w = input_shape
    doc = {"input": {"c": c, "h": h, "w": w}, "dtype": "f32", "layers": layers}
    return doc, entries, b"".join(chunks)


def preprocess_image(raw: np.ndarray) -> np.ndarray:
    """Camera bytes to model input: invert, zero below the threshold, scale."""
    inverted = 255 - raw.astype(np.int32)
    filtered = np.where(inverted < 100, 0, inverted)
    return (filtered.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def generate_fixtures(model: nn.Sequential, image_dir: Path, outdir: Path,
                      input_shape) -> dict:
    c, h, w = input_shape
    fixtures_dir = outdir / "fixtures"
    fixtures_dir.mkdir(parents=True, exist_ok=True)
    expected = {}
    model.eval()
    for image_path in sorted(image_dir.glob("*.bin")):
        raw = np.frombuffer(image_path.read_bytes(), dtype=np.uint8)
        if raw.size != c * h * w:
            raise ExportError(
                f"{image_path.name}: {raw.size} pixels, expected {c * h * w}")
        x = torch.from_numpy(preprocess_image(raw).reshape(1, c, h, w))
        with torch.no_grad():
            logits = model(x).reshape(-1).numpy()
        (fixtures_dir / image_path.name).write_bytes(image_path.read_bytes())
        expected[image_path.name] = {
            "label": int(np.argmax(logits)),
            "logits": [float(v) for v in logits],
        }
    (fixtures_dir / "expected.json").write_text(json.dumps(expected, indent=2) + "\n")
    return expected


def load_checkpoint(path: Path) -> nn.Module:
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except TypeError:  # older torch without the weights_only flag
        return torch.load(path, map_location="cpu")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("checkpoint", type=Path)
    parser.add_argument("outdir", type=Path)
    parser.add_argument("--fixtures", type=Path,
                        help="directory of raw grayscale fixture images")
    parser.add_argument("--input-shape", default="1,32,32",
                        help="input c,h,w (default: 1,32,32)")
    args = parser.parse_args(argv)

    input_shape = tuple(int(v) for v in args.input_shape.split(","))
    model = load_checkpoint(args.checkpoint)
    try:
        doc, entries, blob = export_model(model, input_shape)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    args.outdir.mkdir(parents=True, exist_ok=True)
    (args.outdir / "model.json").write_text(json.dumps(doc, indent=2) + "\n")
    (args.outdir / "weights.manifest.json").write_text(
        json.dumps(entries, indent=2) + "\n")
    (args.outdir / "weights.bin").write_bytes(blob)
    print(f"wrote model.json, weights.manifest.json, weights.bin "
          f"({len(blob)} bytes) to {args.outdir}")

    if args.fixtures:
        expected = generate_fixtures(model, args.fixtures, args.outdir, input_shape)
        print(f"wrote {len(expected)} fixtures")
    return 0


if __name__ == "__main__":
    sys.exit(main())
