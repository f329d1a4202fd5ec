#!/usr/bin/env python3
"""Produce the golden-fixture checkpoint and its camera-style digit images.

Usage:
    python make_fixture_checkpoint.py <outdir>

Renders the digits 0-9 from an embedded 5x7 bitmap font as 32x32 grayscale
images in the camera's convention (dark digit on a light background), fits
LeNet-5 on jittered copies until every canonical glyph is classified
correctly, and writes:

    <outdir>/checkpoint.pt          torch.save'd nn.Sequential
    <outdir>/fixture_images/*.bin   raw canonical images, one per digit

Everything is seeded; rerunning reproduces the same files on the same
torch build.  This is fixture tooling, not part of the exporter.
"""

import sys
from pathlib import Path

import numpy as np
import torch
from torch import nn

GLYPHS = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}

BG, INK = 235, 20


def render(digit: int, rng=None, shift=(0, 0)) -> np.ndarray:
    """32x32 camera-style image: dark glyph on light background."""
    mask = np.array([[c == "1" for c in row] for row in GLYPHS[digit]])
    mask = np.kron(mask, np.ones((4, 4), dtype=bool))  # 28x20
    image = np.full((32, 32), BG, dtype=np.int32)
    top, left = 2 + shift[0], 6 + shift[1]
    region = image[top:top + 28, left:left + 20]
    if rng is None:
        region[mask] = INK
    else:
        image += rng.integers(-12, 13, size=image.shape)
        region[mask] = INK + rng.integers(-10, 11, size=int(mask.sum()))
    return np.clip(image, 0, 255).astype(np.uint8)


def preprocess(raw: np.ndarray) -> np.ndarray:
    inverted = 255 - raw.astype(np.int32)
    filtered = np.where(inverted < 100, 0, inverted)
    return (filtered.astype(np.float32) / np.float32(255.0))


def lenet5() -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(1, 6, kernel_size=5),
        nn.ReLU(),
        nn.MaxPool2d(kernel_size=2, stride=2, padding=0),
        nn.Conv2d(6, 16, kernel_size=5),
        nn.ReLU(),
        nn.MaxPool2d(kernel_size=2, stride=2, padding=0),
        nn.Flatten(),
        nn.Linear(400, 120),
        nn.ReLU(),
        nn.Linear(120, 84),
        nn.ReLU(),
        nn.Linear(84, 10),
    )


def training_batch(rng, per_digit: int):
    images, labels = [], []
    for digit in range(10):
        for _ in range(per_digit):
            shift = (int(rng.integers(-2, 3)), int(rng.integers(-2, 3)))
            images.append(preprocess(render(digit, rng, shift)))
            labels.append(digit)
    x = torch.from_numpy(np.stack(images)[:, None, :, :])
    y = torch.tensor(labels)
    return x, y


def canonical_batch():
    images = [preprocess(render(d)) for d in range(10)]
    return torch.from_numpy(np.stack(images)[:, None, :, :])


def fit(model: nn.Sequential, rng) -> int:
    optimizer = torch.optim.Adam(model.parameters(), lr=2e-3)
    loss_fn = nn.CrossEntropyLoss()
    canon = canonical_batch()
    target = torch.arange(10)
    for step in range(400):
        x, y = training_batch(rng, per_digit=6)
        optimizer.zero_grad()
        loss = loss_fn(model(x), y)
        loss.backward()
        optimizer.step()
        if step >= 40 and step % 10 == 0:
            model.eval()
            with torch.no_grad():
                correct = int((model(canon).argmax(dim=1) == target).sum())
            model.train()
            if correct == 10 and loss.item() < 0.05:
                return step
    raise SystemExit("fixture training did not converge")


def main(argv=None) -> int:
    outdir = Path(argv[0] if argv else sys.argv[1])
    torch.manual_seed(0)
    rng = np.random.default_rng(0)

    model = lenet5()
    model.train()
    steps = fit(model, rng)
    model.eval()

    outdir.mkdir(parents=True, exist_ok=True)
    torch.save(model, outdir / "checkpoint.pt")
    images_dir = outdir / "fixture_images"
    images_dir.mkdir(exist_ok=True)
    with torch.no_grad():
        preds = model(canonical_batch()).argmax(dim=1).tolist()
    for digit in range(10):
        (images_dir / f"digit_{digit}.bin").write_bytes(render(digit).tobytes())
    print(f"converged after {steps} steps; canonical predictions: {preds}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
