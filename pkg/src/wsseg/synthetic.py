"""Synthetic "blobs" dataset: grayscale images with squares and disks on a textured background."""

from pathlib import Path

import numpy as np

from .datasets import SampleRecord, build_index, write_image, write_label_png, write_manifest

CLASS_NAMES = ("square", "disk")
INTENSITY = {"square": (195, 235), "disk": (140, 175)}


def _shape_mask(kind, cy, cx, r, size):
    yy, xx = np.mgrid[:size, :size]
    if kind == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def render_sample(rng, size=64, present=(True, False), max_instances=2, noise=12.0,
                  radius_range=(5, 10)):
    """Return ``(image uint8 HxW, label grid uint8 HxW)``; label c+1 marks class c."""
    yy, xx = np.mgrid[:size, :size] / size
    a, b, c = rng.uniform(-15, 15, size=3)
    background = 80 + a * yy + b * xx + c * np.sin(2 * np.pi * (yy + xx) * rng.uniform(0.5, 1.5))
    labels = np.zeros((size, size), np.uint8)
    image = background.copy()
    occupied = np.zeros((size, size), bool)
    for cls, on in enumerate(present):
        if not on:
            continue
        n = rng.integers(1, max_instances + 1)
        placed = 0
        for _ in range(50):
            if placed == n:
                break
            r = int(rng.integers(radius_range[0], radius_range[1] + 1))
            cy, cx = rng.integers(r + 1, size - r - 1, size=2)
            m = _shape_mask(CLASS_NAMES[cls], cy, cx, r, size)
            grown = _shape_mask(CLASS_NAMES[cls], cy, cx, r + 3, size)
            if (grown & occupied).any():
                continue
            occupied |= grown
            labels[m] = cls + 1
            image[m] = rng.uniform(*INTENSITY[CLASS_NAMES[cls]])
            placed += 1
    image = image + rng.normal(0, noise, size=image.shape)
    return np.clip(np.round(image), 0, 255).astype(np.uint8), labels


def make_blobs(out_dir, n_train=500, n_val=100, n_test=0, size=64, seed=0, class_prob=0.55,
               max_instances=2, noise=12.0):
    """Write images, label PNGs and ``manifest.csv`` under ``out_dir``; return the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        for i in range(count):
            sid = f"{split}_{i:04d}"
            present = tuple(bool(v) for v in rng.random(len(CLASS_NAMES)) < class_prob)
            image, labels = render_sample(rng, size, present, max_instances, noise)
            write_image(out / "images" / f"{sid}.png", image)
            write_label_png(out / "masks" / f"{sid}.png", labels)
            vec = tuple(int(np.any(labels == c + 1)) for c in range(len(CLASS_NAMES)))
            records.append(SampleRecord(sid, f"images/{sid}.png", vec, split,
                                        mask_path=f"masks/{sid}.png"))
    index = build_index(records, CLASS_NAMES, root=out)
    manifest = out / "manifest.csv"
    write_manifest(manifest, index)
    return manifest
