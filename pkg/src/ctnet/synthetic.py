"""Synthetic image sets for demos and tests.

``texture_image`` draws one of three texture families (0 blob, 1 stripes,
2 checkerboard) with random geometry plus uniform noise, using the portable
RNG so every platform generates identical pixels.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import SPLITS, class_dir, write_png
from .tensor import SeededRng

NOISE = 0.15


def texture_image(kind: int, rng: SeededRng, size: int = 128) -> np.ndarray:
    """(size, size, 3) uint8 gray texture of family ``kind``."""
    u = rng.uniform(6)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 0:
        cy, cx = size * (0.3 + 0.4 * u[0]), size * (0.3 + 0.4 * u[1])
        sigma = size * (0.08 + 0.12 * u[2])
        base = 0.25 + 0.6 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    elif kind == 1:
        period = size * (0.07 + 0.09 * u[0])
        angle = np.pi * u[1]
        phase = 2 * np.pi * u[2]
        t = xx * np.cos(angle) + yy * np.sin(angle)
        base = 0.5 + 0.3 * np.sign(np.sin(2 * np.pi * t / period + phase))
    elif kind == 2:
        cell = size * (0.06 + 0.08 * u[0])
        oy, ox = cell * u[1], cell * u[2]
        parity = (np.floor((yy + oy) / cell) + np.floor((xx + ox) / cell)) % 2
        base = 0.2 + 0.6 * parity
    else:
        raise ValueError(f"texture kind must be 0, 1 or 2, got {kind}")
    noise = (rng.uniform((size, size)) * 2 - 1) * NOISE
    gray = np.clip(np.floor((base + noise) * 255 + 0.5), 0, 255).astype(np.uint8)
    return np.repeat(gray[..., None], 3, axis=2)


def write_texture_tree(root, per_split: dict[str, int], size: int = 128, seed: int = 0) -> Path:
    """Write ``<root>/<split>/<ClassName>/tex_NNNNN.png`` with ``per_split[split]`` images per class."""
    root = Path(root)
    rng = SeededRng(seed)
    for s_i, split in enumerate(sorted(per_split, key=SPLITS.index)):
        for label in range(3):
            d = class_dir(root, split, label)
            d.mkdir(parents=True, exist_ok=True)
            child = rng.spawn(s_i * 16 + label)
            for i in range(per_split[split]):
                write_png(d / f"tex_{i:05d}.png", texture_image(label, child, size))
    return root


def ct_like_image(rng: SeededRng, size: int = 512) -> np.ndarray:
    """Gray disc with a noisy interior on a dark background, (size, size, 3) uint8."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = np.hypot(yy - size / 2, xx - size / 2)
    base = np.where(r < size * 0.42, 0.55, 0.05)
    base = base + (rng.uniform((size, size)) - 0.5) * 0.2
    gray = np.clip(np.floor(base * 255 + 0.5), 0, 255).astype(np.uint8)
    return np.repeat(gray[..., None], 3, axis=2)


def write_metadata_fixture(root, size: int = 512, seed: int = 0, bad_rows: int = 0) -> tuple[Path, Path]:
    """Nine CT-like images (one per class per split) plus ``metadata.csv``.

    The last ``bad_rows`` rows get an inverted bounding box (xmax < xmin).
    Returns ``(metadata_csv, images_dir)``.
    """
    if not 0 <= bad_rows <= 9:
        raise ValueError(f"bad_rows must be in 0..9, got {bad_rows}")
    root = Path(root)
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(seed)
    rows = []
    countries = ("China", "Iran", "USA")
    sexes = ("F", "M", "")
    ages = ("34", "67", "")
    margin = size // 16
    n = 0
    for split in SPLITS:
        for label in range(3):
            name = f"ct_{n:03d}.png"
            write_png(images / name, ct_like_image(rng, size))
            rows.append([name, label, split, margin, margin, size - margin, size - margin,
                         countries[label], sexes[n % 3], ages[n % 3]])
            n += 1
    for row in rows[len(rows) - bad_rows:]:
        row[3], row[5] = row[5], row[3]
    meta = root / "metadata.csv"
    with meta.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["filename", "class", "split", "xmin", "ymin", "xmax", "ymax", "country", "sex", "age"])
        w.writerows(rows)
    return meta, images
