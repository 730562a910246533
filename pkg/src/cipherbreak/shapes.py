"""Synthetic shape images: the bundled, license-free desk-scale dataset.

Each image is 1-3 colored rectangles/ellipses/triangles on a plain
background. Generation is deterministic in (seed, index) so datasets can
be rebuilt byte-identically anywhere.
"""

from __future__ import annotations

import random
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .imagecore import save_png

_PALETTE_SPAN = (40, 230)  # keep colors off the extremes so shapes stay visible


def _rand_color(rng: random.Random) -> tuple[int, int, int]:
    lo, hi = _PALETTE_SPAN
    return tuple(rng.randint(lo, hi) for _ in range(3))


def synthesize_shape_image(size: int, seed: int, index: int) -> np.ndarray:
    """One deterministic shapes image as a (size, size, 3) uint8 array."""
    rng = random.Random(seed * 1_000_003 + index)
    im = Image.new("RGB", (size, size), _rand_color(rng))
    draw = ImageDraw.Draw(im)
    for _ in range(rng.randint(1, 3)):
        kind = rng.choice(("rect", "ellipse", "triangle"))
        color = _rand_color(rng)
        x0 = rng.randint(0, size - size // 4)
        y0 = rng.randint(0, size - size // 4)
        x1 = min(size - 1, x0 + rng.randint(size // 5, size // 2))
        y1 = min(size - 1, y0 + rng.randint(size // 5, size // 2))
        if kind == "rect":
            draw.rectangle([x0, y0, x1, y1], fill=color)
        elif kind == "ellipse":
            draw.ellipse([x0, y0, x1, y1], fill=color)
        else:
            x2 = rng.randint(0, size - 1)
            y2 = rng.randint(0, size - 1)
            draw.polygon([(x0, y0), (x1, y1), (x2, y2)], fill=color)
    return np.asarray(im, dtype=np.uint8)


def synthesize_shapes(out_dir, count: int, size: int, seed: int = 0) -> list[Path]:
    """Write `count` shapes PNGs into out_dir; returns the created paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(count)))
    paths = []
    for i in range(count):
        path = out_dir / f"{i:0{width}d}.png"
        save_png(path, synthesize_shape_image(size, seed, i))
        paths.append(path)
    return paths
