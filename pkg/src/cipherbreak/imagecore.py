"""Image container, block partitioning and the dihedral tile transforms.

Images are numpy uint8 arrays of shape (H, W, 3), row-major interleaved
RGB. PNG is the canonical interchange format; lossy formats are rejected
on the cipher path. Range conversions between the 8-bit cipher side and
the [-1, 1] model side live here so they stay exact and centralized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError

# op = (rot & 3) | (flip << 2): rotate 90deg counter-clockwise `rot` times,
# then flip left-right when the flip bit is set. All flipped ops are
# involutions; plain rotations invert as (4 - r) % 4.
DIHEDRAL_OPS = 8
DIHEDRAL_INVERSE = (0, 3, 2, 1, 4, 5, 6, 7)


def require_image(arr: np.ndarray) -> np.ndarray:
    if not isinstance(arr, np.ndarray):
        raise DataError("image must be a numpy array")
    if arr.dtype != np.uint8:
        raise DataError(f"image dtype must be uint8, got {arr.dtype}")
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"image shape must be (H, W, 3), got {arr.shape}")
    return arr


def load_png(path, cipher_path: bool = True) -> np.ndarray:
    """Read an 8-bit RGB image. With cipher_path, only PNG is accepted."""
    with Image.open(path) as im:
        if cipher_path and im.format != "PNG":
            raise DataError(f"{path}: cipher inputs must be PNG, got {im.format}")
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.uint8)


def save_png(path, arr: np.ndarray) -> None:
    require_image(arr)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def to_model(img: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float32 [-1,1]."""
    require_image(img)
    return (img.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def from_model(x: np.ndarray) -> np.ndarray:
    """float [-1,1] -> uint8, clamped; exact inverse of to_model on its range."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


@dataclass
class BlockGrid:
    """Row-major M x M x 3 tiles of an image; integrate() reassembles exactly."""

    block_size: int
    rows: int
    cols: int
    blocks: np.ndarray  # (rows*cols, M, M, 3) uint8

    def __post_init__(self) -> None:
        expect = (self.rows * self.cols, self.block_size, self.block_size, 3)
        if self.blocks.shape != expect:
            raise DataError(f"inconsistent block grid: blocks {self.blocks.shape}, expected {expect}")


def partition(img: np.ndarray, block_size: int) -> BlockGrid:
    require_image(img)
    h, w, _ = img.shape
    if block_size < 1:
        raise DataError("block size must be positive")
    if h % block_size or w % block_size:
        raise DataError(
            f"image {w}x{h} is not divisible by block size {block_size} (no implicit padding)"
        )
    rows, cols = h // block_size, w // block_size
    blocks = (
        img.reshape(rows, block_size, cols, block_size, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, block_size, block_size, 3)
    )
    return BlockGrid(block_size, rows, cols, np.ascontiguousarray(blocks))


def integrate(grid: BlockGrid) -> np.ndarray:
    m = grid.block_size
    img = (
        grid.blocks.reshape(grid.rows, grid.cols, m, m, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid.rows * m, grid.cols * m, 3)
    )
    return np.ascontiguousarray(img)


def dihedral_transform(tile: np.ndarray, op: int) -> np.ndarray:
    """Apply one of the 8 rotation/flip symmetries to an M x M x 3 tile."""
    if not 0 <= op < DIHEDRAL_OPS:
        raise ValueError(f"dihedral op must be in 0..7, got {op}")
    out = np.rot90(tile, k=op & 3, axes=(0, 1))
    if op & 4:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def dihedral_inverse(op: int) -> int:
    if not 0 <= op < DIHEDRAL_OPS:
        raise ValueError(f"dihedral op must be in 0..7, got {op}")
    return DIHEDRAL_INVERSE[op]


def dihedral_transform_blocks(blocks: np.ndarray, ops: np.ndarray) -> np.ndarray:
    """Vectorized dihedral transform, one op index per block."""
    out = np.empty_like(blocks)
    ops = np.asarray(ops)
    for op in range(DIHEDRAL_OPS):
        sel = ops == op
        if not np.any(sel):
            continue
        sub = np.rot90(blocks[sel], k=op & 3, axes=(1, 2))
        if op & 4:
            sub = sub[:, :, ::-1, :]
        out[sel] = sub
    return out
