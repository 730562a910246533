"""Keyed block-wise image encryption: EtC, PE, LE and ELE.

All four schemes are exact bijections on uint8 images: decrypt(encrypt(x))
recovers x bit-for-bit given the same key and config. Randomness comes
from the keyed streams in rng.py; each encryption step owns one stream
(K1 block permutation, K2 rotation/flip, K3 negative-positive, K4 channel
shuffle), so decryption can regenerate the exact draws and apply the
inverse steps in reverse order.

Stream layout per scheme (normative):

  EtC   K1 perm(n_blocks); K2 n_blocks x choice(8); K3 n_blocks bits;
        K4 n_blocks x choice(6)
  PE    K3 H*W*3 bits (channel-wise); K4 H*W x choice(6)
  LE    K1 perm(16) shared by all 4x4 blocks; K3 48 bits (16 positions x
        3 channels), shared by all blocks
  ELE   per 4x4 block i: K1(tweak=i) perm(16), K3(tweak=i) 48 bits; then
        K1 (untweaked) perm over the 16x16 scramble grid
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .imagecore import (
    dihedral_inverse,
    dihedral_transform_blocks,
    integrate,
    partition,
    require_image,
)
from .rng import MasterKey, derive_stream, gen_bits, gen_choices, gen_permutation

SCHEMES = ("le", "pe", "ele", "etc")
ELE_SCRAMBLE_SIZE = 16
LE_BLOCK_SIZE = 4

# The 6 permutations of (R, G, B) in lexicographic order; choice v maps
# output channel c to input channel CHANNEL_PERMS[v][c].
CHANNEL_PERMS = np.array(
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]], dtype=np.int64
)
CHANNEL_PERMS_INV = np.array([np.argsort(p) for p in CHANNEL_PERMS], dtype=np.int64)


@dataclass(frozen=True)
class SchemeConfig:
    """Which cipher to run and its block geometry."""

    scheme: str
    block_size: int | None = None
    scramble_only: bool = False

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        defaults = {"etc": 8, "pe": 1, "le": LE_BLOCK_SIZE, "ele": LE_BLOCK_SIZE}
        if self.block_size is None:
            object.__setattr__(self, "block_size", defaults[self.scheme])
        if self.scheme == "etc" and self.block_size not in (8, 16):
            raise ValueError("etc block size must be 8 or 16")
        if self.scheme == "pe" and self.block_size != 1:
            raise ValueError("pe block size is fixed at 1")
        if self.scheme in ("le", "ele") and self.block_size != LE_BLOCK_SIZE:
            raise ValueError(f"{self.scheme} block size is fixed at {LE_BLOCK_SIZE}")
        if self.scramble_only and self.scheme not in ("etc", "ele"):
            raise ValueError("scramble-only mode applies to etc and ele only")

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "block_size": self.block_size,
            "scramble_only": self.scramble_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SchemeConfig":
        return cls(d["scheme"], d.get("block_size"), d.get("scramble_only", False))


@dataclass(frozen=True)
class CipherRecord:
    """Provenance for one encrypted image; carries a key fingerprint only."""

    scheme: SchemeConfig
    key_fingerprint: str
    image_id: str

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.to_dict(),
            "key_fingerprint": self.key_fingerprint,
            "image_id": self.image_id,
        }


def negative_positive(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Bitwise complement of 8-bit values where mask == 1; identity elsewhere.

    An involution: applying the same mask twice restores the input.
    """
    values = np.asarray(values, dtype=np.uint8)
    mask = np.asarray(mask, dtype=np.uint8)
    return values ^ (mask * np.uint8(255))


def _shuffle_channels(arr: np.ndarray, choices: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Permute the channel axis per leading-index choice from a 6-row table."""
    out = np.empty_like(arr)
    for v in range(6):
        sel = choices == v
        if np.any(sel):
            out[sel] = arr[sel][..., table[v]]
    return out


def etc_encrypt(img: np.ndarray, key: MasterKey, cfg: SchemeConfig) -> np.ndarray:
    if cfg.scheme != "etc":
        raise ValueError("config is not an etc config")
    grid = partition(img, cfg.block_size)
    n = grid.blocks.shape[0]
    blocks = grid.blocks

    perm = gen_permutation(derive_stream(key, "K1"), n)
    blocks = blocks[perm]

    if not cfg.scramble_only:
        ops = gen_choices(derive_stream(key, "K2"), 8, n)
        blocks = dihedral_transform_blocks(blocks, ops)

        flips = gen_bits(derive_stream(key, "K3"), n)
        blocks = negative_positive(blocks, flips[:, None, None, None])

        choices = gen_choices(derive_stream(key, "K4"), 6, n)
        blocks = _shuffle_channels(blocks, choices, CHANNEL_PERMS)

    grid.blocks = blocks
    return integrate(grid)


def etc_decrypt(img: np.ndarray, key: MasterKey, cfg: SchemeConfig) -> np.ndarray:
    if cfg.scheme != "etc":
        raise ValueError("config is not an etc config")
    grid = partition(img, cfg.block_size)
    n = grid.blocks.shape[0]
    blocks = grid.blocks

    if not cfg.scramble_only:
        choices = gen_choices(derive_stream(key, "K4"), 6, n)
        blocks = _shuffle_channels(blocks, choices, CHANNEL_PERMS_INV)

        flips = gen_bits(derive_stream(key, "K3"), n)
        blocks = negative_positive(blocks, flips[:, None, None, None])

        ops = gen_choices(derive_stream(key, "K2"), 8, n)
        inv_ops = np.array([dihedral_inverse(int(op)) for op in ops])
        blocks = dihedral_transform_blocks(blocks, inv_ops)

    perm = gen_permutation(derive_stream(key, "K1"), n)
    blocks = blocks[np.argsort(perm)]

    grid.blocks = blocks
    return integrate(grid)


def pe_encrypt(img: np.ndarray, key: MasterKey) -> np.ndarray:
    require_image(img)
    h, w, _ = img.shape
    flat = img.reshape(-1, 3)
    npix = flat.shape[0]

    mask = gen_bits(derive_stream(key, "K3"), npix * 3).reshape(npix, 3)
    flat = negative_positive(flat, mask)

    choices = gen_choices(derive_stream(key, "K4"), 6, npix)
    flat = _shuffle_channels(flat, choices, CHANNEL_PERMS)
    return flat.reshape(h, w, 3)


def pe_decrypt(img: np.ndarray, key: MasterKey) -> np.ndarray:
    require_image(img)
    h, w, _ = img.shape
    flat = img.reshape(-1, 3)
    npix = flat.shape[0]

    choices = gen_choices(derive_stream(key, "K4"), 6, npix)
    flat = _shuffle_channels(flat, choices, CHANNEL_PERMS_INV)

    mask = gen_bits(derive_stream(key, "K3"), npix * 3).reshape(npix, 3)
    flat = negative_positive(flat, mask)
    return flat.reshape(h, w, 3)


def _le_draws(key: MasterKey, tweak=None):
    n = LE_BLOCK_SIZE * LE_BLOCK_SIZE
    perm = gen_permutation(derive_stream(key, "K1", tweak=tweak), n)
    mask = gen_bits(derive_stream(key, "K3", tweak=tweak), n * 3).reshape(n, 3)
    return perm, mask


def le_encrypt(img: np.ndarray, key: MasterKey) -> np.ndarray:
    grid = partition(img, LE_BLOCK_SIZE)
    flat = grid.blocks.reshape(grid.blocks.shape[0], -1, 3)
    perm, mask = _le_draws(key)
    flat = flat[:, perm, :]
    flat = negative_positive(flat, mask[None, :, :])
    grid.blocks = flat.reshape(grid.blocks.shape)
    return integrate(grid)


def le_decrypt(img: np.ndarray, key: MasterKey) -> np.ndarray:
    grid = partition(img, LE_BLOCK_SIZE)
    flat = grid.blocks.reshape(grid.blocks.shape[0], -1, 3)
    perm, mask = _le_draws(key)
    flat = negative_positive(flat, mask[None, :, :])
    flat = flat[:, np.argsort(perm), :]
    grid.blocks = flat.reshape(grid.blocks.shape)
    return integrate(grid)


def _ele_check_dims(img: np.ndarray) -> None:
    require_image(img)
    h, w, _ = img.shape
    if h % ELE_SCRAMBLE_SIZE or w % ELE_SCRAMBLE_SIZE:
        raise DataError(
            f"ele needs dimensions divisible by {ELE_SCRAMBLE_SIZE}, got {w}x{h}"
        )


def _ele_block_draws(key: MasterKey, n_blocks: int):
    n = LE_BLOCK_SIZE * LE_BLOCK_SIZE
    perms = np.empty((n_blocks, n), dtype=np.int64)
    masks = np.empty((n_blocks, n, 3), dtype=np.uint8)
    for i in range(n_blocks):
        perms[i], masks[i] = _le_draws(key, tweak=i)
    return perms, masks


def ele_encrypt(img: np.ndarray, key: MasterKey, scramble_only: bool = False) -> np.ndarray:
    _ele_check_dims(img)
    out = img
    if not scramble_only:
        grid = partition(img, LE_BLOCK_SIZE)
        flat = grid.blocks.reshape(grid.blocks.shape[0], -1, 3)
        perms, masks = _ele_block_draws(key, flat.shape[0])
        flat = np.take_along_axis(flat, perms[:, :, None], axis=1)
        flat = negative_positive(flat, masks)
        grid.blocks = flat.reshape(grid.blocks.shape)
        out = integrate(grid)
    sgrid = partition(out, ELE_SCRAMBLE_SIZE)
    perm = gen_permutation(derive_stream(key, "K1"), sgrid.blocks.shape[0])
    sgrid.blocks = sgrid.blocks[perm]
    return integrate(sgrid)


def ele_decrypt(img: np.ndarray, key: MasterKey, scramble_only: bool = False) -> np.ndarray:
    _ele_check_dims(img)
    sgrid = partition(img, ELE_SCRAMBLE_SIZE)
    perm = gen_permutation(derive_stream(key, "K1"), sgrid.blocks.shape[0])
    sgrid.blocks = sgrid.blocks[np.argsort(perm)]
    out = integrate(sgrid)
    if scramble_only:
        return out
    grid = partition(out, LE_BLOCK_SIZE)
    flat = grid.blocks.reshape(grid.blocks.shape[0], -1, 3)
    perms, masks = _ele_block_draws(key, flat.shape[0])
    flat = negative_positive(flat, masks)
    inv = np.argsort(perms, axis=1)
    flat = np.take_along_axis(flat, inv[:, :, None], axis=1)
    grid.blocks = flat.reshape(grid.blocks.shape)
    return integrate(grid)


def encrypt(img: np.ndarray, key: MasterKey, cfg: SchemeConfig) -> np.ndarray:
    """Encrypt with the configured scheme; deterministic in (img, key, cfg)."""
    require_image(img)
    if cfg.scheme == "etc":
        return etc_encrypt(img, key, cfg)
    if cfg.scheme == "pe":
        return pe_encrypt(img, key)
    if cfg.scheme == "le":
        return le_encrypt(img, key)
    return ele_encrypt(img, key, scramble_only=cfg.scramble_only)


def decrypt(img: np.ndarray, key: MasterKey, cfg: SchemeConfig) -> np.ndarray:
    """Exact inverse of encrypt for the same (key, cfg)."""
    require_image(img)
    if cfg.scheme == "etc":
        return etc_decrypt(img, key, cfg)
    if cfg.scheme == "pe":
        return pe_decrypt(img, key)
    if cfg.scheme == "le":
        return le_decrypt(img, key)
    return ele_decrypt(img, key, scramble_only=cfg.scramble_only)
