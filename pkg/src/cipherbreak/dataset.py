"""Paired plain/encrypted datasets with per-epoch key scheduling.

A dataset root contains processed plain images plus one manifest JSON per
split. Pairs are produced on the fly: under the per_epoch policy every
epoch re-encrypts with a fresh key derived from the base key, so no
encrypted files are persisted except by export_pairs. Manifests carry key
fingerprints only, never key bytes.

Manifest schema (JSON, schema_version 1):

  {
    "schema_version": 1,
    "split": "train" | "val",
    "image_size": 64,
    "scheme": {"scheme": "etc", "block_size": 8, "scramble_only": false},
    "key_policy": {"kind": "per_epoch" | "fixed", "fingerprint": "<hex16>"},
    "entries": [{"id": "000000", "plain_path": "plain/000000.png"}, ...]
  }

Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .ciphers import SchemeConfig, decrypt, encrypt
from .errors import DataError
from .imagecore import load_png, save_png
from .rng import MasterKey, derive_epoch_key

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def required_divisor(cfg: SchemeConfig) -> int:
    """Smallest grid the scheme needs the image dimensions to divide by."""
    return {"etc": cfg.block_size, "pe": 1, "le": 4, "ele": 16}[cfg.scheme]


def center_crop_resize(im: Image.Image, size: int) -> np.ndarray:
    """Square center crop, then bilinear resize; applied before encryption."""
    w, h = im.size
    side = min(w, h)
    left = (w - side) // 2
    top = (h - side) // 2
    im = im.convert("RGB").crop((left, top, left + side, top + side))
    im = im.resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.uint8)


@dataclass
class PairManifest:
    root: Path
    scheme: SchemeConfig
    split: str
    key_policy: dict
    image_size: int
    entries: list[tuple[str, str]]  # (image_id, plain_path relative to root)
    _key: MasterKey | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        if self.split not in ("train", "val"):
            raise DataError(f"split must be train or val, got {self.split!r}")
        if self.key_policy.get("kind") not in ("fixed", "per_epoch"):
            raise DataError(f"unknown key policy {self.key_policy!r}")
        if self.image_size % required_divisor(self.scheme):
            raise DataError(
                f"image size {self.image_size} not divisible by scheme grid "
                f"{required_divisor(self.scheme)}"
            )

    # -- persistence ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "split": self.split,
            "image_size": self.image_size,
            "scheme": self.scheme.to_dict(),
            "key_policy": self.key_policy,
            "entries": [{"id": i, "plain_path": p} for i, p in self.entries],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "PairManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        if data.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise DataError(f"unsupported manifest schema in {path}")
        return cls(
            root=path.parent,
            scheme=SchemeConfig.from_dict(data["scheme"]),
            split=data["split"],
            key_policy=data["key_policy"],
            image_size=data["image_size"],
            entries=[(e["id"], e["plain_path"]) for e in data["entries"]],
        )

    # -- keys ------------------------------------------------------------

    def attach_key(self, key: MasterKey) -> "PairManifest":
        want = self.key_policy.get("fingerprint")
        if want and key.fingerprint() != want:
            raise DataError(
                f"key fingerprint {key.fingerprint()} does not match manifest ({want})"
            )
        self._key = key
        return self

    @property
    def key(self) -> MasterKey:
        if self._key is None:
            raise DataError("no key attached to manifest; call attach_key() first")
        return self._key

    def epoch_key(self, epoch: int) -> MasterKey:
        if self.key_policy["kind"] == "fixed":
            return self.key
        return derive_epoch_key(self.key, epoch)

    # -- data access -----------------------------------------------------

    def plain_path(self, idx: int) -> Path:
        return self.root / self.entries[idx][1]

    def load_plain(self, idx: int) -> np.ndarray:
        path = self.plain_path(idx)
        try:
            return load_png(path)
        except (OSError, UnidentifiedImageError) as exc:
            raise DataError(f"cannot load {path} (entry {self.entries[idx][0]}): {exc}") from exc

    def load_all_plain(self) -> np.ndarray:
        """All plain images as one (N, H, W, 3) uint8 array."""
        return np.stack([self.load_plain(i) for i in range(len(self.entries))])

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class Pair:
    plain: np.ndarray
    encrypted: np.ndarray
    epoch_key_id: int


def epoch_pairs(manifest: PairManifest, epoch: int):
    """Yield (plain, encrypted) pairs for one epoch, encrypted on the fly."""
    key = manifest.epoch_key(epoch)
    for idx in range(len(manifest)):
        plain = manifest.load_plain(idx)
        yield Pair(plain, encrypt(plain, key, manifest.scheme), epoch)


def build_manifests(
    src_dir,
    cfg: SchemeConfig,
    size: int,
    split_ratio: float,
    key: MasterKey,
    out_root,
    key_policy_kind: str = "per_epoch",
    seed: int = 0,
) -> tuple[PairManifest, PairManifest, int]:
    """Process a source image directory into a dataset root.

    Center-crops and resizes every decodable image, writes the processed
    PNGs under out_root/plain/, and emits deterministic train/val
    manifests. Returns (train, val, skipped_count).
    """
    import random

    src_dir = Path(src_dir)
    out_root = Path(out_root)
    if not 0.0 < split_ratio <= 1.0:
        raise ValueError("split ratio must be in (0, 1]")
    files = sorted(p for p in src_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no images found under {src_dir}")

    plain_dir = out_root / "plain"
    plain_dir.mkdir(parents=True, exist_ok=True)
    ids: list[tuple[str, str]] = []
    skipped = 0
    for i, path in enumerate(files):
        try:
            with Image.open(path) as im:
                arr = center_crop_resize(im, size)
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("skipping undecodable file %s: %s", path, exc)
            skipped += 1
            continue
        image_id = f"{i:06d}"
        rel = f"plain/{image_id}.png"
        save_png(out_root / rel, arr)
        ids.append((image_id, rel))
    if not ids:
        raise DataError(f"no decodable images under {src_dir}")

    order = list(range(len(ids)))
    random.Random(seed).shuffle(order)
    n_train = int(len(ids) * split_ratio)
    policy = {"kind": key_policy_kind, "fingerprint": key.fingerprint()}

    def make(split: str, index_list) -> PairManifest:
        m = PairManifest(
            root=out_root,
            scheme=cfg,
            split=split,
            key_policy=dict(policy),
            image_size=size,
            entries=[ids[j] for j in sorted(index_list)],
        )
        m.save(out_root / f"manifest_{split}.json")
        return m.attach_key(key)

    train = make("train", order[:n_train])
    val = make("val", order[n_train:])
    if skipped:
        log.warning("skipped %d undecodable files", skipped)
    return train, val, skipped


def export_pairs(manifest: PairManifest, key: MasterKey, out_dir) -> int:
    """Freeze one keyed encryption of every entry to disk.

    Writes out_dir/plain/<id>.png, out_dir/encrypted/<id>.png and a copy
    of the manifest (with a fixed key policy, since the export is tied to
    this key). Returns the number of pairs written.
    """
    out_dir = Path(out_dir)
    written = 0
    try:
        (out_dir / "plain").mkdir(parents=True, exist_ok=True)
        (out_dir / "encrypted").mkdir(parents=True, exist_ok=True)
        for idx in range(len(manifest)):
            image_id = manifest.entries[idx][0]
            plain = manifest.load_plain(idx)
            save_png(out_dir / "plain" / f"{image_id}.png", plain)
            save_png(out_dir / "encrypted" / f"{image_id}.png", encrypt(plain, key, manifest.scheme))
            written += 1
        exported = PairManifest(
            root=out_dir,
            scheme=manifest.scheme,
            split=manifest.split,
            key_policy={"kind": "fixed", "fingerprint": key.fingerprint()},
            image_size=manifest.image_size,
            entries=[(i, f"plain/{i}.png") for i, _ in manifest.entries],
        )
        exported.save(out_dir / "manifest.json")
    except OSError as exc:
        raise DataError(f"export aborted after {written} pairs: {exc}") from exc
    return written


def verify_export(out_dir, key: MasterKey) -> int:
    """Check every exported encrypted image decrypts to its plain twin."""
    out_dir = Path(out_dir)
    manifest = PairManifest.load(out_dir / "manifest.json")
    ok = 0
    for image_id, rel in manifest.entries:
        plain = load_png(out_dir / rel)
        enc = load_png(out_dir / "encrypted" / f"{image_id}.png")
        if not np.array_equal(decrypt(enc, key, manifest.scheme), plain):
            raise DataError(f"export verification failed for {image_id}")
        ok += 1
    return ok
