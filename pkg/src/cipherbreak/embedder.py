"""Pluggable image embedders for attack conditioning and similarity analysis.

Two kinds:

  toy_conv           small convolutional encoder trained with a contrastive
                     objective on plain images only (random crop / flip /
                     color jitter views), then frozen. Default d = 768.
  random_projection  pooled patch statistics times a fixed seeded matrix;
                     zero-training baseline.

Embeddings are deterministic given the spec (kind, d, seed, weights): all
inputs are resized to a fixed 64x64 grid with bilinear interpolation
before encoding, and inference runs with frozen weights.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError
from .imagecore import require_image

EMBED_INPUT_SIZE = 64
DEFAULT_DIM = 768


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str
    d: int = DEFAULT_DIM
    seed: int = 0
    weights: str | None = None  # path, relative to the spec file when loaded

    def __post_init__(self) -> None:
        if self.kind not in ("toy_conv", "random_projection"):
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.d < 1:
            raise ValueError("embedding dimension must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d": self.d, "seed": self.seed, "weights": self.weights}

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "EmbedderSpec":
        path = Path(path)
        data = json.loads(path.read_text())
        weights = data.get("weights")
        if weights is not None and not Path(weights).is_absolute():
            weights = str((path.parent / weights).resolve())
        return cls(kind=data["kind"], d=data["d"], seed=data.get("seed", 0), weights=weights)

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(
            {"kind": self.kind, "d": self.d, "seed": self.seed}, sort_keys=True
        ).encode())
        if self.weights is not None:
            h.update(Path(self.weights).read_bytes())
        return h.hexdigest()[:16]


def _to_embed_input(images: np.ndarray) -> torch.Tensor:
    """uint8 (N,H,W,3) or (H,W,3) -> float32 (N,3,64,64) in [0,1]."""
    if images.ndim == 3:
        images = images[None]
    if images.dtype != np.uint8 or images.shape[-1] != 3:
        raise DataError("embedder expects uint8 RGB images")
    arr = np.ascontiguousarray(images, dtype=np.float32) / 255.0
    x = torch.from_numpy(arr).permute(0, 3, 1, 2)
    if x.shape[-2:] != (EMBED_INPUT_SIZE, EMBED_INPUT_SIZE):
        x = F.interpolate(x, size=(EMBED_INPUT_SIZE, EMBED_INPUT_SIZE),
                          mode="bilinear", align_corners=False)
    return x


class ToyConvEmbedder(nn.Module):
    """Three conv stages with ReLU; the embedding is the stage-pooled
    backbone features sent through a fixed, seeded projection to d.

    The trainable linear head exists only for the contrastive loss and is
    discarded at embedding time (the usual self-supervised convention).
    Keeping the embedding on the non-negative pooled features gives the
    space the positive-cosine floor that large pretrained image encoders
    exhibit; the intermediate feature maps double as the layers of the
    perceptual distance proxy via feature_maps().
    """

    STAGE_CHANNELS = (32, 64, 128)

    def __init__(self, d: int = DEFAULT_DIM, seed: int = 0):
        super().__init__()
        self.d = d
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(64, 128, 3, stride=2, padding=1)
        self.head = nn.Linear(128, 128)  # contrastive-loss head, training only
        for mod in (self.conv1, self.conv2, self.conv3, self.head):
            nn.init.kaiming_uniform_(mod.weight, a=5 ** 0.5, generator=gen)
            nn.init.zeros_(mod.bias)
        n_feat = sum(self.STAGE_CHANNELS)
        rng = np.random.Generator(np.random.Philox(seed))
        proj = rng.standard_normal((n_feat, d)) / np.sqrt(n_feat)
        self.register_buffer("proj", torch.from_numpy(proj.astype(np.float32)))

    def stages(self, x: torch.Tensor) -> list[torch.Tensor]:
        f1 = F.relu(self.conv1(x))
        f2 = F.relu(self.conv2(f1))
        f3 = F.relu(self.conv3(f2))
        return [f1, f2, f3]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([f.mean(dim=(2, 3)) for f in self.stages(x)], dim=1)
        return pooled @ self.proj

    def contrastive_out(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.stages(x)[-1].mean(dim=(2, 3)))

    @torch.no_grad()
    def embed_batch(self, images: np.ndarray) -> np.ndarray:
        self.eval()
        return self(_to_embed_input(images)).numpy().astype(np.float32)

    @torch.no_grad()
    def feature_maps(self, image: np.ndarray) -> list[torch.Tensor]:
        self.eval()
        return [f[0] for f in self.stages(_to_embed_input(image))]


class RandomProjectionEmbedder:
    """Patch mean/std statistics projected by a fixed Gaussian matrix."""

    GRID = 8

    def __init__(self, d: int = DEFAULT_DIM, seed: int = 0):
        self.d = d
        self.seed = seed
        rng = np.random.Generator(np.random.Philox(seed))
        n_feat = self.GRID * self.GRID * 3 * 2
        self._proj = (rng.standard_normal((n_feat, d)) / np.sqrt(n_feat)).astype(np.float32)

    def embed_batch(self, images: np.ndarray) -> np.ndarray:
        x = _to_embed_input(images).numpy()  # (N,3,64,64)
        n = x.shape[0]
        p = EMBED_INPUT_SIZE // self.GRID
        patches = x.reshape(n, 3, self.GRID, p, self.GRID, p)
        mean = patches.mean(axis=(3, 5))
        std = patches.std(axis=(3, 5))
        feats = np.concatenate([mean.reshape(n, -1), std.reshape(n, -1)], axis=1)
        return (feats @ self._proj).astype(np.float32)


def build_embedder(spec: EmbedderSpec):
    if spec.kind == "random_projection":
        return RandomProjectionEmbedder(spec.d, spec.seed)
    model = ToyConvEmbedder(spec.d, spec.seed)
    if spec.weights is not None:
        state = torch.load(spec.weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    return model


def embed(embedder, image: np.ndarray) -> np.ndarray:
    """d-dimensional embedding of one image; deterministic per spec."""
    require_image(image)
    vec = embedder.embed_batch(image[None] if image.ndim == 3 else image)[0]
    if not np.all(np.isfinite(vec)):
        raise DataError("embedding contains non-finite values")
    return vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def similarity_matrix(embedder, images: list[np.ndarray]) -> np.ndarray:
    """Pairwise cosine matrix over images: symmetric with unit diagonal."""
    if len(images) < 2:
        raise ValueError("need at least two images")
    vecs = [embed(embedder, img) for img in images]
    n = len(vecs)
    mat = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = cosine(vecs[i], vecs[j])
    return mat


def corpus_variant_matrix(embedder, variants: dict[str, list[np.ndarray]]) -> tuple[np.ndarray, list[str]]:
    """Corpus-mean cosine between image variants (plain, scheme(K1), ...).

    Entry (i, j) is the mean over the corpus of cosine between variant i
    and variant j of the same underlying image.
    """
    labels = list(variants)
    counts = {len(v) for v in variants.values()}
    if len(counts) != 1:
        raise ValueError("all variants must cover the same corpus")
    (n,) = counts
    vecs = {lab: [embed(embedder, img) for img in imgs] for lab, imgs in variants.items()}
    mat = np.zeros((len(labels), len(labels)))
    for i, a in enumerate(labels):
        for j, b in enumerate(labels):
            if j < i:
                continue
            vals = [cosine(vecs[a][k], vecs[b][k]) for k in range(n)]
            mat[i, j] = mat[j, i] = float(np.mean(vals))
    return mat, labels


def unrelated_pair_mean(embedder, images: list[np.ndarray]) -> float:
    """Mean cosine over all distinct pairs of (unrelated) images."""
    mat = similarity_matrix(embedder, images)
    n = mat.shape[0]
    iu = np.triu_indices(n, k=1)
    return float(mat[iu].mean())


# ---------------------------------------------------------------------------
# contrastive training for the toy_conv embedder


def _augment(batch: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """One random view per image: resized crop, flip, mild color jitter."""
    n, _, h, w = batch.shape
    out = torch.empty_like(batch)
    for i in range(n):
        img = batch[i]
        side = int(torch.randint(int(0.6 * h), h + 1, (1,), generator=gen))
        top = int(torch.randint(0, h - side + 1, (1,), generator=gen))
        left = int(torch.randint(0, w - side + 1, (1,), generator=gen))
        crop = img[:, top : top + side, left : left + side]
        view = F.interpolate(crop[None], size=(h, w), mode="bilinear", align_corners=False)[0]
        if torch.rand(1, generator=gen) < 0.5:
            view = view.flip(-1)
        brightness = 0.8 + 0.4 * torch.rand(1, generator=gen)
        contrast = 0.8 + 0.4 * torch.rand(1, generator=gen)
        mean = view.mean()
        view = ((view * brightness - mean) * contrast + mean).clamp(0, 1)
        out[i] = view
    return out


def _nt_xent(z: torch.Tensor, temperature: float = 0.2) -> torch.Tensor:
    """Normalized temperature-scaled cross entropy over 2B paired views."""
    z = F.normalize(z, dim=1)
    sim = z @ z.t() / temperature
    n = z.shape[0] // 2
    sim.fill_diagonal_(float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(sim, targets)


def train_toy_conv(
    images: np.ndarray,
    d: int = DEFAULT_DIM,
    seed: int = 0,
    steps: int = 1500,
    batch: int = 32,
    lr: float = 1e-3,
) -> ToyConvEmbedder:
    """Train a toy_conv embedder on plain images; returns the frozen model."""
    model = ToyConvEmbedder(d, seed)
    model.train()
    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=1e-4)
    data = torch.from_numpy(images).permute(0, 3, 1, 2).float() / 255.0
    if data.shape[-2:] != (EMBED_INPUT_SIZE, EMBED_INPUT_SIZE):
        data = F.interpolate(data, size=(EMBED_INPUT_SIZE, EMBED_INPUT_SIZE),
                             mode="bilinear", align_corners=False)
    n = data.shape[0]
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch, n),), generator=gen)
        x = data[idx]
        views = torch.cat([_augment(x, gen), _augment(x, gen)])
        loss = _nt_xent(model.contrastive_out(views))
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


def save_toy_conv(model: ToyConvEmbedder, spec_path, weights_name: str = "embedder.pt") -> EmbedderSpec:
    """Write weights next to the spec file and return the loadable spec."""
    spec_path = Path(spec_path)
    spec_path.parent.mkdir(parents=True, exist_ok=True)
    weights_path = spec_path.parent / weights_name
    torch.save(model.state_dict(), weights_path)
    spec = EmbedderSpec(kind="toy_conv", d=model.d, seed=model.seed, weights=str(weights_path))
    rel_spec = EmbedderSpec(kind="toy_conv", d=model.d, seed=model.seed, weights=weights_name)
    rel_spec.save(spec_path)
    return spec
