"""Desk-scale pixel-space conditional denoising diffusion.

Forward process, noise-prediction training with condition dropout,
feature-wise affine (denormalization) conditioning on an image embedding,
a two-stage curriculum for block-scrambling ciphers, and classifier-free
guided ancestral sampling. The denoiser is a compact U-Net; the embedding
is projected to per-channel scale/shift factors applied after the
normalization inside every residual block, and the null condition is the
all-zeros embedding, so the unconditional path is exactly the
zero-embedding path.

Images are float32 in [-1, 1] on this side of the pipeline; conversion
to and from 8-bit lives in imagecore.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__
from .ciphers import SchemeConfig, encrypt
from .errors import DataError, NumericError
from .imagecore import from_model, to_model

CHECKPOINT_FORMAT = "cipherbreak-checkpoint-v1"


# ---------------------------------------------------------------------------
# noise schedule and forward process


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule beta_1..beta_T with cached alpha products."""

    betas: np.ndarray

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("schedule needs at least one beta")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(betas) < 0):
            raise ValueError("betas must be non-decreasing")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if np.any(np.diff(alpha_bars) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if alpha_bars[-1] > 0.01:
            raise ValueError(
                f"alpha_bar at the final step must be <= 0.01, got {alpha_bars[-1]:.4g}; "
                "rescale the beta endpoints for short schedules"
            )
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float | None = None,
               beta_end: float | None = None) -> "NoiseSchedule":
        """Linear betas; endpoints default to the 1000-step standard values
        (1e-4, 0.02) rescaled by 1000/T so alpha_bar_T stays near zero.
        For very short schedules the endpoints are capped below 1."""
        scale = 1000.0 / T
        if beta_start is None:
            beta_start = min(1e-4 * scale, 0.5)
        if beta_end is None:
            beta_end = min(0.02 * scale, 0.8)
        return cls(np.linspace(beta_start, beta_end, T, dtype=np.float64))

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(np.asarray(d["betas"], dtype=np.float64))


def _check_t(sched: NoiseSchedule, t: int) -> None:
    if not 1 <= t <= sched.T:
        raise ValueError(f"timestep {t} outside 1..{sched.T}")


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule):
    """Closed-form noising: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_t(sched, t)
    abar = float(sched.alpha_bars[t - 1])
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def single_step_kernel(x_prev, t: int, sched: NoiseSchedule, eps):
    """One forward kernel step: x_t = sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps."""
    _check_t(sched, t)
    beta = float(sched.betas[t - 1])
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * eps


# ---------------------------------------------------------------------------
# denoiser


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    """Residual block with timestep bias and embedding-driven scale/shift
    applied right after the second normalization (denormalization)."""

    def __init__(self, c_in: int, c_out: int, time_dim: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(_norm_groups(c_out), c_out)
        self.cond_proj = nn.Linear(cond_dim, 2 * c_out)
        nn.init.zeros_(self.cond_proj.weight)
        nn.init.zeros_(self.cond_proj.bias)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, t_emb, c_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.norm2(h)
        scale, shift = self.cond_proj(c_emb).chunk(2, dim=1)
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


@dataclass(frozen=True)
class DenoiserConfig:
    base: int = 64
    channel_mults: tuple = (1, 2, 4)
    blocks: int = 2
    cond_dim: int = 768
    time_dim: int = 256

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "channel_mults": list(self.channel_mults),
            "blocks": self.blocks,
            "cond_dim": self.cond_dim,
            "time_dim": self.time_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(
            base=d["base"],
            channel_mults=tuple(d["channel_mults"]),
            blocks=d["blocks"],
            cond_dim=d["cond_dim"],
            time_dim=d["time_dim"],
        )


class Denoiser(nn.Module):
    """Compact U-Net noise predictor with a learned timestep table."""

    def __init__(self, cfg: DenoiserConfig, T: int):
        super().__init__()
        self.cfg = cfg
        self.T = T
        self.time_table = nn.Embedding(T, cfg.time_dim)
        chs = [cfg.base * m for m in cfg.channel_mults]
        levels = len(chs)

        self.stem = nn.Conv2d(3, cfg.base, 3, padding=1)
        ch = cfg.base
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        skip_chs = []
        for i, out in enumerate(chs):
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks):
                blocks.append(ResBlock(ch, out, cfg.time_dim, cfg.cond_dim))
                ch = out
            self.down_blocks.append(blocks)
            skip_chs.append(ch)
            if i < levels - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid1 = ResBlock(ch, ch, cfg.time_dim, cfg.cond_dim)
        self.mid2 = ResBlock(ch, ch, cfg.time_dim, cfg.cond_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(levels)):
            out = chs[i]
            if i < levels - 1:
                self.upsamples.append(nn.Conv2d(ch, ch, 3, padding=1))
            blocks = nn.ModuleList()
            blocks.append(ResBlock(ch + skip_chs[i], out, cfg.time_dim, cfg.cond_dim))
            for _ in range(cfg.blocks - 1):
                blocks.append(ResBlock(out, out, cfg.time_dim, cfg.cond_dim))
            self.up_blocks.append(blocks)
            ch = out

        self.head_norm = nn.GroupNorm(_norm_groups(ch), ch)
        self.head = nn.Conv2d(ch, 3, 3, padding=1)

    def _check_input(self, x):
        levels = len(self.cfg.channel_mults)
        div = 2 ** (levels - 1)
        if x.shape[-1] % div or x.shape[-2] % div:
            raise DataError(
                f"input size {tuple(x.shape[-2:])} not divisible by {div} "
                f"(needed for {levels} resolution levels)"
            )

    def forward(self, x, t, cond=None):
        """Predict the noise in x at timesteps t (1-based) given an embedding.

        cond is a (B, cond_dim) tensor; None means the null condition,
        which is identically the all-zeros embedding.
        """
        self._check_input(x)
        if cond is None:
            cond = torch.zeros(x.shape[0], self.cfg.cond_dim, dtype=x.dtype, device=x.device)
        t_emb = self.time_table(t.long() - 1).to(x.dtype)

        h = self.stem(x)
        skips = []
        levels = len(self.cfg.channel_mults)
        for i in range(levels):
            for block in self.down_blocks[i]:
                h = block(h, t_emb, cond)
            skips.append(h)
            if i < levels - 1:
                h = self.downsamples[i](h)

        h = self.mid1(h, t_emb, cond)
        h = self.mid2(h, t_emb, cond)

        for j, i in enumerate(reversed(range(levels))):
            if i < levels - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[j - 1](h)  # first up level re-uses the mid resolution
            h = torch.cat([h, skips[i]], dim=1)
            for block in self.up_blocks[j]:
                h = block(h, t_emb, cond)

        return self.head(F.silu(self.head_norm(h)))

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    lr: float = 3e-5
    weight_decay: float = 0.01
    cond_dropout: float = 0.10
    batch: int = 16
    stage: str = "single"

    def __post_init__(self) -> None:
        if self.steps < 1 or self.lr <= 0:
            raise ValueError("steps and lr must be positive")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must be in [0, 1)")
        if self.batch < 1:
            raise ValueError("batch must be positive")
        if self.stage not in ("single", "two_stage_etc"):
            raise ValueError(f"unknown stage {self.stage!r}")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "cond_dropout": self.cond_dropout,
            "batch": self.batch,
            "stage": self.stage,
        }


@dataclass(frozen=True)
class SampleConfig:
    guidance_scale: float = 3.0
    steps: int | None = None  # None: full ancestral chain over the schedule
    seed: int = 0

    def __post_init__(self) -> None:
        if self.guidance_scale < 1.0:
            raise ValueError("guidance scale must be >= 1 (1 is the pure-conditional case)")
        if self.steps is not None and self.steps < 1:
            raise ValueError("sampling steps must be positive")


def sample_dropout_mask(batch: int, p: float, generator: torch.Generator) -> torch.Tensor:
    """Per-item condition-dropout decisions for one training step."""
    if p <= 0.0:
        return torch.zeros(batch, dtype=torch.bool)
    return torch.rand(batch, generator=generator) < p


def diffusion_loss(model: Denoiser, x0: torch.Tensor, t: torch.Tensor,
                   eps: torch.Tensor, cond: torch.Tensor | None,
                   sched: NoiseSchedule) -> torch.Tensor:
    """Noise-prediction MSE at the given (t, eps); the training objective."""
    abar = torch.as_tensor(sched.alpha_bars, dtype=x0.dtype, device=x0.device)
    a = abar[t.long() - 1].view(-1, *([1] * (x0.ndim - 1)))
    x_t = torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * eps
    pred = model(x_t, t, cond)
    return F.mse_loss(pred, eps)


def train_step(model: Denoiser, optimizer, x0: torch.Tensor,
               cond: torch.Tensor | None, cfg: TrainConfig,
               sched: NoiseSchedule, generator: torch.Generator) -> tuple[float, int]:
    """One optimization step; returns (loss, number of dropped conditions)."""
    b = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    dropped = sample_dropout_mask(b, cfg.cond_dropout, generator)
    if cond is not None:
        cond = torch.where(dropped[:, None], torch.zeros_like(cond), cond)
    loss = diffusion_loss(model, x0, t, eps, cond, sched)
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite training loss {float(loss.detach())} "
            f"(lr={cfg.lr}, batch={b}, T={sched.T})"
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach()), int(dropped.sum())


# ---------------------------------------------------------------------------
# guided sampling


def guided_eps(model: Denoiser, x_t: torch.Tensor, t: torch.Tensor,
               cond: torch.Tensor | None, s: float) -> torch.Tensor:
    """Classifier-free guided noise prediction.

    General case blends the unconditional and conditional passes as
    eps_u + s * (eps_c - eps_u). The s = 1 and null-condition cases are
    returned as the single forward pass they reduce to algebraically,
    which keeps those identities exact in floating point.
    """
    if s < 1.0:
        raise ValueError("guidance scale must be >= 1")
    with torch.no_grad():
        if cond is None:
            return model(x_t, t, None)
        eps_c = model(x_t, t, cond)
        if s == 1.0:
            return eps_c
        eps_u = model(x_t, t, None)
        return eps_u + s * (eps_c - eps_u)


def _retained_timesteps(sched: NoiseSchedule, steps: int | None) -> list[int]:
    if steps is None or steps >= sched.T:
        return list(range(sched.T, 0, -1))
    taus = np.unique(np.round(np.linspace(1, sched.T, steps)).astype(int))
    return [int(t) for t in taus[::-1]]


def _per_image_generators(seed: int, count: int, offset: int) -> list[torch.Generator]:
    # independent per-(seed, global index) generators so results do not
    # depend on how images are batched
    gens = []
    for i in range(count):
        mix = hashlib.blake2b(f"{seed}:{offset + i}".encode(), digest_size=8).digest()
        gens.append(torch.Generator().manual_seed(int.from_bytes(mix, "big") >> 1))
    return gens


def sample_batch(model: Denoiser, conds: np.ndarray | None, size: int,
                 scfg: SampleConfig, sched: NoiseSchedule, count: int | None = None,
                 index_offset: int = 0) -> np.ndarray:
    """Ancestral sampling from pure noise; returns uint8 (N, size, size, 3).

    conds is (N, cond_dim) or None for unconditional samples (then count
    is required). Deterministic given (cond, scfg.seed, global index):
    every image has its own seeded noise stream, so batch composition
    does not matter; index_offset positions the batch in a larger corpus.
    """
    model.eval()
    if conds is None:
        if count is None:
            raise ValueError("count is required for unconditional sampling")
        n = count
        cond_t = None
    else:
        conds = np.asarray(conds, dtype=np.float32)
        n = conds.shape[0]
        cond_t = torch.from_numpy(conds)
    gens = _per_image_generators(scfg.seed, n, index_offset)
    x = torch.stack([torch.randn(3, size, size, generator=g) for g in gens])

    taus = _retained_timesteps(sched, scfg.steps)
    abars = sched.alpha_bars
    for k, t_cur in enumerate(taus):
        t_next = taus[k + 1] if k + 1 < len(taus) else 0
        abar_cur = float(abars[t_cur - 1])
        abar_next = float(abars[t_next - 1]) if t_next > 0 else 1.0
        beta_eff = 1.0 - abar_cur / abar_next
        t_tensor = torch.full((n,), t_cur, dtype=torch.long)
        eps_hat = guided_eps(model, x, t_tensor, cond_t, scfg.guidance_scale)
        mean = (x - beta_eff / math.sqrt(1.0 - abar_cur) * eps_hat) / math.sqrt(1.0 - beta_eff)
        if t_next > 0:
            z = torch.stack([torch.randn(3, size, size, generator=g) for g in gens])
            x = mean + math.sqrt(beta_eff) * z
        else:
            x = mean
    arr = x.permute(0, 2, 3, 1).numpy()
    return np.stack([from_model(a) for a in arr])


def sample(model: Denoiser, cond: np.ndarray | None, size: int,
           scfg: SampleConfig, sched: NoiseSchedule) -> np.ndarray:
    """One image from one conditioning embedding (or None = unconditional)."""
    conds = None if cond is None else np.asarray(cond, dtype=np.float32)[None]
    return sample_batch(model, conds, size, scfg, sched, count=1)[0]


# ---------------------------------------------------------------------------
# the attack trainer


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox([seed, epoch]))
    return rng.permutation(n)


def _write_loss_csv(path: Path, rows: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in rows:
            writer.writerow([step, f"{loss:.8f}"])


def _file_fingerprint(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def save_checkpoint(path, model: Denoiser, sched: NoiseSchedule, cfg: TrainConfig,
                    scheme: SchemeConfig, embedder_fingerprint: str, image_size: int,
                    stage: str, seed: int, parent: str | None = None) -> Path:
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.cfg.to_dict(),
        "state_dict": model.state_dict(),
        "schedule": sched.to_dict(),
        "train_config": cfg.to_dict(),
        "scheme": scheme.to_dict(),
        "embedder_fingerprint": embedder_fingerprint,
        "image_size": image_size,
        "stage": stage,
        "parent": parent,
        "seed": seed,
        "versions": {
            "cipherbreak": __version__,
            "torch": str(torch.__version__),
            "numpy": str(np.__version__),
        },
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[Denoiser, NoiseSchedule, dict]:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    sched = NoiseSchedule.from_dict(payload["schedule"])
    model = Denoiser(DenoiserConfig.from_dict(payload["model_config"]), sched.T)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return model, sched, meta


def _run_stage(model, optimizer, manifest, scheme, embedder, cfg, sched,
               generator, seed, progress=None) -> list[tuple[int, float]]:
    plain = manifest.load_all_plain()
    n = plain.shape[0]
    x0_all = torch.from_numpy(np.stack([to_model(img) for img in plain])).permute(0, 3, 1, 2)
    rows = []
    epoch = -1
    order = np.zeros(0, dtype=np.int64)
    pos = 0
    key = None
    for step in range(cfg.steps):
        if pos + cfg.batch > order.size:
            epoch += 1
            order = _epoch_order(seed, epoch, n)
            while order.size < cfg.batch:  # tiny datasets: repeat within epoch
                order = np.concatenate([order, _epoch_order(seed, epoch, n)])
            pos = 0
            key = manifest.epoch_key(epoch)
        idx = order[pos : pos + cfg.batch]
        pos += cfg.batch
        enc = np.stack([encrypt(plain[i], key, scheme) for i in idx])
        cond = torch.from_numpy(embedder.embed_batch(enc))
        loss, _ = train_step(model, optimizer, x0_all[idx], cond, cfg, sched, generator)
        rows.append((step, loss))
        if progress is not None and (step + 1) % 200 == 0:
            progress(step + 1, cfg.steps, loss)
    return rows


def train_attack(manifest, embedder, embedder_fingerprint: str, cfg: TrainConfig,
                 model_cfg: DenoiserConfig, sched: NoiseSchedule, out_dir,
                 seed: int = 0, progress=None) -> dict:
    """Train the reconstruction attack; writes checkpoints and loss CSVs.

    Returns {"checkpoint": final_path, "stage1": optional_path}. Under the
    two-stage curriculum the model first trains on scramble-only
    encryptions, then continues on the full cipher, and the stage-2
    checkpoint records the stage-1 file fingerprint as its parent.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(manifest) == 0:
        raise DataError("training manifest has no entries")
    if cfg.stage == "two_stage_etc" and manifest.scheme.scheme != "etc":
        raise DataError("the two-stage curriculum applies to the etc scheme only")

    torch.manual_seed(seed)
    model = Denoiser(model_cfg, sched.T)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    generator = torch.Generator().manual_seed(seed + 1)

    if cfg.stage == "single":
        rows = _run_stage(model, optimizer, manifest, manifest.scheme, embedder,
                          cfg, sched, generator, seed, progress)
        _write_loss_csv(out_dir / "train_log.csv", rows)
        path = save_checkpoint(out_dir / "checkpoint.pt", model, sched, cfg,
                               manifest.scheme, embedder_fingerprint,
                               manifest.image_size, "single", seed)
        return {"checkpoint": path, "stage1": None, "final_loss": rows[-1][1]}

    stage1_scheme = replace(manifest.scheme, scramble_only=True)
    rows1 = _run_stage(model, optimizer, manifest, stage1_scheme, embedder,
                       cfg, sched, generator, seed, progress)
    _write_loss_csv(out_dir / "train_log_stage1.csv", rows1)
    stage1_path = save_checkpoint(out_dir / "checkpoint_stage1.pt", model, sched, cfg,
                                  stage1_scheme, embedder_fingerprint,
                                  manifest.image_size, "stage1", seed)
    rows2 = _run_stage(model, optimizer, manifest, manifest.scheme, embedder,
                       cfg, sched, generator, seed, progress)
    _write_loss_csv(out_dir / "train_log_stage2.csv", rows2)
    final_path = save_checkpoint(out_dir / "checkpoint.pt", model, sched, cfg,
                                 manifest.scheme, embedder_fingerprint,
                                 manifest.image_size, "stage2", seed,
                                 parent=_file_fingerprint(stage1_path))
    return {"checkpoint": final_path, "stage1": stage1_path, "final_loss": rows2[-1][1]}
