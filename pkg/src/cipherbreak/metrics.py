"""Perceptual distance proxy and pixel-space baselines.

The proxy follows the layered feature-distance recipe: extract feature
maps from L layers of a frozen network, unit-normalize each spatial
location's channel vector, take channel-scaled squared differences and
average over the spatial grid, then sum the per-layer terms:

    d(a, b) = sum_l (1 / (H_l * W_l)) * sum_{h,w} || w_l * (an - bn) ||_2^2

Here the backbone is the frozen toy_conv embedder's three ReLU stages
with w_l = 1, so scores are self-contained but NOT calibrated to human
judgments; reports label the metric "LPIPS-proxy" and absolute values
are not comparable to scores from pre-trained perceptual backbones.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .imagecore import load_png, require_image

_NORM_EPS = 1e-12


class ToyConvFeatures:
    """Feature source over a frozen toy_conv embedder, unit layer weights."""

    def __init__(self, embedder):
        self._embedder = embedder

    def feature_maps(self, image: np.ndarray) -> list[torch.Tensor]:
        return self._embedder.feature_maps(image)

    def layer_weights(self, maps: list[torch.Tensor]) -> list[torch.Tensor]:
        return [torch.ones(m.shape[0]) for m in maps]


def _unit_normalize(fmap: torch.Tensor) -> torch.Tensor:
    norm = torch.sqrt((fmap * fmap).sum(dim=0, keepdim=True))
    return fmap / (norm + _NORM_EPS)


def lpips(net, a: np.ndarray, b: np.ndarray) -> float:
    """LPIPS-proxy distance; zero iff features coincide, symmetric."""
    require_image(a)
    require_image(b)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")
    fa = net.feature_maps(a)
    fb = net.feature_maps(b)
    weights = net.layer_weights(fa)
    total = 0.0
    for ya, yb, w in zip(fa, fb, weights):
        da = _unit_normalize(ya.double())
        db = _unit_normalize(yb.double())
        diff = w.double()[:, None, None] * (da - db)
        total += float((diff * diff).sum(dim=0).mean())
    return total


def pixel_baselines(a: np.ndarray, b: np.ndarray) -> dict:
    """MSE and PSNR on the 0..255 scale; identical images give psnr=inf."""
    require_image(a)
    require_image(b)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    psnr = math.inf if mse == 0.0 else 10.0 * math.log10(255.0 ** 2 / mse)
    return {"mse": mse, "psnr": psnr}


@dataclass
class ScoreReport:
    """Per-image distances plus the box-plot summary derived from them."""

    ids: list[str]
    lpips_scores: np.ndarray
    mse_scores: np.ndarray
    psnr_scores: np.ndarray

    def summary(self) -> dict:
        return summarize(self.lpips_scores)

    def write_csv(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        scores_path = out_dir / "scores.csv"
        with open(scores_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "lpips_proxy", "mse", "psnr"])
            for i, image_id in enumerate(self.ids):
                writer.writerow([
                    image_id,
                    f"{self.lpips_scores[i]:.8f}",
                    f"{self.mse_scores[i]:.4f}",
                    "inf" if math.isinf(self.psnr_scores[i]) else f"{self.psnr_scores[i]:.4f}",
                ])
        summary_path = out_dir / "summary.csv"
        with open(summary_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stat", "value"])
            for k, v in self.summary().items():
                if k == "outliers":
                    writer.writerow([k, ";".join(f"{x:.8f}" for x in v)])
                else:
                    writer.writerow([k, f"{v:.8f}"])
        return scores_path, summary_path


def summarize(values: np.ndarray) -> dict:
    """Quartile/whisker/outlier summary matching the box-plot convention:
    whiskers are the extreme data points inside [Q1-1.5*IQR, Q3+1.5*IQR]."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DataError("cannot summarize an empty score list")
    q1, median, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_bound = q1 - 1.5 * iqr
    hi_bound = q3 + 1.5 * iqr
    inside = v[(v >= lo_bound) & (v <= hi_bound)]
    outliers = v[(v < lo_bound) | (v > hi_bound)]
    return {
        "mean": float(v.mean()),
        "median": float(median),
        "q1": float(q1),
        "q3": float(q3),
        "whisker_lo": float(inside.min()),
        "whisker_hi": float(inside.max()),
        "outliers": sorted(float(x) for x in outliers),
    }


def score_pairs(net, pairs: list[tuple[str, np.ndarray, np.ndarray]]) -> ScoreReport:
    ids, lp, ms, ps = [], [], [], []
    for image_id, a, b in pairs:
        ids.append(image_id)
        lp.append(lpips(net, a, b))
        base = pixel_baselines(a, b)
        ms.append(base["mse"])
        ps.append(base["psnr"])
    return ScoreReport(ids, np.array(lp), np.array(ms), np.array(ps))


def score_dir(net, plain_dir, recon_dir, out_dir=None) -> ScoreReport:
    """Score same-named images across two directories; mismatches are errors."""
    plain_dir, recon_dir = Path(plain_dir), Path(recon_dir)
    plain = {p.name: p for p in sorted(plain_dir.glob("*.png"))}
    recon = {p.name: p for p in sorted(recon_dir.glob("*.png"))}
    if not plain:
        raise DataError(f"no PNG files under {plain_dir}")
    missing = sorted(set(plain) ^ set(recon))
    if missing:
        raise DataError(f"unmatched files between {plain_dir} and {recon_dir}: {', '.join(missing)}")
    pairs = [(name, load_png(plain[name]), load_png(recon[name])) for name in sorted(plain)]
    report = score_pairs(net, pairs)
    if out_dir is not None:
        report.write_csv(out_dir)
    return report
