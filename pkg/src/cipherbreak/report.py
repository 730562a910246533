"""Aggregation figures and delimited output for completed runs.

Every figure is rendered to a static PNG next to the CSV it was drawn
from; there is no interactive path. Box plots follow the quartile
convention used across the score reports: boxes span Q1..Q3, whiskers
cover data inside [Q1 - 1.5*IQR, Q3 + 1.5*IQR], the band is the median,
the cross is the mean, and dots are outliers.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError

# strip the Software tag so regenerated PNGs are byte-identical
_PNG_META = {"Software": ""}


def write_matrix_csv(path, matrix: np.ndarray, labels: list[str]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + labels)
        for lab, row in zip(labels, np.asarray(matrix)):
            writer.writerow([lab] + [f"{v:.8f}" for v in row])
    return path


def read_matrix_csv(path) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: not a labelled matrix CSV")
    labels = rows[0][1:]
    mat = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    if mat.shape != (len(labels), len(labels)):
        raise DataError(f"{path}: matrix shape {mat.shape} does not match labels")
    return mat, labels


def similarity_heatmap(matrix: np.ndarray, labels: list[str], out_png) -> Path:
    out_png = Path(out_png)
    fig, ax = plt.subplots(figsize=(1.1 * len(labels) + 2, 1.0 * len(labels) + 1.5))
    im = ax.imshow(matrix, vmin=-1.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    for i in range(len(labels)):
        for j in range(len(labels)):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center",
                    color="white" if matrix[i, j] < 0.5 else "black", fontsize=8)
    fig.colorbar(im, ax=ax, label="cosine similarity")
    ax.set_title("embedding similarity")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return out_png


def score_boxplot(groups: list[tuple[str, np.ndarray]], out_png, ylabel: str = "LPIPS-proxy") -> Path:
    if not groups:
        raise DataError("no score groups to plot")
    out_png = Path(out_png)
    fig, ax = plt.subplots(figsize=(2 + 1.2 * len(groups), 4.5))
    data = [np.asarray(v, dtype=np.float64) for _, v in groups]
    ax.boxplot(
        data,
        tick_labels=[name for name, _ in groups],
        whis=1.5,
        showmeans=True,
        meanprops={"marker": "x", "markeredgecolor": "black"},
        flierprops={"marker": ".", "markersize": 4},
    )
    ax.set_ylabel(ylabel)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return out_png


def loss_curve_plot(csv_path, out_png, window: int = 100) -> Path:
    csv_path = Path(csv_path)
    steps, losses = [], []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
    out_png = Path(out_png)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, alpha=0.3, label="loss")
    if len(losses) >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1 :], smooth, label=f"mean({window})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return out_png


def _read_scores_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: empty scores file")
    return [r["id"] for r in rows], np.array([float(r["lpips_proxy"]) for r in rows])


def aggregate_runs(run_dirs: list, out_dir) -> dict:
    """Collect scores.csv / similarity CSVs from run dirs into one report.

    Writes report_summary.csv plus a box plot over every scores.csv found
    and a heatmap for every similarity matrix found. Deterministic given
    the stored CSVs. Returns the artifact paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = []
    heatmaps = []
    missing = []
    for run in run_dirs:
        run = Path(run)
        found = False
        for scores in sorted(run.rglob("scores.csv")):
            _, vals = _read_scores_csv(scores)
            groups.append((f"{run.name}/{scores.parent.name}", vals))
            found = True
        for sim in sorted(run.rglob("similarity_*.csv")):
            if sim.name.endswith("_stats.csv"):
                continue
            mat, labels = read_matrix_csv(sim)
            png = out_dir / (sim.stem + ".png")
            similarity_heatmap(mat, labels, png)
            heatmaps.append(png)
            found = True
        if not found:
            missing.append(str(run))
    if missing:
        raise DataError(f"no score or similarity artifacts under: {', '.join(missing)}")

    artifacts: dict = {"heatmaps": heatmaps}
    from .metrics import summarize

    summary_path = out_dir / "report_summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "n", "mean", "median", "q1", "q3", "whisker_lo", "whisker_hi", "n_outliers"])
        for name, vals in groups:
            s = summarize(vals)
            writer.writerow([
                name, len(vals), f"{s['mean']:.8f}", f"{s['median']:.8f}",
                f"{s['q1']:.8f}", f"{s['q3']:.8f}", f"{s['whisker_lo']:.8f}",
                f"{s['whisker_hi']:.8f}", len(s["outliers"]),
            ])
    artifacts["summary"] = summary_path
    if groups:
        artifacts["boxplot"] = score_boxplot(groups, out_dir / "score_boxplot.png")
    return artifacts
