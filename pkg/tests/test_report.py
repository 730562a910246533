import numpy as np
import pytest

from cipherbreak.errors import DataError
from cipherbreak.report import (
    aggregate_runs,
    loss_curve_plot,
    read_matrix_csv,
    score_boxplot,
    similarity_heatmap,
    write_matrix_csv,
)


def test_matrix_csv_round_trip(tmp_path):
    mat = np.array([[1.0, 0.25], [0.25, 1.0]])
    labels = ["plain", "etc(K1)"]
    path = write_matrix_csv(tmp_path / "similarity_etc.csv", mat, labels)
    again, labels2 = read_matrix_csv(path)
    assert labels2 == labels
    assert np.allclose(again, mat)
    # regeneration is byte-identical
    first = path.read_bytes()
    write_matrix_csv(path, mat, labels)
    assert path.read_bytes() == first


def test_heatmap_and_boxplot_rendered(tmp_path):
    mat = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, 0.9], [0.2, 0.9, 1.0]])
    png = similarity_heatmap(mat, ["a", "b", "c"], tmp_path / "heat.png")
    assert png.stat().st_size > 1000
    rng = np.random.default_rng(0)
    box = score_boxplot([("recon", rng.uniform(0, 1, 50)), ("enc", rng.uniform(1, 2, 50))],
                        tmp_path / "box.png")
    assert box.stat().st_size > 1000


def test_loss_curve_plot(tmp_path):
    csv_path = tmp_path / "train_log.csv"
    rows = ["step,loss"] + [f"{i},{1.0 / (i + 1):.6f}" for i in range(250)]
    csv_path.write_text("\n".join(rows) + "\n")
    png = loss_curve_plot(csv_path, tmp_path / "loss.png")
    assert png.exists()


def test_aggregate_runs_collects_scores_and_matrices(tmp_path):
    run1 = tmp_path / "run1"
    run1.mkdir()
    (run1 / "scores.csv").write_text(
        "id,lpips_proxy,mse,psnr\n" +
        "".join(f"{i},{0.1 * (i + 1):.8f},1.0,10.0\n" for i in range(8))
    )
    write_matrix_csv(run1 / "similarity_etc.csv", np.eye(2), ["plain", "etc(K1)"])
    # a stats side file must not be mistaken for a matrix
    (run1 / "similarity_etc_stats.csv").write_text("stat,value\nplain_encrypted_mean,0.5\n")
    out = tmp_path / "rep"
    artifacts = aggregate_runs([run1], out)
    assert artifacts["summary"].exists()
    assert (out / "score_boxplot.png").exists()
    assert len(artifacts["heatmaps"]) == 1
    header = artifacts["summary"].read_text().splitlines()[0]
    assert header.startswith("group,n,mean,median,q1,q3")


def test_aggregate_runs_reports_missing_artifacts(tmp_path):
    empty = tmp_path / "empty_run"
    empty.mkdir()
    with pytest.raises(DataError) as err:
        aggregate_runs([empty], tmp_path / "rep")
    assert "empty_run" in str(err.value)
