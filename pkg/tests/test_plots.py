"""The figure helpers must render nonempty files for every history shape."""

import numpy as np

from m2malign.metrics import MetricsReport
from m2malign.plots import save_fold_metrics, save_heatmap, save_loss_curves


def test_loss_curves_with_all_terms(tmp_path):
    history = [
        {"epoch": e, "ce": 1.0 / (e + 1), "m2m": 2.0 / (e + 1), "total": 1.2, "lr": 0.001}
        for e in range(4)
    ]
    path = save_loss_curves(tmp_path / "loss.png", history)
    assert path.stat().st_size > 0


def test_loss_curves_for_alignment_only_history(tmp_path):
    history = [{"epoch": e, "m2m": 3.0 - e, "lr": 0.001} for e in range(3)]
    assert save_loss_curves(tmp_path / "loss.png", history).stat().st_size > 0


def test_fold_metric_bars(tmp_path):
    report = MetricsReport()
    report.add_fold(pr_auc=0.8, roc_auc=0.9, accuracy=0.7)
    report.add_fold(pr_auc=0.6, roc_auc=0.8, accuracy=0.9)
    assert save_fold_metrics(tmp_path / "folds.png", report).stat().st_size > 0


def test_heatmap(tmp_path):
    matrix = np.random.default_rng(0).random((5, 7))
    path = save_heatmap(tmp_path / "h.png", matrix, title="scores", xlabel="k", ylabel="q")
    assert path.stat().st_size > 0
