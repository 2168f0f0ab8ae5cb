"""Report figures: ROC/PRC, calibration, training curves, group boxplots,
and Kaplan-Meier plots, written as PNG files next to the delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalReport, prc_auc, roc_auc
from .tme import KmCurve


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def roc_points(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="stable")
    y = labels[order]
    tpr = [0.0]
    fpr = [0.0]
    tp = fp = 0
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    i = 0
    s = scores[order]
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        tp += int((y[i:j] == 1).sum())
        fp += int((y[i:j] == 0).sum())
        tpr.append(tp / n_pos)
        fpr.append(fp / n_neg)
        i = j
    return np.asarray(fpr), np.asarray(tpr)


def roc_figure(scores, labels, path: Path, title: str = "ROC") -> Path:
    fpr, tpr = roc_points(scores, labels)
    fig, ax = plt.subplots(figsize=(4.5, 4.2))
    ax.plot(fpr, tpr, lw=1.8, label=f"AUC = {roc_auc(scores, labels):.4f}")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="gray")
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.set_title(title)
    ax.legend(loc="lower right")
    return _save(fig, path)


def prc_figure(scores, labels, path: Path, title: str = "PRC") -> Path:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="stable")
    y = labels[order]
    n_pos = int((labels == 1).sum())
    precision, recall = [], []
    tp = fp = 0
    for i in range(len(y)):
        tp += int(y[i] == 1)
        fp += int(y[i] == 0)
        precision.append(tp / (tp + fp))
        recall.append(tp / n_pos)
    fig, ax = plt.subplots(figsize=(4.5, 4.2))
    ax.plot(recall, precision, lw=1.8, label=f"AP = {prc_auc(scores, labels):.4f}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    ax.legend(loc="lower left")
    return _save(fig, path)


def calibration_figure(report: EvalReport, path: Path, title: str = "Calibration") -> Path:
    bins = [b for b in report.calibration if b.count > 0]
    fig, ax = plt.subplots(figsize=(4.5, 4.2))
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="gray")
    ax.plot([b.mean_predicted for b in bins], [b.observed_frequency for b in bins],
            marker="o", lw=1.4, label=f"Brier = {report.brier:.4f}")
    ax.set_xlabel("mean predicted probability")
    ax.set_ylabel("observed frequency")
    ax.set_title(title)
    ax.legend(loc="upper left")
    return _save(fig, path)


def training_curve_figure(log: list, path: Path, title: str = "Training") -> Path:
    epochs = [e["epoch"] for e in log]
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.plot(epochs, [e["train_loss"] for e in log], label="train loss", lw=1.4)
    ax.plot(epochs, [e["val_loss"] for e in log], label="val loss", lw=1.4)
    ax2 = ax.twinx()
    ax2.plot(epochs, [e["val_acc"] for e in log], label="val acc",
             color="tab:green", lw=1.0, ls=":")
    ax2.set_ylabel("val accuracy")
    ax2.set_ylim(0, 1.05)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(loc="upper right")
    return _save(fig, path)


def group_box_figure(groups: dict, path: Path, indicator: str, p_value: float | None = None) -> Path:
    """Boxplot of one TME indicator across labelled groups."""
    names = list(groups)
    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(names), 4.0))
    ax.boxplot([groups[n] for n in names], tick_labels=names)
    title = indicator if p_value is None else f"{indicator} (p = {p_value:.3g})"
    ax.set_title(title)
    ax.set_ylabel(indicator)
    return _save(fig, path)


def km_figure(curves: list[KmCurve], names: list[str], path: Path,
              p_value: float | None = None, title: str = "Survival") -> Path:
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    for curve, name in zip(curves, names):
        xs = np.concatenate([[0.0], np.repeat(curve.times, 2)])
        ys = np.concatenate([[1.0, 1.0], np.repeat(curve.survival, 2)[:-1]]) \
            if len(curve.times) else np.asarray([1.0])
        if len(curve.times):
            ax.plot(xs, ys, lw=1.6, label=name)
        else:
            ax.axhline(1.0, lw=1.6, label=name)
    ax.set_xlabel("time (days)")
    ax.set_ylabel("survival probability")
    ax.set_ylim(0, 1.05)
    if p_value is not None:
        ax.text(0.62, 0.08, f"log-rank p = {p_value:.4g}", transform=ax.transAxes)
    ax.set_title(title)
    ax.legend(loc="lower left")
    return _save(fig, path)
