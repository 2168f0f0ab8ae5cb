"""Classification, calibration, and AUC-comparison statistics.

AUC is the Mann-Whitney pair-count form (exact at desk scale), average
precision integrates precision over recall steps, and the DeLong test uses
the structural-components covariance estimate with mid-rank tie handling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats


def _check_binary(labels: np.ndarray) -> None:
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise ValueError("need both classes present")


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), by exhaustive pair counting."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    cmp = pos[:, None] - neg[None, :]
    return float(((cmp > 0).sum() + 0.5 * (cmp == 0).sum()) / (len(pos) * len(neg)))


def prc_auc(scores, labels) -> float:
    """Average precision: step-wise integral of precision over recall."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise ValueError("need at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        tp += int((y[i:j] == 1).sum())
        fp += int((y[i:j] == 0).sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(ap)


def brier_score(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return float(((scores - labels) ** 2).mean())


@dataclass
class CalibrationBin:
    mean_predicted: float
    observed_frequency: float
    count: int


def calibration_curve(scores, labels, bins: int = 10):
    """Equal-width probability bins; returns ``(bin table, brier)``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if np.any(scores < 0) or np.any(scores > 1):
        raise ValueError("scores must be probabilities in [0, 1]")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.digitize(scores, edges[1:-1]), 0, bins - 1)
    table = []
    for b in range(bins):
        mask = idx == b
        n = int(mask.sum())
        if n:
            table.append(CalibrationBin(float(scores[mask].mean()),
                                        float(labels[mask].mean()), n))
        else:
            table.append(CalibrationBin(float((edges[b] + edges[b + 1]) / 2), 0.0, 0))
    return table, brier_score(scores, labels)


@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    specificity: float
    auc: float
    prc: float
    brier: float
    tp: int
    fp: int
    fn: int
    tn: int
    n: int
    threshold: float = 0.5
    calibration: list = field(default_factory=list)

    def to_text(self) -> str:
        """Key-value serialization consumed by the CLI and UI."""
        lines = [f"metric.{k} = {getattr(self, k):.6f}" for k in
                 ("accuracy", "precision", "recall", "f1", "specificity",
                  "auc", "prc", "brier")]
        lines += [f"count.{k} = {getattr(self, k)}" for k in ("tp", "fp", "fn", "tn", "n")]
        lines.append(f"threshold = {self.threshold}")
        for i, b in enumerate(self.calibration):
            lines.append(f"bin.{i} = {b.mean_predicted:.6f},{b.observed_frequency:.6f},{b.count}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = {}
        bins = []
        for line in text.strip().splitlines():
            key, _, value = line.partition(" = ")
            if key.startswith("bin."):
                mp, of, c = value.split(",")
                bins.append(CalibrationBin(float(mp), float(of), int(c)))
            else:
                kv[key] = value
        return cls(
            accuracy=float(kv["metric.accuracy"]), precision=float(kv["metric.precision"]),
            recall=float(kv["metric.recall"]), f1=float(kv["metric.f1"]),
            specificity=float(kv["metric.specificity"]), auc=float(kv["metric.auc"]),
            prc=float(kv["metric.prc"]), brier=float(kv["metric.brier"]),
            tp=int(kv["count.tp"]), fp=int(kv["count.fp"]), fn=int(kv["count.fn"]),
            tn=int(kv["count.tn"]), n=int(kv["count.n"]),
            threshold=float(kv["threshold"]), calibration=bins)


def threshold_report(scores, labels, threshold: float = 0.5, bins: int = 10) -> EvalReport:
    """All scalar metrics from the 2x2 table at the given operating point."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    n = len(labels)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    specificity = tn / (tn + fp) if tn + fp else 0.0
    both_classes = np.any(labels == 1) and np.any(labels == 0)
    cal, brier = calibration_curve(scores, labels, bins)
    return EvalReport(
        accuracy=(tp + tn) / n,
        precision=precision, recall=recall, f1=f1, specificity=specificity,
        auc=roc_auc(scores, labels) if both_classes else float("nan"),
        prc=prc_auc(scores, labels) if np.any(labels == 1) else float("nan"),
        brier=brier, tp=tp, fp=fp, fn=fn, tn=tn, n=n, threshold=threshold,
        calibration=cal)


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x)
    z = x[order]
    n = len(x)
    ranks = np.zeros(n)
    i = 0
    while i < n:
        j = i
        while j < n and z[j] == z[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j - 1) + 1
        i = j
    out = np.empty(n)
    out[order] = ranks
    return out


@dataclass
class DeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p: float
    degenerate: bool = False


def delong_test(scores_a, scores_b, labels) -> DeLongResult:
    """Two-sided DeLong comparison of two correlated AUCs on paired scores."""
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    pos_mask = labels == 1
    m, n = int(pos_mask.sum()), int((~pos_mask).sum())

    v01 = np.empty((2, m))
    v10 = np.empty((2, n))
    aucs = np.empty(2)
    for r, s in enumerate((scores_a, scores_b)):
        tx = _midranks(s[pos_mask])
        ty = _midranks(s[~pos_mask])
        tz = _midranks(np.concatenate([s[pos_mask], s[~pos_mask]]))
        aucs[r] = (tz[:m].sum() / m - (m + 1) / 2.0) / n
        v01[r] = (tz[:m] - tx) / n
        v10[r] = 1.0 - (tz[m:] - ty) / m
    s01 = np.cov(v01)
    s10 = np.cov(v10)
    cov = s01 / m + s10 / n
    var = cov[0, 0] + cov[1, 1] - 2 * cov[0, 1]
    if var <= 1e-16:
        return DeLongResult(float(aucs[0]), float(aucs[1]), 0.0, 1.0, degenerate=True)
    z = float((aucs[0] - aucs[1]) / np.sqrt(var))
    p = float(2.0 * stats.norm.sf(abs(z)))
    return DeLongResult(float(aucs[0]), float(aucs[1]), z, p)
