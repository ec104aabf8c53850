"""Evaluation metrics: CCC for VAD regression, binary classification metrics,
and Youden-J threshold selection.

CCC uses population (1/n) moments throughout so results are exactly
reproducible: ccc = 2*cov / (var_p + var_g + (mean_p - mean_g)^2).
The positive class for all binary metrics is "inconsistent" (label 1).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

VAD_DIMS = ("v", "a", "d")


def ccc(pred, gold) -> float:
    """Concordance correlation coefficient with population moments."""
    pred = np.asarray(pred, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    if pred.shape != gold.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gold.shape}")
    if pred.size < 2:
        raise ValueError("need at least 2 samples")
    mean_p, mean_g = pred.mean(), gold.mean()
    var_p = np.mean((pred - mean_p) ** 2)
    var_g = np.mean((gold - mean_g) ** 2)
    cov = np.mean((pred - mean_p) * (gold - mean_g))
    denom = var_p + var_g + (mean_p - mean_g) ** 2
    if denom == 0.0:
        warnings.warn("degenerate CCC: both sequences constant and equal; returning 0")
        return 0.0
    return float(2.0 * cov / denom)


def binary_metrics(scores, labels, tau: float) -> dict:
    """Accuracy/precision/recall/F1 at threshold tau (score >= tau -> positive).

    Zero-denominator metrics come back as 0.0 with `degenerate` naming them.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    if scores.size < 1:
        raise ValueError("need at least 1 sample")
    pred = (scores >= tau).astype(np.int64)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    degenerate = []
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        degenerate.append("precision")
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        degenerate.append("recall")
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        degenerate.append("f1")
    return {
        "accuracy": (tp + tn) / scores.size,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
        "degenerate": degenerate,
    }


def _youden_j(scores, labels, tau: float) -> float:
    pred = scores >= tau
    pos = labels == 1
    neg = ~pos
    sens = np.sum(pred & pos) / np.sum(pos)
    spec = np.sum(~pred & neg) / np.sum(neg)
    return float(sens + spec - 1.0)


def youden_threshold(scores, labels) -> float:
    """Threshold maximizing J = sensitivity + specificity - 1.

    Candidates are the midpoints between consecutive distinct sorted scores
    plus the endpoints 0 and 1, which covers every level set of the step
    function J; ties resolve to the smallest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    if len(np.unique(labels)) < 2:
        raise ValueError("youden_threshold needs both classes present")
    uniq = np.unique(scores)
    candidates = np.concatenate(([0.0], (uniq[:-1] + uniq[1:]) / 2.0, [1.0]))
    best_tau, best_j = None, -np.inf
    for tau in candidates:
        j = _youden_j(scores, labels, float(tau))
        if j > best_j + 1e-15:
            best_tau, best_j = float(tau), j
    return best_tau


@dataclass
class EvalReport:
    """CCC per dimension plus optional binary-classification block."""

    ccc: dict[str, float] = field(default_factory=dict)   # keys v/a/d + avg
    binary: dict[str, float] = field(default_factory=dict)
    tau_star: float | None = None

    def __post_init__(self):
        if self.ccc and "avg" not in self.ccc:
            dims = [self.ccc[d] for d in VAD_DIMS if d in self.ccc]
            self.ccc["avg"] = float(np.mean(dims)) if dims else 0.0

    def as_text(self) -> str:
        lines = []
        for dim, val in self.ccc.items():
            lines.append(f"ccc.{dim}={val:.6f}")
        for key in ("accuracy", "f1", "precision", "recall"):
            if key in self.binary:
                lines.append(f"binary.{key}={self.binary[key]:.6f}")
        if self.tau_star is not None:
            lines.append(f"tau_star={self.tau_star:.6f}")
        return "\n".join(lines)

    def as_json(self) -> str:
        payload = {"ccc": self.ccc, "binary": self.binary, "tau_star": self.tau_star}
        return json.dumps(payload, sort_keys=True)


def regression_report(pred_vads, gold_vads) -> EvalReport:
    """Per-dimension CCC report from (n, 3) prediction/gold arrays."""
    pred = np.asarray(pred_vads, dtype=np.float64)
    gold = np.asarray(gold_vads, dtype=np.float64)
    per_dim = {dim: ccc(pred[:, k], gold[:, k]) for k, dim in enumerate(VAD_DIMS)}
    return EvalReport(ccc=per_dim)
