"""Per-edge model quality metrics and predicted-vs-actual coverage matrices.

Every metric is computed per bitmap column and then macro-averaged, so a
model that ignores rare edges is not rewarded by the easy majority class.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .coverage import CoverageBitmap
from . import smoothing

TABLE_COLUMNS = ["target", "covered_edges_pct", "accuracy", "precision", "recall", "f1", "pr_auc"]


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


@dataclass
class EdgeMetrics:
    per_edge: dict[str, list[float]]
    accuracy: float
    precision: float
    recall: float
    f1: float
    pr_auc: float
    pr_auc_excluded: int
    num_edges: int
    num_samples: int
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "pr_auc": self.pr_auc,
            "pr_auc_excluded": self.pr_auc_excluded,
            "num_edges": self.num_edges,
            "num_samples": self.num_samples,
            "per_edge": self.per_edge,
        }


def pr_auc_single(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision-recall curve for one edge.

    Every distinct score is a threshold (predict positive when
    ``score >= t``); the curve starts at (recall 0, precision 1) and is
    integrated with the trapezoidal rule over recall.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    if n_pos == 0:
        raise ValueError("PR curve undefined without positive labels")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    recall = np.r_[0.0, tp[last] / n_pos]
    precision = np.r_[1.0, tp[last] / (tp[last] + fp[last])]
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))


def pr_auc(scores: np.ndarray, labels: np.ndarray) -> tuple[float, int, list[float | None]]:
    """Macro PR-AUC over columns of ``(samples, edges)`` matrices.

    Returns ``(mean, excluded, per_edge)``; edges with no positive label are
    excluded from the mean and reported as ``None``.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels))
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    per_edge: list[float | None] = []
    for j in range(scores.shape[1]):
        per_edge.append(pr_auc_single(scores[:, j], labels[:, j]) if labels[:, j].any() else None)
    defined = [v for v in per_edge if v is not None]
    return (float(np.mean(defined)) if defined else 0.0), len(per_edge) - len(defined), per_edge


def metrics_from_scores(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> EdgeMetrics:
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels)).astype(bool)
    if scores.shape != y.shape:
        raise ValueError(f"prediction shape {scores.shape} does not match labels {y.shape}")
    pred = scores >= threshold
    tp = (pred & y).sum(axis=0)
    fp = (pred & ~y).sum(axis=0)
    fn = (~pred & y).sum(axis=0)
    tn = (~pred & ~y).sum(axis=0)
    acc = _safe_div(tp + tn, tp + tn + fp + fn)
    prec = _safe_div(tp, tp + fp)
    rec = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * prec * rec, prec + rec)
    auc, excluded, auc_per_edge = pr_auc(scores, y)
    return EdgeMetrics(
        per_edge={
            "accuracy": acc.tolist(),
            "precision": prec.tolist(),
            "recall": rec.tolist(),
            "f1": f1.tolist(),
            "pr_auc": auc_per_edge,
        },
        accuracy=float(acc.mean()),
        precision=float(prec.mean()),
        recall=float(rec.mean()),
        f1=float(f1.mean()),
        pr_auc=auc,
        pr_auc_excluded=excluded,
        num_edges=y.shape[1],
        num_samples=y.shape[0],
    )


def evaluate(model, X: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> EdgeMetrics:
    """Score ``model`` on encoded holdout inputs ``X`` against bitmap rows ``labels``."""
    labels = np.atleast_2d(np.asarray(labels))
    if model.num_outputs != labels.shape[1]:
        raise ValueError(f"model has {model.num_outputs} outputs but bitmap has {labels.shape[1]} columns")
    return metrics_from_scores(model.predict(X), labels, threshold)


def coverage_heatmaps(model, corpus: Sequence[bytes], bitmap: CoverageBitmap, threshold: float = 0.5):
    """(predicted, actual) test case x column matrices, both 0/1."""
    if model.num_outputs != bitmap.num_columns:
        raise ValueError("model and bitmap disagree on the number of columns")
    predicted = (model.predict_inputs(corpus) >= threshold).astype(np.uint8)
    return predicted, bitmap.rows.copy()


def mutation_reachability(model, corpus: Sequence[bytes], k: int = 500,
                          pattern: smoothing.PatternConfig = smoothing.PatternConfig(),
                          threshold: float = 0.5, seed: int = 0) -> np.ndarray:
    """Model-estimated coverage gain from gradient mutations.

    Cell (i, e) is 1 when some mutation of test case i aimed at column e is
    predicted to cover e although the unmutated input is not. Nothing is
    executed on the program.
    """
    rng = np.random.default_rng(seed)
    E = model.num_outputs
    gain = np.zeros((len(corpus), E), dtype=np.uint8)
    base = model.predict_inputs(corpus) >= threshold if len(corpus) else np.zeros((0, E), bool)
    for i, data in enumerate(corpus):
        for e in range(E):
            if base[i, e]:
                continue
            plan = smoothing.plan_mutations(model, data, e, k, rng, pattern)
            if plan.generated_inputs and (model.predict_inputs(list(plan.generated_inputs))[:, e] >= threshold).any():
                gain[i, e] = 1
    return gain


def matrix_csv(matrix: np.ndarray, row_ids: Sequence[str], edge_index) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case"] + [" ".join(map(str, g)) for g in edge_index])
    for rid, row in zip(row_ids, matrix):
        w.writerow([rid] + [int(v) for v in row])
    return buf.getvalue()


def metrics_table_csv(rows: Sequence[dict]) -> str:
    """Table of macro metrics, one row per target/model.

    Each row needs ``target``, ``covered_edges_pct`` and an :class:`EdgeMetrics`
    under ``metrics``.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for r in rows:
        m = r["metrics"]
        w.writerow([r["target"], f"{r['covered_edges_pct']:.4f}", f"{m.accuracy:.4f}", f"{m.precision:.4f}",
                    f"{m.recall:.4f}", f"{m.f1:.4f}", f"{m.pr_auc:.4f}"])
    return buf.getvalue()
