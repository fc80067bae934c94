"""Point-cloud accuracy, completeness and thresholded f-score."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


def _cloud(x, name: str) -> np.ndarray:
    pts = np.asarray(getattr(x, "points", x), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must be an (N, 3) array, got shape {pts.shape}")
    if len(pts) == 0:
        raise ValueError(f"{name} cloud is empty")
    return pts


def nearest_distances(query, target) -> np.ndarray:
    """Distance from each query point to its nearest target point (k-d tree)."""
    q, t = _cloud(query, "query"), _cloud(target, "target")
    d, _ = cKDTree(t).query(q, k=1)
    return d


def _capped_mean(d: np.ndarray, cap: float | None) -> float:
    if cap is not None:
        d = d[d <= cap]
    return float(d.mean()) if len(d) else float("nan")


def accuracy(pred, gt, outlier_cap: float | None = 20.0) -> float:
    """Mean prediction-to-GT distance; distances above ``outlier_cap`` are excluded."""
    return _capped_mean(nearest_distances(pred, gt), outlier_cap)


def completeness(pred, gt, outlier_cap: float | None = 20.0) -> float:
    """Mean GT-to-prediction distance; distances above ``outlier_cap`` are excluded."""
    return _capped_mean(nearest_distances(gt, pred), outlier_cap)


def precision_recall(pred, gt, threshold: float) -> tuple[float, float]:
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    p = 100.0 * float(np.mean(nearest_distances(pred, gt) <= threshold))
    r = 100.0 * float(np.mean(nearest_distances(gt, pred) <= threshold))
    return p, r


def harmonic(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def fscore(pred, gt, threshold: float) -> float:
    """Harmonic mean of precision and recall (percent) at ``threshold`` mm."""
    return harmonic(*precision_recall(pred, gt, threshold))


@dataclass(frozen=True)
class CloudMetrics:
    accuracy_mm: float
    completeness_mm: float
    overall_mm: float
    precision: float
    recall: float
    fscore: float
    threshold_mm: float
    outlier_cap_mm: float | None
    num_pred: int
    num_gt: int

    def table(self) -> str:
        rows = [
            ("accuracy", f"{self.accuracy_mm:.4f} mm", f"cap {self.outlier_cap_mm}"),
            ("completeness", f"{self.completeness_mm:.4f} mm", f"cap {self.outlier_cap_mm}"),
            ("overall", f"{self.overall_mm:.4f} mm", ""),
            ("precision", f"{self.precision:.2f} %", f"{self.threshold_mm} mm"),
            ("recall", f"{self.recall:.2f} %", f"{self.threshold_mm} mm"),
            ("f-score", f"{self.fscore:.2f} %", f"{self.threshold_mm} mm"),
            ("points", f"{self.num_pred} pred / {self.num_gt} gt", ""),
        ]
        head = f"{'metric':<14}{'value':<24}threshold"
        return "\n".join([head, "-" * len(head)] + [f"{a:<14}{b:<24}{c}" for a, b, c in rows])

    def record(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate(pred, gt, threshold: float = 0.5, outlier_cap: float | None = 20.0) -> CloudMetrics:
    p_pts, g_pts = _cloud(pred, "pred"), _cloud(gt, "gt")
    d_pg = nearest_distances(p_pts, g_pts)
    d_gp = nearest_distances(g_pts, p_pts)
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    acc = _capped_mean(d_pg, outlier_cap)
    comp = _capped_mean(d_gp, outlier_cap)
    p = 100.0 * float(np.mean(d_pg <= threshold))
    r = 100.0 * float(np.mean(d_gp <= threshold))
    return CloudMetrics(acc, comp, (acc + comp) / 2, p, r, harmonic(p, r), threshold, outlier_cap,
                        len(p_pts), len(g_pts))


def append_record(path: str | Path, metrics: CloudMetrics, **extra) -> None:
    rec = json.loads(metrics.record())
    rec.update(extra)
    with open(path, "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
