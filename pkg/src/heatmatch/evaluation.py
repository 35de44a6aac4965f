"""Match extraction, geodesic-error curves, and report files.

The error curve plots, for a grid of normalized-distance thresholds, the
fraction of source vertices whose predicted match lies within that
geodesic distance of the ground-truth match on the target shape. A perfect
map is the constant curve at 1. Errors are normalized by sqrt(target total
area), which is 1 after unit-area normalization; numbers are therefore
comparable across this toolkit's runs only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .corrnet import SoftCorrespondence
from .errors import EvaluationError
from .geodesic import geodesic_rows
from .mesh import TriMesh, compute_metrics

__all__ = [
    "PointMap",
    "ErrorCurve",
    "extract_matches",
    "match_errors",
    "errors_to_curve",
    "error_curve",
    "default_grid",
    "write_curve_csv",
    "write_curves_svg",
    "write_summary_json",
]


@dataclass(frozen=True)
class PointMap:
    matches: np.ndarray     # (N_s,) target vertex per source vertex
    confidence: np.ndarray  # (N_s,) probability mass of the argmax


@dataclass(frozen=True)
class ErrorCurve:
    thresholds: np.ndarray
    fractions: np.ndarray
    auc: float


def extract_matches(soft: SoftCorrespondence) -> PointMap:
    """Argmax decoding of the column-stochastic soft map; ties -> smallest index."""
    q = soft.soft_map
    matches = np.argmax(q, axis=0)
    confidence = q[matches, np.arange(q.shape[1])]
    return PointMap(matches=matches.astype(np.int64), confidence=confidence)


def default_grid() -> np.ndarray:
    return np.round(np.arange(0, 101) * 0.0025, 6)


def match_errors(point_map: PointMap, ground_truth, target_mesh: TriMesh) -> np.ndarray:
    """Normalized geodesic distance between predicted and true matches."""
    ground_truth = np.asarray(ground_truth, dtype=np.int64)
    n_t = target_mesh.n_vertices
    if point_map.matches.shape != ground_truth.shape:
        raise EvaluationError(
            f"ground truth covers {ground_truth.shape[0]} vertices, "
            f"map covers {point_map.matches.shape[0]}")
    if ground_truth.min() < 0 or ground_truth.max() >= n_t:
        raise EvaluationError(f"ground-truth index out of range [0, {n_t})")
    unique_gt, inverse = np.unique(ground_truth, return_inverse=True)
    rows = geodesic_rows(target_mesh, unique_gt)
    errors = rows[inverse, point_map.matches]
    return errors / np.sqrt(compute_metrics(target_mesh).total_area)


def errors_to_curve(errors: np.ndarray, grid: np.ndarray | None = None) -> ErrorCurve:
    """Cumulative fraction of errors below each threshold, plus trapezoidal AUC."""
    if grid is None:
        grid = default_grid()
    errors = np.asarray(errors, dtype=np.float64)
    fractions = np.mean(errors[None, :] <= grid[:, None], axis=1)
    span = grid[-1] - grid[0]
    auc = float(np.trapz(fractions, grid) / span)
    return ErrorCurve(thresholds=grid, fractions=fractions, auc=auc)


def error_curve(point_map: PointMap, ground_truth, target_mesh: TriMesh,
                grid: np.ndarray | None = None) -> ErrorCurve:
    return errors_to_curve(match_errors(point_map, ground_truth, target_mesh), grid)


def write_curve_csv(curve: ErrorCurve, path) -> None:
    with open(path, "w") as fh:
        fh.write("threshold,fraction\n")
        for t, f in zip(curve.thresholds, curve.fractions):
            fh.write(f"{t:.6g},{f:.6g}\n")


def write_curves_svg(curves: dict, path, title: str = "Correspondence accuracy") -> None:
    """Line plot of one or more error curves (fraction correct vs threshold)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.4, 4.0))
    for label, curve in curves.items():
        ax.plot(curve.thresholds, curve.fractions, label=f"{label} (auc {curve.auc:.3f})")
    ax.set_xlabel("normalized geodesic error threshold")
    ax.set_ylabel("fraction of correct correspondences")
    ax.set_ylim(0.0, 1.02)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_summary_json(curve: ErrorCurve, errors: np.ndarray, path) -> None:
    summary = {
        "auc": curve.auc,
        "mean_error": float(np.mean(errors)),
        "median_error": float(np.median(errors)),
    }
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
