"""Gaze error metrics, per-fold aggregation and branch decorrelation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import denormalize_targets
from .ensemble import decode
from .tensor import no_grad


def yawpitch_to_vec(yaw, pitch, paper_literal=False):
    """Unit gaze direction (cos p sin y, sin p, cos p cos y).

    ``paper_literal`` instead returns (cos y sin p, sin y, cos(p)^2), which
    is not unit-norm; it exists only for side-by-side comparison.
    """
    yaw, pitch = np.asarray(yaw, dtype=np.float64), np.asarray(pitch, dtype=np.float64)
    if paper_literal:
        return np.stack([np.cos(yaw) * np.sin(pitch), np.sin(yaw), np.cos(pitch) ** 2], axis=-1)
    cp = np.cos(pitch)
    return np.stack([cp * np.sin(yaw), np.sin(pitch), cp * np.cos(yaw)], axis=-1)


def angular_error_deg(pred, truth, paper_literal=False):
    """Angle in degrees between yaw/pitch pairs given in radians, shape (..., 2)."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    a = yawpitch_to_vec(pred[..., 0], pred[..., 1], paper_literal)
    b = yawpitch_to_vec(truth[..., 0], truth[..., 1], paper_literal)
    if paper_literal:
        a = a / np.linalg.norm(a, axis=-1, keepdims=True)
        b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def euclidean_error_mm(pred, truth, screen_half_extent_mm):
    """Screen-plane distance in mm between normalised points (..., 2)."""
    if screen_half_extent_mm is None:
        raise ValueError("2D error needs the screen half extent in mm")
    s = np.asarray(screen_half_extent_mm, dtype=np.float64)
    if s.size == 0 or np.any(s <= 0):
        raise ValueError(f"invalid screen half extent {screen_half_extent_mm!r}")
    d = (np.asarray(pred) - np.asarray(truth)) * s
    return np.hypot(d[..., 0], d[..., 1])


@dataclass
class Decorrelation:
    matrix: np.ndarray
    undefined: list = field(default_factory=list)

    def to_json(self):
        m = self.matrix.tolist()
        for i, j in self.undefined:
            m[i][j] = None
        return {"matrix": m, "undefined": [list(p) for p in self.undefined]}


def decorrelation_matrix(per_branch_predictions, truths):
    """Pearson correlation of signed error vectors between every branch pair.

    ``per_branch_predictions`` is (n_branches, n_samples, 2). Each branch's
    error vector concatenates its first-axis errors with its second-axis
    errors. Pairs involving a zero-variance branch are flagged as undefined
    and stored as 0.
    """
    preds = np.asarray(per_branch_predictions, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[0] < 2 or preds.shape[1] < 3:
        raise ValueError("decorrelation needs >= 2 branches and >= 3 samples")
    err = (preds - truths[None]).transpose(0, 2, 1).reshape(preds.shape[0], -1)
    centered = err - err.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    n = err.shape[0]
    m = np.eye(n)
    undefined = []
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0 or norms[j] == 0:
                undefined += [(i, j), (j, i)]
                m[i, j] = m[j, i] = 0.0
            else:
                m[i, j] = m[j, i] = float(np.clip(centered[i] @ centered[j] / (norms[i] * norms[j]), -1, 1))
    return Decorrelation(m, undefined)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(model, dataset, indices, batch_size=64):
    """Eval-mode normalised predictions: (full (n, 2), per-branch (N, n, 2))."""
    full, branches = [], []
    with no_grad():
        for start in range(0, len(indices), batch_size):
            batch = dataset.batch(indices[start:start + batch_size])
            out = model.forward(batch, mode="eval")
            full.append(out.full.data)
            branches.append(np.stack([decode(h).data for h in out.heatmaps]))
    return np.concatenate(full), np.concatenate(branches, axis=1)


def sample_errors(pred_norm, dataset, indices, metric_kind, paper_literal=False):
    a = dataset.arrays()
    raw_truth = a["target"][indices]
    if metric_kind == "3d":
        if dataset.target_kind != "gaze3d":
            raise ValueError("3D angular error requested on a 2D dataset")
        pred = denormalize_targets(pred_norm, "gaze3d", dataset.gaze_range)
        return angular_error_deg(pred, raw_truth, paper_literal)
    if metric_kind == "2d":
        if dataset.target_kind != "gaze2d":
            raise ValueError("2D Euclidean error requested on a 3D dataset")
        return euclidean_error_mm(pred_norm, raw_truth, a["screen"][indices])
    raise ValueError(f"unknown metric kind {metric_kind!r}")


@dataclass
class EvalReport:
    metric: str
    unit: str
    per_fold: list
    overall_mean: float
    overall_std: float
    pooled_mean: float
    per_branch_errors: list
    decorrelation: dict
    n_total: int

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n_branches = len(self.per_branch_errors[0]) if self.per_branch_errors else 0
        w.writerow(["fold", "n", f"err ({self.unit})"] + [f"branch{i} err" for i in range(n_branches)])
        for row, br in zip(self.per_fold, self.per_branch_errors):
            w.writerow([row["fold"], row["n"], f"{row['mean']:.6f}"] + [f"{e:.6f}" for e in br])
        w.writerow(["overall", self.n_total, f"{self.overall_mean:.6f}"])
        return buf.getvalue()


def evaluate(models, folds, dataset, metric_kind="3d", paper_literal=False):
    """Evaluate one trained model per fold on that fold's held-out subjects."""
    if len(models) != len(folds):
        raise ValueError(f"{len(models)} models for {len(folds)} folds")
    unit = "deg" if metric_kind == "3d" else "mm"
    per_fold, per_branch, all_errs = [], [], []
    branch_preds, truths = [], []
    for model, fold in zip(models, folds):
        idx = dataset.indices_for_subjects(fold.test_subjects)
        full, branches = predict(model, dataset, idx)
        errs = sample_errors(full, dataset, idx, metric_kind, paper_literal)
        per_fold.append({"fold": fold.fold_id, "test_subjects": list(fold.test_subjects),
                         "n": int(len(idx)), "mean": float(errs.mean())})
        per_branch.append([float(sample_errors(b, dataset, idx, metric_kind, paper_literal).mean())
                           for b in branches])
        all_errs.append(errs)
        branch_preds.append(branches)
        truths.append(dataset.batch(idx).targets)
    fold_means = np.array([f["mean"] for f in per_fold])
    branch_preds = np.concatenate(branch_preds, axis=1)
    truths = np.concatenate(truths)
    if branch_preds.shape[0] >= 2 and branch_preds.shape[1] >= 3:
        decor = decorrelation_matrix(branch_preds, truths).to_json()
    else:
        decor = {"matrix": [[1.0]] if branch_preds.shape[0] == 1 else [], "undefined": []}
    pooled = np.concatenate(all_errs)
    return EvalReport(
        metric=metric_kind, unit=unit, per_fold=per_fold,
        overall_mean=float(fold_means.mean()), overall_std=float(fold_means.std()),
        pooled_mean=float(pooled.mean()), per_branch_errors=per_branch,
        decorrelation=decor, n_total=int(pooled.size),
    )
