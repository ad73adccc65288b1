"""Evaluation metrics and analyses: last/average accuracy, forgetting rate,
top-k subspace representation drift, and inter-class correlation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .numcore import forward


class IncompleteMatrixError(ValueError):
    pass


class RankError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    """A[i][j]: accuracy on task i's test set after training task j (i <= j).

    Stored as an (T, T) array with NaN above usage; valid on the
    upper-triangular index set i <= j (task-first row, stage column).
    """

    n_tasks: int
    values: np.ndarray = None

    def __post_init__(self):
        if self.values is None:
            self.values = np.full((self.n_tasks, self.n_tasks), np.nan)
        else:
            self.values = np.asarray(self.values, dtype=np.float64)

    def set(self, task_i, stage_j, acc):
        if task_i > stage_j:
            raise IncompleteMatrixError("task index exceeds training stage")
        if not (0.0 <= acc <= 1.0):
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        self.values[task_i, stage_j] = acc

    def get(self, task_i, stage_j):
        v = self.values[task_i, stage_j]
        if np.isnan(v):
            raise IncompleteMatrixError(f"A[{task_i}][{stage_j}] not filled")
        return float(v)

    def _check_complete(self):
        for j in range(self.n_tasks):
            for i in range(j + 1):
                if np.isnan(self.values[i, j]):
                    raise IncompleteMatrixError(f"A[{i}][{j}] missing")

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task"] + [f"after_{j}" for j in range(self.n_tasks)])
            for i in range(self.n_tasks):
                row = [i] + [("" if np.isnan(self.values[i, j])
                              else repr(float(self.values[i, j])))
                             for j in range(self.n_tasks)]
                w.writerow(row)

    @classmethod
    def load_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        n = len(rows) - 1
        m = cls(n)
        for i, row in enumerate(rows[1:]):
            for j, cell in enumerate(row[1:]):
                if cell:
                    m.values[i, j] = float(cell)
        return m


def last_accuracy(A: AccuracyMatrix) -> float:
    """Mean accuracy over all tasks at the final stage."""
    A._check_complete()
    N = A.n_tasks
    return float(np.mean([A.get(i, N - 1) for i in range(N)]))


def avg_incremental_accuracy(A: AccuracyMatrix) -> float:
    """Mean over stages of the mean accuracy over tasks seen so far."""
    A._check_complete()
    N = A.n_tasks
    per_stage = [np.mean([A.get(i, j) for i in range(j + 1)])
                 for j in range(N)]
    return float(np.mean(per_stage))


def forgetting_rate(A: AccuracyMatrix) -> float:
    """Mean over earlier tasks of (best accuracy before the final stage)
    minus final accuracy. Negative values mean backward transfer."""
    A._check_complete()
    N = A.n_tasks
    if N < 2:
        raise IncompleteMatrixError("forgetting rate undefined for one task")
    total = 0.0
    for i in range(N - 1):
        best = max(A.get(i, j) for j in range(i, N - 1))
        total += best - A.get(i, N - 1)
    return total / (N - 1)


def principal_directions(F, k, centered=True):
    """Top-k principal directions of the rows of F (d x k, orthonormal),
    via SVD of the (optionally column-centered) matrix."""
    F = np.asarray(F, dtype=np.float64)
    if centered:
        F = F - F.mean(axis=0, keepdims=True)
    _, s, vt = np.linalg.svd(F, full_matrices=False)
    rank = int(np.sum(s > s[0] * max(F.shape) * np.finfo(np.float64).eps)) \
        if s.size and s[0] > 0 else 0
    if k > rank:
        raise RankError(f"k={k} exceeds numerical rank {rank}")
    return vt[:k].T


def repre_drift(F_t, F_tp, k, centered=True):
    """Subspace drift: 1 - (1/k) * ||V_t^T V_t'||_F^2, in [0, 1].

    Values within 1e-12 of the endpoints are snapped, so identical inputs
    give exactly 0 and orthogonal subspaces exactly 1.
    """
    F_t = np.asarray(F_t, dtype=np.float64)
    F_tp = np.asarray(F_tp, dtype=np.float64)
    if F_t.shape[1] != F_tp.shape[1]:
        raise ValueError("feature dimensions differ")
    v1 = principal_directions(F_t, k, centered=centered)
    v2 = principal_directions(F_tp, k, centered=centered)
    overlap = np.linalg.norm(v1.T @ v2, "fro") ** 2 / k
    drift = 1.0 - overlap
    if abs(drift) < 1e-12:
        return 0.0
    if abs(drift - 1.0) < 1e-12:
        return 1.0
    return float(min(max(drift, 0.0), 1.0))


@dataclass
class DriftReport:
    k: int
    centered: bool
    reference_task: int
    stages: list          # training stages measured against the reference
    drifts: list          # drift value per stage, in [0, 1]

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["reference_task", "stage", "k", "centered", "drift"])
            for stage, dr in zip(self.stages, self.drifts):
                w.writerow([self.reference_task, stage, self.k,
                            int(self.centered), repr(dr)])


@dataclass
class CorrelationReport:
    class_ids: list
    class_names: list
    matrix: np.ndarray    # symmetric cosine correlations, diagonal 1

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class"] + self.class_names)
            for name, row in zip(self.class_names, self.matrix):
                w.writerow([name] + [repr(float(v)) for v in row])


def interclass_correlation(encoder, dataset, class_ids,
                           class_names=None) -> CorrelationReport:
    """Pairwise cosine similarity of class-mean embeddings."""
    means = []
    for cid in class_ids:
        mask = dataset.y == cid
        if np.sum(mask) < 2:
            raise ValueError(f"class {cid} has fewer than 2 examples")
        feats = forward(encoder, dataset.X[mask])
        means.append(feats.mean(axis=0))
    means = np.stack(means)
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    unit = means / norms
    mat = unit @ unit.T
    np.fill_diagonal(mat, 1.0)
    mat = np.clip((mat + mat.T) / 2.0, -1.0, 1.0)
    names = (class_names if class_names is not None
             else [dataset.class_names[c] for c in class_ids])
    return CorrelationReport(list(class_ids), names, mat)


def summary_json(A: AccuracyMatrix) -> dict:
    """Metric summary: last, avg, forget (null for a single task) plus the
    per-stage accuracy curve."""
    N = A.n_tasks
    per_stage = [float(np.mean([A.get(i, j) for i in range(j + 1)]))
                 for j in range(N)]
    forget = None
    if N >= 2:
        forget = forgetting_rate(A)
    return {"n_tasks": N,
            "last": last_accuracy(A),
            "avg": avg_incremental_accuracy(A),
            "forget": forget,
            "stage_mean_accuracy": per_stage}


def save_summary(A: AccuracyMatrix, path):
    with open(path, "w") as fh:
        json.dump(summary_json(A), fh, indent=2, sort_keys=True)
        fh.write("\n")
