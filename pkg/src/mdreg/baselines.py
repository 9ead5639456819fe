"""Inductive and simple transductive baselines: weighted kNN, ridge probe,
linear calibration, and probe fine-tuning on the support set."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import EmbeddingSet, TrainingDivergedError

KNN_EPS = 1e-12


@dataclass(frozen=True)
class LinearHead:
    """Scalar ridge regression head y = w . v + b."""

    weight: np.ndarray
    bias: float
    ridge_lambda: float = 0.0

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64).ravel()
        if not np.isfinite(w).all() or not np.isfinite(self.bias):
            raise ValueError("head parameters must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", float(self.bias))

    def predict(self, vectors: np.ndarray) -> np.ndarray:
        return np.atleast_2d(vectors) @ self.weight + self.bias


def predict_knn(
    query_vectors: np.ndarray,
    support_vectors: np.ndarray,
    support_labels: np.ndarray,
    k: int,
) -> np.ndarray:
    """Inverse-distance weighted mean of each query's k nearest support labels.

    Distance ties break toward the lower support index; a query coinciding
    with a support sample is dominated by that sample's label.
    """
    q = np.atleast_2d(np.asarray(query_vectors, dtype=np.float64))
    s = np.atleast_2d(np.asarray(support_vectors, dtype=np.float64))
    y = np.asarray(support_labels, dtype=np.float64)
    if s.shape[0] == 0:
        raise ValueError("empty support set")
    if not 1 <= k <= s.shape[0]:
        raise ValueError(f"need 1 <= k <= {s.shape[0]}, got {k}")
    # (nq, ns) pairwise Euclidean distances
    d2 = np.maximum(
        (q * q).sum(axis=1)[:, None] - 2.0 * (q @ s.T) + (s * s).sum(axis=1)[None, :], 0.0
    )
    dist = np.sqrt(d2)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    w = 1.0 / (np.take_along_axis(dist, nearest, axis=1) + KNN_EPS)
    return (w * y[nearest]).sum(axis=1) / w.sum(axis=1)


def fit_linear_probe(source: EmbeddingSet, ridge_lambda: float = 0.0) -> LinearHead:
    """Ridge regression of labels on embeddings via the normal equations.

    The bias is not penalized. A singular system with ridge_lambda = 0 raises
    with advice to use a positive penalty.
    """
    if ridge_lambda < 0:
        raise ValueError(f"need ridge_lambda >= 0, got {ridge_lambda}")
    x = np.column_stack([source.vectors, np.ones(source.n)])
    penalty = np.diag(np.r_[np.full(source.dim, ridge_lambda), 0.0])
    gram = x.T @ x + penalty
    rhs = x.T @ source.labels
    try:
        beta = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        raise ValueError(
            "singular normal equations; use ridge_lambda > 0"
        ) from None
    return LinearHead(weight=beta[:-1], bias=float(beta[-1]), ridge_lambda=ridge_lambda)


def calibrate_linear(raw_preds: np.ndarray, support_truth: np.ndarray) -> tuple[float, float]:
    """Least-squares (a, b) with truth ~ a * prediction + b over support pairs."""
    p = np.asarray(raw_preds, dtype=np.float64)
    t = np.asarray(support_truth, dtype=np.float64)
    if p.size < 2 or p.size != t.size:
        raise ValueError(f"need >= 2 prediction/truth pairs, got {p.size}/{t.size}")
    if np.ptp(p) == 0.0:
        raise ValueError("degenerate calibration: constant raw predictions")
    p_mean = p.mean()
    t_mean = t.mean()
    dp = p - p_mean
    a = float((dp * (t - t_mean)).sum() / (dp * dp).sum())
    b = float(t_mean - a * p_mean)
    return a, b


def finetune_probe(
    head: LinearHead,
    support_vectors: np.ndarray,
    support_labels: np.ndarray,
    steps: int,
    lr: float,
) -> LinearHead:
    """Full-batch gradient descent on the support mean squared error."""
    x = np.atleast_2d(np.asarray(support_vectors, dtype=np.float64))
    y = np.asarray(support_labels, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty support set")
    w = head.weight.copy()
    b = head.bias
    n = x.shape[0]
    for step in range(steps):
        resid = x @ w + b - y
        mse = float((resid * resid).mean())
        if not np.isfinite(mse) or mse > 1e12:
            raise TrainingDivergedError(step, f"support MSE {mse!r}")
        g = 2.0 / n * resid
        w -= lr * (x.T @ g)
        b -= lr * float(g.sum())
    return LinearHead(weight=w, bias=b, ridge_lambda=head.ridge_lambda)


def save_head(path, head: LinearHead) -> None:
    doc = {
        "schema_version": 1,
        "weight": head.weight.tolist(),
        "bias": head.bias,
        "ridge_lambda": head.ridge_lambda,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_head(path) -> LinearHead:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return LinearHead(np.asarray(doc["weight"]), doc["bias"], doc.get("ridge_lambda", 0.0))
