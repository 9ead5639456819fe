"""Graph diffusion over embedding manifolds with a weighted regression readout.

A sparse affinity graph is built from thresholded, exponentiated cosine
similarities between unit-norm embeddings. One indicator column per labeled
support sample is diffused through the symmetrically normalized graph by
solving (I - alpha * W_n) S* = S; each query's value is then the similarity-
weighted mean of the labels of its top-scoring support samples.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse

from .core import EmbeddingSet, IsolatedNodeWarning, SolverError

DEGREE_FLOOR = 1e-12


@dataclass(frozen=True)
class AffinityGraph:
    """Sparse symmetric affinity matrix with its normalized form.

    `weights` has a zero diagonal, entries in [0, 1], and is exactly symmetric;
    `normalized` is D^{-1/2} W D^{-1/2} with isolated nodes floored in D.
    """

    n: int
    weights: sparse.csr_matrix
    degrees: np.ndarray
    normalized: sparse.csr_matrix
    isolated: np.ndarray

    def laplacian(self) -> sparse.csr_matrix:
        """Normalized graph Laplacian I - W_n (derived, unused by the solver)."""
        return (sparse.identity(self.n, format="csr") - self.normalized).tocsr()


@dataclass(frozen=True)
class SupportMatrix:
    """One-hot indicator columns marking support samples among the graph nodes."""

    matrix: np.ndarray       # (n, k), exactly one 1 per column
    rows: np.ndarray         # (k,) node row of each column

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        r = np.array(self.rows, dtype=np.int64)
        if m.ndim != 2 or r.ndim != 1 or m.shape[1] != r.size:
            raise ValueError(f"bad support matrix shapes: {m.shape}, {r.shape}")
        for j in range(r.size):
            col = m[:, j]
            nz = np.flatnonzero(col)
            if nz.size != 1 or nz[0] != r[j] or col[nz[0]] != 1.0:
                raise ValueError(f"support column {j} is not one-hot at row {r[j]}")
        m.flags.writeable = False
        r.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "rows", r)

    @property
    def k(self) -> int:
        return int(self.rows.size)


def make_support_matrix(n: int, node_rows: np.ndarray) -> SupportMatrix:
    """Indicator matrix with one column per support node row."""
    rows = np.asarray(node_rows, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("need at least one support sample")
    if rows.min() < 0 or rows.max() >= n:
        raise ValueError(f"support rows out of range for n={n}")
    if np.unique(rows).size != rows.size:
        raise ValueError("support rows must be distinct")
    s = np.zeros((n, rows.size))
    s[rows, np.arange(rows.size)] = 1.0
    return SupportMatrix(s, rows)


def build_affinity(embeddings: EmbeddingSet, k: int, gamma: float) -> AffinityGraph:
    """Sparse kNN cosine affinity graph, max-symmetrized and normalized.

    Each node links to its k most cosine-similar neighbors; edge weights are
    the positive part of the cosine raised to `gamma`. The union of directed
    edges is kept (elementwise max), so W is exactly symmetric. Nodes whose
    every candidate edge was thresholded away are flagged with a warning and
    floored in the degree normalization.
    """
    v = embeddings.vectors
    n = v.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    if gamma <= 0:
        raise ValueError(f"need gamma > 0, got {gamma}")

    block = 1024
    rows_acc, cols_acc, vals_acc = [], [], []
    for start in range(0, n, block):
        stop = min(start + block, n)
        sims = v[start:stop] @ v.T
        sims[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        # stable sort on -sims breaks similarity ties toward the lower index
        nbr = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        w = np.take_along_axis(sims, nbr, axis=1)
        np.maximum(w, 0.0, out=w)
        np.power(w, gamma, out=w)
        rows_acc.append(np.repeat(np.arange(start, stop), k))
        cols_acc.append(nbr.ravel())
        vals_acc.append(w.ravel())
    w0 = sparse.csr_matrix(
        (np.concatenate(vals_acc), (np.concatenate(rows_acc), np.concatenate(cols_acc))),
        shape=(n, n),
    )
    w0.eliminate_zeros()
    w = w0.maximum(w0.T).tocsr()
    w.setdiag(0.0)
    w.eliminate_zeros()

    degrees = np.asarray(w.sum(axis=1)).ravel()
    isolated = np.flatnonzero(degrees == 0.0)
    if isolated.size:
        warnings.warn(
            f"{isolated.size} isolated nodes (no positive-affinity neighbors): "
            f"{isolated[:10].tolist()}{'...' if isolated.size > 10 else ''}",
            IsolatedNodeWarning,
            stacklevel=2,
        )
    dinv_sqrt = 1.0 / np.sqrt(np.maximum(degrees, DEGREE_FLOOR))
    w_n = w.multiply(dinv_sqrt[:, None]).multiply(dinv_sqrt[None, :]).tocsr()
    return AffinityGraph(n=n, weights=w, degrees=degrees, normalized=w_n, isolated=isolated)


def _cg(matvec, b: np.ndarray, x0: np.ndarray, tol: float, maxiter: int) -> np.ndarray:
    """Plain conjugate gradient; returns the iterate, caller checks the residual."""
    x = x0.copy()
    r = b - matvec(x)
    p = r.copy()
    rs = float(r @ r)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b)
    limit = (tol * b_norm) ** 2
    for _ in range(maxiter):
        if rs <= limit:
            break
        ap = matvec(p)
        denom = float(p @ ap)
        if denom <= 0.0:
            break  # lost positive-definiteness numerically; residual check decides
        step = rs / denom
        x += step * p
        r -= step * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def diffuse_closed(
    graph: AffinityGraph,
    support: SupportMatrix,
    alpha: float,
    tol: float = 1e-10,
) -> np.ndarray:
    """Solve (I - alpha * W_n) S* = S column-wise by conjugate gradient.

    The system matrix is symmetric positive definite for 0 <= alpha < 1.
    Columns failing the relative-residual tolerance within 10n iterations fall
    back to a dense solve for n <= 2000, otherwise raise SolverError.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"need 0 <= alpha < 1, got {alpha}")
    if support.matrix.shape[0] != graph.n:
        raise ValueError(f"support has {support.matrix.shape[0]} rows, graph has {graph.n}")
    w_n = graph.normalized
    matvec = lambda x: x - alpha * (w_n @ x)
    maxiter = 10 * graph.n
    s = support.matrix
    out = np.empty_like(s)
    for j in range(support.k):
        b = s[:, j]
        x = _cg(matvec, b, b.copy(), tol, maxiter)
        residual = float(np.linalg.norm(b - matvec(x)) / np.linalg.norm(b))
        if residual > tol:
            if graph.n <= 2000:
                dense = np.eye(graph.n) - alpha * w_n.toarray()
                return np.linalg.solve(dense, s)
            raise SolverError(
                f"conjugate gradient failed on column {j}: "
                f"relative residual {residual:.3e} > {tol:.1e} after {maxiter} iterations"
            )
        out[:, j] = x
    return out


def diffuse_iterative(
    graph: AffinityGraph,
    support: SupportMatrix,
    alpha: float,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Fixed-point iteration F <- alpha * W_n F + (1 - alpha) * S.

    Stops when the max-norm change drops below `tol`, then rescales by
    1/(1 - alpha) so the result matches diffuse_closed.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"need 0 <= alpha < 1, got {alpha}")
    if support.matrix.shape[0] != graph.n:
        raise ValueError(f"support has {support.matrix.shape[0]} rows, graph has {graph.n}")
    w_n = graph.normalized
    f = support.matrix.copy()
    base = (1.0 - alpha) * support.matrix
    delta = np.inf
    for _ in range(max_iter):
        f_new = alpha * (w_n @ f) + base
        delta = float(np.abs(f_new - f).max())
        f = f_new
        if delta < tol:
            return f / (1.0 - alpha)
    raise SolverError(f"diffusion did not converge in {max_iter} iterations; last delta {delta:.3e}")


def predict_mdr(scores: np.ndarray, support_labels: np.ndarray, k_v: int) -> np.ndarray:
    """Weighted mean of the labels of each row's k_v highest-scoring supports.

    Score ties break toward the lower column; negative scores are clamped to 0
    before weighting. Rows whose selected weights are all zero fall back to the
    unweighted mean of the selected labels.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.asarray(support_labels, dtype=np.float64)
    k = scores.shape[1]
    if labels.shape != (k,):
        raise ValueError(f"expected {k} support labels, got {labels.shape}")
    if not 1 <= k_v <= k:
        raise ValueError(f"need 1 <= k_v <= {k}, got {k_v}")
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k_v]
    w = np.maximum(np.take_along_axis(scores, top, axis=1), 0.0)
    y = labels[top]
    total = w.sum(axis=1)
    weighted = np.where(total > 0, (w * y).sum(axis=1) / np.where(total > 0, total, 1.0), y.mean(axis=1))
    return weighted


def export_graph(csv_path, sidecar_path, graph: AffinityGraph, k: int, gamma: float, alpha: float) -> None:
    """Write the affinity graph as a sparse triplet CSV plus a JSON sidecar."""
    coo = graph.weights.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "w"])
        for idx in order:
            writer.writerow([int(coo.row[idx]), int(coo.col[idx]), "%.17g" % coo.data[idx]])
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump({"n": graph.n, "k": k, "gamma": gamma, "alpha": alpha}, fh, sort_keys=True)
        fh.write("\n")


def export_scores(path, scores: np.ndarray) -> None:
    """Write diffused support scores as a dense CSV, one row per node."""
    scores = np.atleast_2d(scores)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"s{j}" for j in range(scores.shape[1])])
        for row in scores:
            writer.writerow(["%.17g" % v for v in row])
