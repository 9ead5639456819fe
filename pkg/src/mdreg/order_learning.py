"""Ordered embedding training around reference anchors.

Embeddings are pushed so that (1) the direction between two samples matches the
direction between their value-group anchors, (2) anchor distances separate
samples of different groups by a margin while tying same-group samples
together, and (3) each anchor sits at the center of its group. Training a
linear map with these losses produces a unit-norm embedding space in which
label order is mirrored by geometry.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    EmbeddingSet,
    HyperParams,
    ReferencePoints,
    TrainingDivergedError,
    ValueGroups,
    normalize_rows,
)

DEGENERATE_TOL = 1e-12


def assign_group(label: float, groups: ValueGroups) -> int:
    """Map a label to its value-group index, clamping out-of-range labels."""
    i = int(np.searchsorted(groups.boundaries, label, side="right")) - 1
    return min(max(i, 0), groups.k_r - 1)


def assign_groups(labels: np.ndarray, groups: ValueGroups) -> np.ndarray:
    """Vectorized assign_group."""
    idx = np.searchsorted(groups.boundaries, np.asarray(labels), side="right") - 1
    return np.clip(idx, 0, groups.k_r - 1).astype(np.int64)


def _softplus(s: float) -> float:
    if s > 0:
        return s + math.log1p(math.exp(-s))
    return math.log1p(math.exp(s))


def _sigmoid(s: float) -> float:
    if s >= 0:
        return 1.0 / (1.0 + math.exp(-s))
    e = math.exp(s)
    return e / (1.0 + e)


def _unit(vec: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    n = float(np.linalg.norm(vec))
    if n <= DEGENERATE_TOL:
        raise ValueError(f"degenerate direction: {what}")
    return vec / n, n


def order_loss(
    v_a: np.ndarray,
    v_b: np.ndarray,
    refs: ReferencePoints,
    theta_a: int,
    theta_b: int,
) -> float:
    """Directional alignment loss for a cross-group pair.

    The normalized displacement from the lower-group sample to the higher-group
    sample is scored against the forward anchor direction (toward the higher
    group) versus the backward one (toward the next-lower anchor); the loss is
    the softmax negative log-likelihood of the forward direction. Equal-group
    pairs contribute 0 by convention. At the lowest anchor the backward
    direction is the reflection of the forward one.
    """
    if theta_a == theta_b:
        return 0.0
    if theta_a > theta_b:
        v_a, v_b, theta_a, theta_b = v_b, v_a, theta_b, theta_a
    r = refs.points
    u_ab, _ = _unit(v_b - v_a, "coincident embeddings")
    u_plus, _ = _unit(r[theta_b] - r[theta_a], f"coincident reference points {theta_a},{theta_b}")
    if theta_a == 0:
        u_minus = -u_plus
    else:
        u_minus, _ = _unit(
            r[theta_a - 1] - r[theta_a],
            f"coincident reference points {theta_a - 1},{theta_a}",
        )
    s = float((u_minus - u_plus) @ u_ab)
    return _softplus(s)


def metric_loss(
    v_a: np.ndarray,
    v_b: np.ndarray,
    refs: ReferencePoints,
    theta_a: int,
    theta_b: int,
    margin: float,
) -> float:
    """Anchor-distance margin loss.

    Same-group pairs: hinge on the absolute difference of anchor distances
    exceeding the margin, summed over all anchors. Cross-group pairs: anchors
    at or below the lower group pull the lower sample closer by the margin,
    anchors at or above the higher group pull the higher sample closer, each a
    hinge summed over its anchor range.
    """
    if margin <= 0:
        raise ValueError(f"need margin > 0, got {margin}")
    r = refs.points
    d_a = np.linalg.norm(r - v_a, axis=1)
    d_b = np.linalg.norm(r - v_b, axis=1)
    if theta_a == theta_b:
        return float(np.maximum(np.abs(d_a - d_b) - margin, 0.0).sum())
    if theta_a > theta_b:
        d_a, d_b, theta_a, theta_b = d_b, d_a, theta_b, theta_a
    lo, hi = theta_a, theta_b
    pull = np.maximum(d_a[: lo + 1] - d_b[: lo + 1] + margin, 0.0).sum()
    push = np.maximum(d_b[hi:] - d_a[hi:] + margin, 0.0).sum()
    return float(pull + push)


def center_loss(
    v_a: np.ndarray,
    v_b: np.ndarray,
    refs: ReferencePoints,
    theta_a: int,
    theta_b: int,
) -> float:
    """Sum of each sample's Euclidean distance to its own group anchor."""
    r = refs.points
    return float(np.linalg.norm(v_a - r[theta_a]) + np.linalg.norm(v_b - r[theta_b]))


@dataclass(frozen=True)
class PairBatch:
    """Index pairs into an embedding set with their precomputed group indices."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    group_a: np.ndarray
    group_b: np.ndarray

    def __post_init__(self):
        for name in ("idx_a", "idx_b", "group_a", "group_b"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        sizes = {getattr(self, f).size for f in ("idx_a", "idx_b", "group_a", "group_b")}
        if len(sizes) != 1:
            raise ValueError("pair batch fields must have equal length")

    @property
    def size(self) -> int:
        return int(self.idx_a.size)


def make_pair_batch(labels: np.ndarray, groups: ValueGroups, pairs) -> PairBatch:
    """Build a PairBatch from (a, b) index pairs, assigning groups from labels."""
    pairs = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    g = assign_groups(np.asarray(labels), groups)
    return PairBatch(pairs[:, 0], pairs[:, 1], g[pairs[:, 0]], g[pairs[:, 1]])


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted per-term means over a batch; total = order + metric + center."""

    total: float
    order: float
    metric: float
    center: float
    pairs: int


def _loss_sums(
    batch: PairBatch, v: np.ndarray, refs: ReferencePoints, margin: float
) -> tuple[float, float, float]:
    s_o = s_m = s_c = 0.0
    for i in range(batch.size):
        a, b = int(batch.idx_a[i]), int(batch.idx_b[i])
        ta, tb = int(batch.group_a[i]), int(batch.group_b[i])
        try:
            s_o += order_loss(v[a], v[b], refs, ta, tb)
        except ValueError as exc:
            raise ValueError(f"pair {i} ({a},{b}): {exc}") from exc
        s_m += metric_loss(v[a], v[b], refs, ta, tb, margin)
        s_c += center_loss(v[a], v[b], refs, ta, tb)
    return s_o, s_m, s_c


def _breakdown(sums: tuple[float, float, float], weights, n: int) -> LossBreakdown:
    w_o, w_m, w_c = weights
    order = w_o * sums[0] / n
    metric = w_m * sums[1] / n
    center = w_c * sums[2] / n
    return LossBreakdown(order + metric + center, order, metric, center, n)


def composite_loss(
    batch: PairBatch,
    embeddings: EmbeddingSet,
    refs: ReferencePoints,
    params: HyperParams,
) -> LossBreakdown:
    """Weighted mean of the three losses over a pair batch."""
    if batch.size == 0:
        raise ValueError("empty pair batch")
    sums = _loss_sums(batch, embeddings.vectors, refs, params.gol_margin)
    return _breakdown(sums, params.loss_weights, batch.size)


@dataclass(frozen=True)
class LinearEmbedder:
    """Affine map from raw features to unit-norm embeddings."""

    weight: np.ndarray  # (d, p)
    bias: np.ndarray    # (d,)

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ValueError(f"bad embedder shapes: weight {w.shape}, bias {b.shape}")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def embed(self, features: np.ndarray) -> np.ndarray:
        """Apply the affine map and normalize rows to unit norm."""
        z = np.atleast_2d(np.asarray(features, dtype=np.float64)) @ self.weight.T + self.bias
        return normalize_rows(z)


@dataclass(frozen=True)
class LossGradients:
    weight: np.ndarray
    bias: np.ndarray
    ref_points: np.ndarray


def _check_finite(name: str, g: np.ndarray) -> None:
    if not np.isfinite(g).all():
        bad = np.argwhere(~np.isfinite(np.atleast_2d(g)))[0]
        raise ValueError(f"non-finite gradient at {name}{tuple(int(x) for x in bad)}")


def _safe_dir(diff: np.ndarray, dist: float) -> np.ndarray:
    # subgradient 0 exactly at the anchor
    if dist <= DEGENERATE_TOL:
        return np.zeros_like(diff)
    return diff / dist


def loss_gradient(
    batch: PairBatch,
    features: np.ndarray,
    embedder: LinearEmbedder,
    refs: ReferencePoints,
    params: HyperParams,
) -> tuple[LossGradients, LossBreakdown]:
    """Analytic gradient of the composite loss w.r.t. embedder and anchors.

    Matches central finite differences of composite_loss evaluated through the
    embedder. Accumulation order over pairs is fixed, so results are
    bit-reproducible.
    """
    if batch.size == 0:
        raise ValueError("empty pair batch")
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    w_o, w_m, w_c = params.loss_weights
    margin = params.gol_margin
    r = refs.points
    m = refs.count

    z = x @ embedder.weight.T + embedder.bias
    nz = np.linalg.norm(z, axis=1)
    if np.any(nz < 1e-12):
        raise ValueError("degenerate pre-embedding with near-zero norm")
    v = z / nz[:, None]

    gv = np.zeros_like(v)          # d(loss)/d(embedding row), summed over pairs
    gr = np.zeros_like(r)          # d(loss)/d(anchor row)
    s_o = s_m = s_c = 0.0

    for i in range(batch.size):
        a, b = int(batch.idx_a[i]), int(batch.idx_b[i])
        ta, tb = int(batch.group_a[i]), int(batch.group_b[i])

        # center: distance of each sample to its own anchor
        for idx, t in ((a, ta), (b, tb)):
            diff = v[idx] - r[t]
            dist = float(np.linalg.norm(diff))
            s_c += dist
            direction = _safe_dir(diff, dist)
            gv[idx] += w_c * direction
            gr[t] -= w_c * direction

        if ta == tb:
            # same-group metric branch: |d_a - d_b| hinged at the margin
            diff_a = r - v[a]
            diff_b = r - v[b]
            d_a = np.linalg.norm(diff_a, axis=1)
            d_b = np.linalg.norm(diff_b, axis=1)
            delta = d_a - d_b
            act = np.abs(delta) > margin
            s_m += float((np.abs(delta[act]) - margin).sum())
            for j in np.flatnonzero(act):
                sgn = 1.0 if delta[j] > 0 else -1.0
                dir_a = _safe_dir(-diff_a[j], float(d_a[j]))   # d d_a / d v_a
                dir_b = _safe_dir(-diff_b[j], float(d_b[j]))
                gv[a] += w_m * sgn * dir_a
                gv[b] -= w_m * sgn * dir_b
                gr[j] += w_m * sgn * (-dir_a + dir_b)
            continue

        # canonical order: lo is the lower-group sample
        if ta < tb:
            lo_i, hi_i, lo_g, hi_g = a, b, ta, tb
        else:
            lo_i, hi_i, lo_g, hi_g = b, a, tb, ta

        # order: score forward vs backward anchor direction
        try:
            u_ab, n_ab = _unit(v[hi_i] - v[lo_i], "coincident embeddings")
            u_p, n_p = _unit(r[hi_g] - r[lo_g], f"coincident reference points {lo_g},{hi_g}")
            reflected = lo_g == 0
            if reflected:
                s = -2.0 * float(u_p @ u_ab)
            else:
                u_m, n_m = _unit(
                    r[lo_g - 1] - r[lo_g], f"coincident reference points {lo_g - 1},{lo_g}"
                )
                s = float((u_m - u_p) @ u_ab)
        except ValueError as exc:
            raise ValueError(f"pair {i} ({a},{b}): {exc}") from exc
        s_o += _softplus(s)
        sig = _sigmoid(s)
        if reflected:
            g_u = -2.0 * sig * u_p
            g_up = -2.0 * sig * u_ab
        else:
            g_u = sig * (u_m - u_p)
            g_up = -sig * u_ab
            g_um = sig * u_ab
            g_tm = (g_um - (g_um @ u_m) * u_m) / n_m
            gr[lo_g - 1] += w_o * g_tm
            gr[lo_g] -= w_o * g_tm
        g_e = (g_u - (g_u @ u_ab) * u_ab) / n_ab
        gv[hi_i] += w_o * g_e
        gv[lo_i] -= w_o * g_e
        g_t = (g_up - (g_up @ u_p) * u_p) / n_p
        gr[hi_g] += w_o * g_t
        gr[lo_g] -= w_o * g_t

        # cross-group metric branch: pull at low anchors, push at high anchors
        diff_lo = r - v[lo_i]
        diff_hi = r - v[hi_i]
        d_lo = np.linalg.norm(diff_lo, axis=1)
        d_hi = np.linalg.norm(diff_hi, axis=1)
        for j in range(lo_g + 1):
            gap = d_lo[j] - d_hi[j] + margin
            if gap > 0:
                s_m += float(gap)
                dir_lo = _safe_dir(-diff_lo[j], float(d_lo[j]))
                dir_hi = _safe_dir(-diff_hi[j], float(d_hi[j]))
                gv[lo_i] += w_m * dir_lo
                gv[hi_i] -= w_m * dir_hi
                gr[j] += w_m * (-dir_lo + dir_hi)
        for j in range(hi_g, m):
            gap = d_hi[j] - d_lo[j] + margin
            if gap > 0:
                s_m += float(gap)
                dir_lo = _safe_dir(-diff_lo[j], float(d_lo[j]))
                dir_hi = _safe_dir(-diff_hi[j], float(d_hi[j]))
                gv[hi_i] += w_m * dir_hi
                gv[lo_i] -= w_m * dir_lo
                gr[j] += w_m * (-dir_hi + dir_lo)

    n = batch.size
    gv /= n
    gr /= n

    # backprop through row normalization: v = z / |z|
    gz = (gv - (gv * v).sum(axis=1, keepdims=True) * v) / nz[:, None]
    gw = gz.T @ x
    gb = gz.sum(axis=0)

    _check_finite("weight", gw)
    _check_finite("bias", gb)
    _check_finite("ref_points", gr)

    order = w_o * s_o / n
    metric = w_m * s_m / n
    center = w_c * s_c / n
    breakdown = LossBreakdown(order + metric + center, order, metric, center, n)
    return LossGradients(gw, gb, gr), breakdown


@dataclass(frozen=True)
class TrainSchedule:
    """Gradient-descent settings for the toy embedder."""

    lr: float = 0.02
    steps: int = 1200
    batch_size: int = 32
    seed: int = 0
    embed_dim: int | None = None   # None: keep the feature dimension
    lr_decay: float = 9.0          # lr_t = lr / (1 + lr_decay * t / steps)
    grad_clip: float = 2.0         # global gradient-norm cap; None disables
    probe_pairs: int = 128         # fixed pair set the loss trace is measured on


@dataclass(frozen=True)
class TrainResult:
    embedder: LinearEmbedder
    references: ReferencePoints
    trace: np.ndarray  # (steps, 5): step, total, order, metric, center


def _sample_pairs(
    rng: np.random.Generator, group_ids: np.ndarray, batch_size: int
) -> np.ndarray:
    """Uniform index pairs; at least half the batch is forced cross-group."""
    n = group_ids.size
    pairs = np.empty((batch_size, 2), dtype=np.int64)
    n_forced = batch_size - batch_size // 2
    for i in range(batch_size):
        force = i < n_forced
        for _ in range(10_000):
            a = int(rng.integers(n))
            b = int(rng.integers(n))
            if a == b:
                continue
            if force and group_ids[a] == group_ids[b]:
                continue
            break
        else:
            raise ValueError("could not sample a cross-group pair; need 2 populated groups")
        pairs[i] = (a, b)
    return pairs


def _initial_references(
    v0: np.ndarray, group_ids: np.ndarray, k_r: int, rng: np.random.Generator
) -> np.ndarray:
    """Group-wise embedding means plus small jitter; empty groups interpolated."""
    d = v0.shape[1]
    means = np.full((k_r, d), np.nan)
    for g in range(k_r):
        members = group_ids == g
        if members.any():
            means[g] = v0[members].mean(axis=0)
    filled = np.flatnonzero(np.isfinite(means[:, 0]))
    if filled.size < 2:
        raise ValueError("need at least 2 populated groups to initialize references")
    for g in np.flatnonzero(~np.isfinite(means[:, 0])):
        lo_c = filled[filled < g]
        hi_c = filled[filled > g]
        if lo_c.size and hi_c.size:
            lo, hi = lo_c[-1], hi_c[0]
            t = (g - lo) / (hi - lo)
            means[g] = (1 - t) * means[lo] + t * means[hi]
        elif lo_c.size:
            means[g] = means[lo_c[-1]]
        else:
            means[g] = means[hi_c[0]]
    return means + 1e-3 * rng.standard_normal((k_r, d))


def train_toy_embedder(
    features: np.ndarray,
    labels: np.ndarray,
    groups: ValueGroups,
    params: HyperParams,
    schedule: TrainSchedule,
    init: tuple[LinearEmbedder, ReferencePoints] | None = None,
) -> TrainResult:
    """Fit a linear embedder and reference anchors by stochastic gradient descent.

    Each step samples a fresh pair batch (cross-group pairs forced for at least
    half the batch) and applies one plain SGD update with a slow 1/(1+t)
    learning-rate decay. The loss trace is measured on a fixed probe pair set
    drawn once at the start, so consecutive trace rows are comparable. Raises
    TrainingDivergedError when the loss exceeds 1e6 or turns non-finite.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.float64)
    n, p = x.shape
    if p < 2:
        raise ValueError(f"need feature dimension >= 2, got {p}")
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    d = schedule.embed_dim if schedule.embed_dim is not None else p
    if d < 2:
        raise ValueError(f"need embedding dimension >= 2, got {d}")
    group_ids = assign_groups(labels, groups)
    if np.unique(group_ids).size < 2:
        raise ValueError("need at least 2 populated groups")

    rng = np.random.default_rng(schedule.seed)
    if init is not None:
        embedder, refs = init
        if refs.count != groups.k_r:
            raise ValueError(f"checkpoint has {refs.count} anchors, groups need {groups.k_r}")
        weight = embedder.weight.copy()
        bias = embedder.bias.copy()
        ref_pts = refs.points.copy()
    else:
        weight = np.eye(d, p) + 0.01 * rng.standard_normal((d, p))
        bias = np.zeros(d)
        v0 = LinearEmbedder(weight, bias).embed(x)
        ref_pts = _initial_references(v0, group_ids, groups.k_r, rng)

    probe = _sample_pairs(rng, group_ids, max(schedule.probe_pairs, 2))
    probe_batch = PairBatch(
        probe[:, 0], probe[:, 1], group_ids[probe[:, 0]], group_ids[probe[:, 1]]
    )

    trace = np.empty((schedule.steps, 5))
    for step in range(schedule.steps):
        embedder = LinearEmbedder(weight, bias)
        refs = ReferencePoints(ref_pts)
        probe_bd = _breakdown(
            _loss_sums(probe_batch, embedder.embed(x), refs, params.gol_margin),
            params.loss_weights, probe_batch.size,
        )
        if not math.isfinite(probe_bd.total) or probe_bd.total > 1e6:
            raise TrainingDivergedError(step, f"loss {probe_bd.total!r}")
        trace[step] = (step, probe_bd.total, probe_bd.order, probe_bd.metric, probe_bd.center)

        pairs = _sample_pairs(rng, group_ids, schedule.batch_size)
        batch = PairBatch(pairs[:, 0], pairs[:, 1], group_ids[pairs[:, 0]], group_ids[pairs[:, 1]])
        grads, bd = loss_gradient(batch, x, embedder, refs, params)
        if not math.isfinite(bd.total) or bd.total > 1e6:
            raise TrainingDivergedError(step, f"loss {bd.total!r}")
        scale = 1.0
        if schedule.grad_clip is not None:
            gnorm = math.sqrt(
                float((grads.weight * grads.weight).sum())
                + float((grads.bias * grads.bias).sum())
                + float((grads.ref_points * grads.ref_points).sum())
            )
            if gnorm > schedule.grad_clip:
                scale = schedule.grad_clip / gnorm
        lr = scale * schedule.lr / (1.0 + schedule.lr_decay * step / max(schedule.steps, 1))
        weight -= lr * grads.weight
        bias -= lr * grads.bias
        ref_pts -= lr * grads.ref_points

    return TrainResult(LinearEmbedder(weight, bias), ReferencePoints(ref_pts), trace)


@dataclass(frozen=True)
class Checkpoint:
    embedder: LinearEmbedder
    references: ReferencePoints
    groups: ValueGroups
    params: HyperParams
    seed: int
    step: int


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    doc = {
        "schema_version": 1,
        "weight": ckpt.embedder.weight.tolist(),
        "bias": ckpt.embedder.bias.tolist(),
        "reference_points": ckpt.references.points.tolist(),
        "groups": {"lower": ckpt.groups.lower, "upper": ckpt.groups.upper, "k_r": ckpt.groups.k_r},
        "params": ckpt.params.to_dict(),
        "seed": ckpt.seed,
        "step": ckpt.step,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    g = doc["groups"]
    return Checkpoint(
        embedder=LinearEmbedder(np.asarray(doc["weight"]), np.asarray(doc["bias"])),
        references=ReferencePoints(np.asarray(doc["reference_points"])),
        groups=ValueGroups(g["lower"], g["upper"], g["k_r"]),
        params=HyperParams.from_dict(doc["params"]),
        seed=int(doc["seed"]),
        step=int(doc["step"]),
    )


def save_loss_trace(path, trace: np.ndarray) -> None:
    """Write the per-step loss trace as `step,total,order,metric,center`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "total", "order", "metric", "center"])
        for row in np.atleast_2d(trace):
            writer.writerow([int(row[0])] + ["%.17g" % v for v in row[1:]])
