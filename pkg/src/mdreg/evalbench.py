"""Few-shot cross-domain evaluation: percentile group bounds, support sampling,
R-squared and Wasserstein metrics, a synthetic domain-shift benchmark, and a
seeded multi-method experiment runner."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import calibrate_linear, finetune_probe, fit_linear_probe, predict_knn
from .core import (
    EmbeddingSet,
    HyperParams,
    SupportSet,
    SupportShortfallWarning,
    ValueGroups,
    validate_embedding_set,
)
from .diffusion import build_affinity, diffuse_closed, make_support_matrix, predict_mdr
from .order_learning import (
    Checkpoint,
    TrainSchedule,
    assign_groups,
    train_toy_embedder,
)

METHODS = (
    "regression",
    "regression_cal",
    "knn",
    "probe_ft",
    "gol_knn",
    "gol_mdr",
    "gol_ft_mdr",
)

SMALL_SAMPLE_FALLBACK = 100  # below this, group bounds use min/max instead of percentiles


def r2_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Coefficient of determination; negative when worse than the mean."""
    y = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    if y.shape != p.shape or y.size < 2:
        raise ValueError(f"need matching arrays of size >= 2, got {y.shape} and {p.shape}")
    if np.ptp(y) == 0.0:
        raise ValueError("undefined R2: constant y_true")
    ss_res = float(((y - p) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot

def wasserstein1(a: np.ndarray, b: np.ndarray) -> float:
    """Empirical 1-D earth-mover distance between two samples.

    Equal sizes reduce to the mean absolute difference of the sorted samples;
    unequal sizes integrate the CDF difference over merged breakpoints.
    """
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("need nonempty samples")
    if a.size == b.size:
        return float(np.abs(a - b).mean())
    merged = np.sort(np.concatenate([a, b]), kind="mergesort")
    deltas = np.diff(merged)
    cdf_a = np.searchsorted(a, merged[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, merged[:-1], side="right") / b.size
    return float((np.abs(cdf_a - cdf_b) * deltas).sum())


def compute_group_bounds(labels: np.ndarray, k_r: int) -> ValueGroups:
    """Equal-width groups between the 1st and 99th label percentiles.

    Percentiles interpolate linearly between order statistics; samples smaller
    than 100 fall back to min/max bounds.
    """
    x = np.asarray(labels, dtype=np.float64)
    if x.size == 0 or not np.isfinite(x).all():
        raise ValueError("labels must be nonempty and finite")
    if x.size >= SMALL_SAMPLE_FALLBACK:
        lower, upper = np.percentile(x, [1.0, 99.0])
    else:
        lower, upper = float(x.min()), float(x.max())
    if not upper > lower:
        raise ValueError("degenerate label range")
    return ValueGroups(float(lower), float(upper), k_r)


def sample_support(
    embeddings: EmbeddingSet, groups: ValueGroups, shots: int, seed: int
) -> SupportSet:
    """Draw up to `shots` samples per value group, uniformly without replacement.

    Groups with fewer members contribute all of them and trigger a
    SupportShortfallWarning. Deterministic given the seed.
    """
    if embeddings.n < 1:
        raise ValueError("empty target set")
    if shots < 1:
        raise ValueError(f"need shots >= 1, got {shots}")
    group_ids = assign_groups(embeddings.labels, groups)
    rng = np.random.default_rng(seed)
    picked: list[np.ndarray] = []
    short: list[tuple[int, int]] = []
    for g in range(groups.k_r):
        members = np.flatnonzero(group_ids == g)
        if members.size < shots:
            short.append((g, int(members.size)))
            chosen = members
        else:
            chosen = rng.choice(members, size=shots, replace=False)
        picked.append(chosen)
    if short:
        warnings.warn(
            f"groups with fewer than {shots} members (group, count): {short}",
            SupportShortfallWarning,
            stacklevel=2,
        )
    indices = np.concatenate(picked).astype(np.int64)
    return SupportSet(
        indices=indices,
        labels=embeddings.labels[indices],
        group_of=group_ids[indices],
        shots=shots,
    )


# ---------------------------------------------------------------------------
# synthetic cross-domain benchmark

Y_LOW, Y_HIGH = 2.0, 25.0      # source label range, height-like
ARC_SPAN = 0.9 * np.pi         # slow ordered arc in the first two dims
COIL_AMPS = (0.56, 0.48, 0.42, 0.34)   # higher-frequency harmonics in dims 2..5:
COIL_FREQS = (3.0, 5.0, 8.0, 11.0)     # locally smooth, but they scramble
COIL_PHASES = (0.9, 2.1, 4.2, 0.3)     # mid-range Euclidean distances
ROTATION_PLANE = (0, 2)        # domain shift mixes the arc cosine with a coil axis


@dataclass(frozen=True)
class BenchmarkSpec:
    """Generator settings for one source/target pair."""

    n_source: int = 1200
    n_target: int = 1500
    dim: int = 16
    rotation_deg: float = 0.0
    label_scale: float = 1.0
    label_offset: float = 0.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 3:
            raise ValueError(f"need dim >= 3 for nontrivial rotations, got {self.dim}")
        if min(self.n_source, self.n_target) < 2:
            raise ValueError("need at least 2 samples per domain")
        if self.noise < 0:
            raise ValueError(f"need noise >= 0, got {self.noise}")


@dataclass(frozen=True)
class SyntheticBenchmark:
    source: EmbeddingSet
    target: EmbeddingSet
    spec: BenchmarkSpec


def _sphere_curve(u: np.ndarray, dim: int) -> np.ndarray:
    """Winding unit-sphere curve whose label order follows geodesic order.

    A slow arc in the first two dims carries the order; up to four coil
    harmonics in the next dims keep tiny neighborhoods faithful while making
    mid-range chord distances unreliable, which is the regime where diffusion
    through a dense graph beats direct distances to a sparse support set.
    """
    n_coil = min(dim - 2, len(COIL_AMPS))
    coil = np.stack(
        [
            COIL_AMPS[j] * np.sin(2.0 * np.pi * COIL_FREQS[j] * u + COIL_PHASES[j])
            for j in range(n_coil)
        ],
        axis=1,
    )
    radial = np.sqrt(1.0 - (coil * coil).sum(axis=1))
    theta = ARC_SPAN * (u - 0.5)
    out = np.zeros((u.size, dim))
    out[:, 0] = radial * np.cos(theta)
    out[:, 1] = radial * np.sin(theta)
    out[:, 2 : 2 + n_coil] = coil
    return out


def _rotation_matrix(dim: int, angle_rad: float) -> np.ndarray:
    i, j = ROTATION_PLANE
    rot = np.eye(dim)
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    rot[i, i] = c
    rot[j, j] = c
    rot[i, j] = -s
    rot[j, i] = s
    return rot


def make_synthetic_benchmark(spec: BenchmarkSpec) -> SyntheticBenchmark:
    """Deterministic source/target pair with controlled visual and label shift.

    Both domains draw a uniform latent, map it through the same sphere curve
    with additive feature noise, and label it monotonically. The target
    additionally rotates the features by `rotation_deg` and shifts labels
    affinely by (label_scale, label_offset).
    """
    rng = np.random.default_rng(spec.seed)

    def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        u = rng.uniform(size=n)
        pts = _sphere_curve(u, spec.dim)
        if spec.noise > 0:
            pts = pts + spec.noise * rng.standard_normal((n, spec.dim))
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
        return pts / norms, Y_LOW + (Y_HIGH - Y_LOW) * u

    x_s, y_s = draw(spec.n_source)
    x_t, y_t = draw(spec.n_target)
    rot = _rotation_matrix(spec.dim, np.deg2rad(spec.rotation_deg))
    x_t = x_t @ rot.T
    y_t = spec.label_scale * y_t + spec.label_offset

    source = EmbeddingSet(
        ids=tuple(f"src-{i:05d}" for i in range(spec.n_source)),
        vectors=x_s, labels=y_s, domain_tag="source",
    )
    target = EmbeddingSet(
        ids=tuple(f"tgt-{i:05d}" for i in range(spec.n_target)),
        vectors=x_t, labels=y_t, domain_tag="target",
    )
    for name, es in (("source", source), ("target", target)):
        bad = validate_embedding_set(es)
        if bad:
            raise AssertionError(f"generated {name} set violates invariants: {bad[:3]}")
    return SyntheticBenchmark(source=source, target=target, spec=spec)


# ---------------------------------------------------------------------------
# experiment orchestration

@dataclass(frozen=True)
class ExperimentConfig:
    """One multi-method, multi-seed comparison on a source/target pair."""

    methods: tuple[str, ...]
    shots: int = 5
    k_r: int = 5
    repeats: int = 10
    seeds: tuple[int, ...] = tuple(range(10))
    hyperparams: HyperParams = HyperParams()
    train: TrainSchedule = TrainSchedule()
    ridge_lambda: float = 1e-6
    ft_steps: int = 200
    ft_lr: float = 0.05
    gol_ft_steps: int = 120
    gol_ft_lr: float = 0.02
    shot_sweep: tuple[int, ...] = ()
    kv_sweep: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "shot_sweep", tuple(int(n) for n in self.shot_sweep))
        object.__setattr__(self, "kv_sweep", tuple(int(k) for k in self.kv_sweep))
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; valid: {list(METHODS)}")
        if self.repeats < 1:
            raise ValueError(f"need repeats >= 1, got {self.repeats}")
        if len(self.seeds) != self.repeats:
            raise ValueError(f"need {self.repeats} seeds, got {len(self.seeds)}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.shots < 1:
            raise ValueError(f"need shots >= 1, got {self.shots}")


@dataclass(frozen=True)
class MethodResult:
    """Per-run scores for one method; failed runs carry an error string."""

    method: str
    runs: tuple[float | None, ...]
    errors: tuple[str, ...]

    @property
    def completed(self) -> tuple[float, ...]:
        return tuple(r for r in self.runs if r is not None)

    @property
    def mean(self) -> float | None:
        done = self.completed
        return float(np.mean(done)) if done else None

    @property
    def std(self) -> float | None:
        done = self.completed
        return float(np.std(done)) if done else None

    @property
    def median(self) -> float | None:
        done = self.completed
        return float(np.median(done)) if done else None

    @property
    def complete(self) -> bool:
        return all(r is not None for r in self.runs)


@dataclass(frozen=True)
class ExperimentReport:
    results: tuple[MethodResult, ...]
    label_shift_w1: float
    config: dict
    warnings: tuple[str, ...] = ()
    shot_sweep: dict = field(default_factory=dict)   # N -> tuple[MethodResult, ...]
    kv_sweep: dict = field(default_factory=dict)     # k_v -> tuple[MethodResult, ...]

    def result(self, method: str) -> MethodResult:
        for r in self.results:
            if r.method == method:
                return r
        raise KeyError(method)


def needs_checkpoint(method: str) -> bool:
    return method.startswith("gol_")

def needs_source(method: str) -> bool:
    return method in ("regression", "regression_cal", "probe_ft")


def run_method(
    method: str,
    target: EmbeddingSet,
    support: SupportSet,
    query_idx: np.ndarray,
    hp: HyperParams,
    groups: ValueGroups,
    source: EmbeddingSet | None = None,
    checkpoint: Checkpoint | None = None,
    ridge_lambda: float = 1e-6,
    ft_steps: int = 200,
    ft_lr: float = 0.05,
    gol_ft_steps: int = 120,
    gol_ft_lr: float = 0.02,
    ft_seed: int = 0,
) -> np.ndarray:
    """Predict target values at `query_idx` with one adaptation method.

    This is the single code path shared by run_experiment and the CLI, so a
    one-off run and an experiment repeat with the same inputs agree exactly.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; valid: {list(METHODS)}")
    if needs_source(method) and source is None:
        raise ValueError(f"method {method!r} needs a source set")
    if needs_checkpoint(method) and checkpoint is None:
        raise ValueError(f"method {method!r} needs a trained checkpoint")
    k = hp.resolve_knn_k(support.shots)
    queries = np.asarray(query_idx, dtype=np.int64)

    if method == "knn":
        return predict_knn(
            target.vectors[queries], target.vectors[support.indices], support.labels,
            k=min(k, support.size),
        )
    if method == "regression":
        head = fit_linear_probe(source, ridge_lambda)
        return head.predict(target.vectors[queries])
    if method == "regression_cal":
        head = fit_linear_probe(source, ridge_lambda)
        raw = head.predict(target.vectors[support.indices])
        a, b = calibrate_linear(raw, support.labels)
        return a * head.predict(target.vectors[queries]) + b
    if method == "probe_ft":
        head = fit_linear_probe(source, ridge_lambda)
        head = finetune_probe(
            head, target.vectors[support.indices], support.labels, ft_steps, ft_lr
        )
        return head.predict(target.vectors[queries])

    embedder, refs = checkpoint.embedder, checkpoint.references
    if method == "gol_ft_mdr":
        sched = TrainSchedule(
            lr=gol_ft_lr, steps=gol_ft_steps,
            batch_size=min(16, max(2, support.size)),
            seed=ft_seed, embed_dim=embedder.out_dim,
        )
        tuned = train_toy_embedder(
            target.vectors[support.indices], support.labels, groups, hp, sched,
            init=(embedder, refs),
        )
        embedder, refs = tuned.embedder, tuned.references

    emb = embedder.embed(target.vectors)
    if method == "gol_knn":
        return predict_knn(
            emb[queries], emb[support.indices], support.labels, k=min(k, support.size)
        )
    # gol_mdr / gol_ft_mdr: diffuse support indicators through the target graph
    emb_set = EmbeddingSet(target.ids, emb, target.labels, target.domain_tag)
    graph = build_affinity(emb_set, k=min(k, target.n - 1), gamma=hp.diffusion_gamma)
    s = make_support_matrix(target.n, support.indices)
    scores = diffuse_closed(graph, s, hp.diffusion_alpha)
    k_v = min(hp.resolve_k_v(support.shots), support.size)
    return predict_mdr(scores, support.labels, k_v)[queries]


def _run_grid(
    methods: tuple[str, ...],
    source: EmbeddingSet,
    target: EmbeddingSet,
    groups: ValueGroups,
    shots: int,
    seeds: tuple[int, ...],
    hp: HyperParams,
    checkpoint: Checkpoint | None,
    cfg: ExperimentConfig,
    notes: list[str],
) -> tuple[MethodResult, ...]:
    runs: dict[str, list[float | None]] = {m: [] for m in methods}
    errors: dict[str, list[str]] = {m: [] for m in methods}
    for seed in seeds:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            support = sample_support(target, groups, shots, seed)
            query_idx = np.setdiff1d(np.arange(target.n), support.indices)
            for method in methods:
                try:
                    preds = run_method(
                        method, target, support, query_idx, hp, groups,
                        source=source, checkpoint=checkpoint,
                        ridge_lambda=cfg.ridge_lambda,
                        ft_steps=cfg.ft_steps, ft_lr=cfg.ft_lr,
                        gol_ft_steps=cfg.gol_ft_steps, gol_ft_lr=cfg.gol_ft_lr,
                        ft_seed=seed,
                    )
                    runs[method].append(r2_score(target.labels[query_idx], preds))
                except Exception as exc:  # noqa: BLE001 - recorded, not silenced
                    runs[method].append(None)
                    errors[method].append(f"seed {seed}: {exc}")
        for w in caught:
            msg = f"seed {seed}: {w.message}"
            if msg not in notes:
                notes.append(msg)
    return tuple(
        MethodResult(m, tuple(runs[m]), tuple(errors[m])) for m in methods
    )


def run_experiment(
    config: ExperimentConfig, source: EmbeddingSet, target: EmbeddingSet
) -> ExperimentReport:
    """Train once on the source, then score every method across seeded repeats.

    Each repeat draws a fresh support set from the target at the repeat's seed
    while the trained embedder stays fixed. Optional shot and k_v sweeps rerun
    the grid with the same seeds. Failed method runs are recorded, never
    silently dropped.
    """
    notes: list[str] = []
    checkpoint: Checkpoint | None = None
    if any(needs_checkpoint(m) for m in config.methods):
        src_groups = compute_group_bounds(source.labels, config.k_r)
        trained = train_toy_embedder(
            source.vectors, source.labels, src_groups, config.hyperparams, config.train
        )
        checkpoint = Checkpoint(
            trained.embedder, trained.references, src_groups,
            config.hyperparams, config.train.seed, config.train.steps,
        )
    groups = compute_group_bounds(target.labels, config.k_r)

    results = _run_grid(
        config.methods, source, target, groups, config.shots, config.seeds,
        config.hyperparams, checkpoint, config, notes,
    )

    shot_sweep: dict[int, tuple[MethodResult, ...]] = {}
    for n in config.shot_sweep:
        shot_sweep[n] = _run_grid(
            config.methods, source, target, groups, n, config.seeds,
            config.hyperparams, checkpoint, config, notes,
        )
    kv_sweep: dict[int, tuple[MethodResult, ...]] = {}
    for k_v in config.kv_sweep:
        hp = replace(config.hyperparams, k_v=k_v)
        kv_sweep[k_v] = _run_grid(
            config.methods, source, target, groups, config.shots, config.seeds,
            hp, checkpoint, config, notes,
        )

    return ExperimentReport(
        results=results,
        label_shift_w1=wasserstein1(source.labels, target.labels),
        config={
            "methods": list(config.methods),
            "shots": config.shots,
            "k_r": config.k_r,
            "repeats": config.repeats,
            "seeds": list(config.seeds),
            "hyperparams": config.hyperparams.to_dict(),
            "train": {
                "lr": config.train.lr, "steps": config.train.steps,
                "batch_size": config.train.batch_size, "seed": config.train.seed,
                "embed_dim": config.train.embed_dim, "lr_decay": config.train.lr_decay,
            },
            "ridge_lambda": config.ridge_lambda,
            "ft_steps": config.ft_steps, "ft_lr": config.ft_lr,
            "gol_ft_steps": config.gol_ft_steps, "gol_ft_lr": config.gol_ft_lr,
            "shot_sweep": list(config.shot_sweep),
            "kv_sweep": list(config.kv_sweep),
            "source": source.domain_tag,
            "target": target.domain_tag,
        },
        warnings=tuple(notes),
        shot_sweep=shot_sweep,
        kv_sweep=kv_sweep,
    )


# ---------------------------------------------------------------------------
# report serialization and 2-D projection export

def _method_result_dict(r: MethodResult) -> dict:
    return {
        "runs": [v for v in r.runs],
        "errors": list(r.errors),
        "mean": r.mean,
        "std": r.std,
        "median": r.median,
        "complete": r.complete,
    }


def report_to_dict(report: ExperimentReport) -> dict:
    return {
        "schema_version": 1,
        "label_shift_w1": report.label_shift_w1,
        "config": report.config,
        "methods": {r.method: _method_result_dict(r) for r in report.results},
        "warnings": list(report.warnings),
        "shot_sweep": {
            str(n): {r.method: _method_result_dict(r) for r in rs}
            for n, rs in report.shot_sweep.items()
        },
        "kv_sweep": {
            str(k): {r.method: _method_result_dict(r) for r in rs}
            for k, rs in report.kv_sweep.items()
        },
    }


def save_report_json(path, report: ExperimentReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, sort_keys=True, indent=1)
        fh.write("\n")


def save_report_csv(path, report: ExperimentReport) -> None:
    """Flat `method,run,r2` rows for the main grid; failed runs write empty r2."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "run", "r2"])
        for r in report.results:
            for i, v in enumerate(r.runs):
                writer.writerow([r.method, i, "" if v is None else "%.17g" % v])


def project_2d(embeddings: EmbeddingSet) -> np.ndarray:
    """First two principal components of the centered vectors, sign-fixed."""
    x = embeddings.vectors - embeddings.vectors.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2]
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return x @ comps.T


def save_projection_csv(path, embeddings: EmbeddingSet) -> None:
    """Write `id,label,px,py` rows for external figure tooling."""
    proj = project_2d(embeddings)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "px", "py"])
        for i in range(embeddings.n):
            writer.writerow([
                embeddings.ids[i], "%.17g" % embeddings.labels[i],
                "%.17g" % proj[i, 0], "%.17g" % proj[i, 1],
            ])
