"""Shared domain types: embedding sets, value groups, support sets, hyperparameters.

All numeric state is float64 and immutable after construction; arrays are
frozen (writeable=False) so instances can be shared across workers safely.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

NORM_TOL = 1e-9          # allowed deviation of row norms from 1
FLOAT_FMT = "%.17g"      # decimal text round-trips float64 exactly


class ConfigError(ValueError):
    """Invalid configuration or input file (CLI exit code 2)."""


class TrainingDivergedError(RuntimeError):
    """Training loss blew up or became non-finite (CLI exit code 3)."""

    def __init__(self, step: int, message: str):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


class SolverError(RuntimeError):
    """Linear-system solve failed to converge (CLI exit code 4)."""


class NormalizationWarning(UserWarning):
    """Loaded vectors required renormalization beyond the reporting threshold."""


class SupportShortfallWarning(UserWarning):
    """A value group had fewer members than the requested number of shots."""


class IsolatedNodeWarning(UserWarning):
    """A graph node ended up with no positive-affinity neighbors."""


def _frozen(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Violation:
    """One failed invariant, reported (never raised) by validators."""

    kind: str
    index: int | None
    detail: str


@dataclass(frozen=True)
class EmbeddingSet:
    """Labeled unit-norm vectors from one domain.

    Parameters
    ----------
    ids : sequence of str, sample identifiers.
    vectors : (n, d) float64, rows expected to have unit Euclidean norm.
    labels : (n,) float64, continuous target values (units are opaque).
    domain_tag : str, e.g. "source" or "target".
    """

    ids: tuple[str, ...]
    vectors: np.ndarray
    labels: np.ndarray
    domain_tag: str

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "vectors", _frozen(np.atleast_2d(self.vectors)))
        object.__setattr__(self, "labels", _frozen(np.atleast_1d(self.labels)))
        if len(self.ids) != self.vectors.shape[0] or len(self.ids) != self.labels.shape[0]:
            raise ValueError(
                f"inconsistent lengths: {len(self.ids)} ids, "
                f"{self.vectors.shape[0]} vectors, {self.labels.shape[0]} labels"
            )

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def take(self, indices: np.ndarray, domain_tag: str | None = None) -> "EmbeddingSet":
        """Subset by row indices, preserving order of `indices`."""
        idx = np.asarray(indices, dtype=int)
        return EmbeddingSet(
            ids=tuple(self.ids[i] for i in idx),
            vectors=self.vectors[idx],
            labels=self.labels[idx],
            domain_tag=self.domain_tag if domain_tag is None else domain_tag,
        )


def validate_embedding_set(es: EmbeddingSet) -> list[Violation]:
    """Check all EmbeddingSet invariants; returns one Violation per failure.

    Never raises: an empty list means the set is valid.
    """
    out: list[Violation] = []
    n, d = es.vectors.shape
    if n < 1:
        out.append(Violation("size", None, "need at least 1 sample"))
    if d < 2:
        out.append(Violation("dim", None, f"need dimension >= 2, got {d}"))
    finite_rows = np.isfinite(es.vectors).all(axis=1)
    for i in np.flatnonzero(~finite_rows):
        out.append(Violation("vector_not_finite", int(i), "vector has NaN/Inf entries"))
    norms = np.linalg.norm(np.where(np.isfinite(es.vectors), es.vectors, 0.0), axis=1)
    for i in range(n):
        if finite_rows[i] and abs(norms[i] - 1.0) > NORM_TOL:
            out.append(Violation("row_norm", int(i), f"norm {norms[i]!r} != 1"))
    for i in np.flatnonzero(~np.isfinite(es.labels)):
        out.append(Violation("label_not_finite", int(i), "label is not finite"))
    return out


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm; zero rows raise."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms < 1e-300):
        raise ValueError("cannot normalize zero row")
    return x / norms


@dataclass(frozen=True)
class ValueGroups:
    """Equal-width partition of the label range into k_r groups.

    `boundaries` has k_r + 1 strictly increasing edges with
    boundaries[0] == lower and boundaries[k_r] == upper.
    """

    lower: float
    upper: float
    k_r: int
    boundaries: np.ndarray = field(init=False)

    def __post_init__(self):
        if not (np.isfinite(self.lower) and np.isfinite(self.upper)):
            raise ValueError("group bounds must be finite")
        if self.k_r < 1:
            raise ValueError(f"need k_r >= 1, got {self.k_r}")
        if not self.upper > self.lower:
            raise ValueError(f"need upper > lower, got [{self.lower}, {self.upper}]")
        edges = np.linspace(self.lower, self.upper, self.k_r + 1)
        widths = np.diff(edges)
        if not np.all(widths > 0) or np.ptp(widths) > 1e-12 * max(1.0, abs(self.upper - self.lower)):
            raise ValueError("group widths are not equal")
        object.__setattr__(self, "boundaries", _frozen(edges))

    @property
    def width(self) -> float:
        return (self.upper - self.lower) / self.k_r


@dataclass(frozen=True)
class SupportSet:
    """Labeled target-domain samples drawn k_r-way N-shot.

    `indices` point into the target EmbeddingSet the set was drawn from;
    `group_of` holds each sample's value-group index.
    """

    indices: np.ndarray
    labels: np.ndarray
    group_of: np.ndarray
    shots: int

    def __post_init__(self):
        object.__setattr__(self, "indices", _frozen(self.indices, dtype=np.int64))
        object.__setattr__(self, "labels", _frozen(self.labels))
        object.__setattr__(self, "group_of", _frozen(self.group_of, dtype=np.int64))
        if len(set(self.indices.tolist())) != self.indices.size:
            raise ValueError("support indices must be distinct")
        if self.indices.shape != self.labels.shape or self.indices.shape != self.group_of.shape:
            raise ValueError("support fields must have equal length")
        if self.shots < 1:
            raise ValueError("need shots >= 1")
        counts = np.bincount(self.group_of) if self.group_of.size else np.zeros(0, int)
        if counts.size and counts.max() > self.shots:
            raise ValueError(f"a group holds more than {self.shots} samples")

    @property
    def size(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class ReferencePoints:
    """Ordered anchor points, one per value group; rows are free vectors in R^d."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(np.atleast_2d(self.points)))
        if self.points.shape[0] < 2:
            raise ValueError("need at least 2 reference points")
        if not np.isfinite(self.points).all():
            raise ValueError("reference points must be finite")

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class HyperParams:
    """Knobs shared across the pipeline.

    `knn_k` and `k_v` default to None, which resolves to N and 2N at the point
    of use (N = shots per group). `gol_margin` is the metric-loss margin; it is
    named apart from `diffusion_gamma`, the affinity exponent.
    """

    diffusion_alpha: float = 0.99
    diffusion_gamma: float = 3.0
    knn_k: int | None = None
    k_v: int | None = None
    gol_margin: float = 0.1
    loss_weights: tuple[float, float, float] = (1.0, 66.0, 33.0)

    def __post_init__(self):
        if not 0.0 < self.diffusion_alpha < 1.0:
            raise ValueError(f"need 0 < diffusion_alpha < 1, got {self.diffusion_alpha}")
        if self.diffusion_gamma <= 0:
            raise ValueError(f"need diffusion_gamma > 0, got {self.diffusion_gamma}")
        if self.knn_k is not None and self.knn_k < 1:
            raise ValueError(f"need knn_k >= 1, got {self.knn_k}")
        if self.k_v is not None and self.k_v < 1:
            raise ValueError(f"need k_v >= 1, got {self.k_v}")
        if self.gol_margin <= 0:
            raise ValueError(f"need gol_margin > 0, got {self.gol_margin}")
        if len(self.loss_weights) != 3:
            raise ValueError("loss_weights must be a (w_o, w_m, w_c) triple")
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))

    def resolve_knn_k(self, shots: int) -> int:
        return self.knn_k if self.knn_k is not None else int(shots)

    def resolve_k_v(self, shots: int) -> int:
        return self.k_v if self.k_v is not None else 2 * int(shots)

    def to_dict(self) -> dict:
        return {
            "diffusion_alpha": self.diffusion_alpha,
            "diffusion_gamma": self.diffusion_gamma,
            "knn_k": self.knn_k,
            "k_v": self.k_v,
            "gol_margin": self.gol_margin,
            "loss_weights": list(self.loss_weights),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {k: d[k] for k in (
            "diffusion_alpha", "diffusion_gamma", "knn_k", "k_v", "gol_margin", "loss_weights",
        ) if k in d}
        if "loss_weights" in known:
            known["loss_weights"] = tuple(known["loss_weights"])
        return cls(**known)


def save_embedding_csv(path, es: EmbeddingSet) -> None:
    """Write `id,label,domain,e0..e{d-1}` with full float64 precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "domain"] + [f"e{j}" for j in range(es.dim)])
        for i in range(es.n):
            writer.writerow(
                [es.ids[i], FLOAT_FMT % es.labels[i], es.domain_tag]
                + [FLOAT_FMT % v for v in es.vectors[i]]
            )


def load_embedding_csv(path, domain: str | None = None) -> EmbeddingSet:
    """Load an embedding CSV, renormalizing rows to unit norm.

    The file must contain a single domain unless `domain` selects one of
    several. Rows whose norm was off by more than 1e-6 before renormalization
    trigger a NormalizationWarning.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"empty embedding file: {path}") from None
        if header[:3] != ["id", "label", "domain"]:
            raise ConfigError(f"bad embedding header in {path}: {header[:3]}")
        dim = len(header) - 3
        if dim < 2:
            raise ConfigError(f"embedding file {path} has dimension {dim} < 2")
        ids, labels, domains, rows = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 3:
                raise ConfigError(f"{path}:{lineno}: expected {dim + 3} fields, got {len(row)}")
            ids.append(row[0])
            labels.append(float(row[1]))
            domains.append(row[2])
            rows.append([float(v) for v in row[3:]])
    if not ids:
        raise ConfigError(f"no data rows in embedding file: {path}")
    domains_arr = np.array(domains)
    if domain is None:
        uniq = sorted(set(domains))
        if len(uniq) > 1:
            raise ConfigError(f"{path} holds domains {uniq}; pass domain= to select one")
        keep = np.arange(len(ids))
        tag = uniq[0]
    else:
        keep = np.flatnonzero(domains_arr == domain)
        if keep.size == 0:
            raise ConfigError(f"{path} has no rows with domain {domain!r}")
        tag = domain
    vectors = np.asarray(rows, dtype=np.float64)[keep]
    if not np.isfinite(vectors).all():
        raise ConfigError(f"{path}: non-finite embedding entries")
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms < 1e-300):
        raise ConfigError(f"{path}: zero embedding row cannot be normalized")
    drift = np.abs(norms - 1.0)
    if np.any(drift > 1e-6):
        worst = int(np.argmax(drift))
        warnings.warn(
            f"{path}: {int((drift > 1e-6).sum())} rows renormalized "
            f"(worst drift {drift[worst]:.3g} at row {worst})",
            NormalizationWarning,
            stacklevel=2,
        )
    return EmbeddingSet(
        ids=tuple(ids[i] for i in keep),
        vectors=vectors / norms[:, None],
        labels=np.asarray(labels)[keep],
        domain_tag=tag,
    )
