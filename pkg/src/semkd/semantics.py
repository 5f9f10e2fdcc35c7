"""Class semantics: word-vector tables and superclass clustering.

A :class:`SemanticTable` holds one vector per class name, either parsed from a
GloVe-style text file or synthesized around given class means.  Base-task
classes are grouped into superclasses by seeded k-means over their vectors;
later classes are attached to the nearest frozen cluster center.  Superclass
indices are 1-based everywhere, matching the serialized map format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateVectorError,
    DuplicateError,
    ParseError,
    ShapeError,
)


@dataclass(frozen=True)
class SemanticTable:
    """Per-class semantic vectors, all of dimension ``dim``."""

    dim: int
    vectors: dict[str, np.ndarray]
    source: str = "loaded-file"

    def __post_init__(self):
        if self.dim <= 0:
            raise ConfigurationError(f"semantic dimension must be positive, got {self.dim}")
        for name, vec in self.vectors.items():
            if vec.shape != (self.dim,):
                raise ShapeError(
                    f"vector for {name!r} has shape {vec.shape}, expected ({self.dim},)"
                )
            if not np.linalg.norm(vec) > 0.0:
                raise DegenerateVectorError(f"vector for {name!r} has zero norm")

    def __contains__(self, name: str) -> bool:
        return name in self.vectors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.vectors[name]

    @property
    def classes(self) -> list[str]:
        return list(self.vectors)

    def matrix(self, names) -> np.ndarray:
        """Stack the vectors of ``names`` (in that order) into an array."""
        missing = [n for n in names if n not in self.vectors]
        if missing:
            raise KeyError(f"classes missing from semantic table: {missing}")
        return np.stack([self.vectors[n] for n in names]).astype(np.float64)


def load_semantics(path, dim: int) -> SemanticTable:
    """Parse a whitespace-delimited ``name v1 ... vd`` file into a table.

    Raises :class:`ParseError` (with the offending line number) for
    non-numeric fields, :class:`ShapeError` for wrong vector lengths, and
    :class:`DuplicateError` for repeated class names.
    """
    vectors: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            name, raw = parts[0], parts[1:]
            try:
                values = [float(tok) for tok in raw]
            except ValueError as exc:
                raise ParseError(f"line {lineno}: non-numeric value in entry {name!r}") from exc
            if len(values) != dim:
                raise ShapeError(
                    f"line {lineno}: entry {name!r} has {len(values)} values, expected {dim}"
                )
            if name in vectors:
                raise DuplicateError(f"line {lineno}: duplicate class name {name!r}")
            vectors[name] = np.asarray(values, dtype=np.float64)
    return SemanticTable(dim=dim, vectors=vectors, source="loaded-file")


def synthesize_semantics(class_means, noise_scale: float, seed: int, names=None) -> SemanticTable:
    """Build a table of ``mean + noise_scale * gaussian`` vectors.

    With ``noise_scale=0`` the vectors equal the means exactly.  Names default
    to ``class_000``, ``class_001``, ...
    """
    means = [np.asarray(m, dtype=np.float64) for m in class_means]
    if not means:
        raise ConfigurationError("need at least one class mean")
    dim = means[0].shape[0] if means[0].ndim == 1 else -1
    for m in means:
        if m.ndim != 1 or m.shape[0] != dim:
            raise ShapeError("class means must be equal-length 1-d vectors")
    if noise_scale < 0:
        raise ConfigurationError(f"noise_scale must be non-negative, got {noise_scale}")
    if names is None:
        names = [f"class_{i:03d}" for i in range(len(means))]
    if len(names) != len(means):
        raise ShapeError(f"{len(names)} names for {len(means)} means")
    if len(set(names)) != len(names):
        raise DuplicateError("class names must be unique")
    rng = np.random.default_rng(seed)
    vectors = {
        name: mean + noise_scale * rng.standard_normal(dim)
        for name, mean in zip(names, means)
    }
    return SemanticTable(dim=dim, vectors=vectors, source="synthetic")


@dataclass(frozen=True)
class KMeansResult:
    centers: np.ndarray  # (k, d)
    labels: np.ndarray  # (n,), 0-based
    sse_trace: tuple[float, ...]  # within-cluster SSE after init and each Lloyd sweep


def _assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin returns the first minimal index, which is the tie-break contract
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _sse(points: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> float:
    return float(((points - centers[labels]) ** 2).sum())


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            probs = d2 / total
            idx = int(rng.choice(n, p=probs))
        else:
            idx = int(rng.integers(n))
        centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(points, k: int, seed: int, max_iter: int = 100, tol: float = 1e-8) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding and a fixed RNG seed.

    The SSE trace is non-increasing; empty clusters are re-seeded with the
    point farthest from its currently assigned center so k stays fixed.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"points must be a 2-d array, got shape {points.shape}")
    n = points.shape[0]
    if k <= 0 or k > n:
        raise ConfigurationError(f"k must be in [1, {n}], got {k}")
    if max_iter <= 0:
        raise ConfigurationError(f"max_iter must be positive, got {max_iter}")
    if tol < 0:
        raise ConfigurationError(f"tol must be non-negative, got {tol}")

    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(points, k, rng)
    labels = _assign(points, centers)
    trace = [_sse(points, labels, centers)]
    for _ in range(max_iter):
        for j in range(k):
            members = points[labels == j]
            if len(members) == 0:
                dist = ((points - centers[labels]) ** 2).sum(axis=1)
                centers[j] = points[int(dist.argmax())]
            else:
                centers[j] = members.mean(axis=0)
        labels = _assign(points, centers)
        trace.append(_sse(points, labels, centers))
        if trace[-2] - trace[-1] <= tol:
            break
    return KMeansResult(centers=centers, labels=labels, sse_trace=tuple(trace))


@dataclass(frozen=True)
class SuperclassMap:
    """Frozen cluster centers plus a 1-based superclass label per class."""

    num_superclasses: int
    centers: np.ndarray  # (N, d)
    assignment: dict[str, int]
    seed: int
    sse_trace: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.centers.shape[0] != self.num_superclasses:
            raise ShapeError(
                f"{self.centers.shape[0]} centers for {self.num_superclasses} superclasses"
            )
        bad = {c: j for c, j in self.assignment.items() if not 1 <= j <= self.num_superclasses}
        if bad:
            raise ConfigurationError(f"superclass indices outside [1, {self.num_superclasses}]: {bad}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "centers": self.centers.tolist(),
                "assignment": dict(self.assignment),
                "seed": self.seed,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SuperclassMap":
        data = json.loads(text)
        centers = np.asarray(data["centers"], dtype=np.float64)
        return cls(
            num_superclasses=centers.shape[0],
            centers=centers,
            assignment={str(k): int(v) for k, v in data["assignment"].items()},
            seed=int(data["seed"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "SuperclassMap":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def cluster_base_classes(
    table: SemanticTable,
    base_classes,
    num_superclasses: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> SuperclassMap:
    """Group base classes into superclasses by k-means over their vectors.

    Classes are processed in sorted-name order so the result is a pure
    function of (vectors, num_superclasses, seed, max_iter, tol).
    """
    names = sorted(base_classes)
    if not names:
        raise ConfigurationError("base class set is empty")
    if num_superclasses > len(names):
        raise ConfigurationError(
            f"requested {num_superclasses} superclasses for {len(names)} base classes"
        )
    points = table.matrix(names)
    result = kmeans(points, num_superclasses, seed=seed, max_iter=max_iter, tol=tol)
    assignment = {name: int(lbl) + 1 for name, lbl in zip(names, result.labels)}
    return SuperclassMap(
        num_superclasses=num_superclasses,
        centers=result.centers,
        assignment=assignment,
        seed=seed,
        sse_trace=result.sse_trace,
    )


def assign_novel_class(smap: SuperclassMap, table: SemanticTable, class_id: str) -> int:
    """Return the 1-based index of the nearest center; ties go to the lowest index."""
    if class_id not in table:
        raise KeyError(f"class {class_id!r} missing from semantic table")
    vec = table[class_id]
    d2 = ((smap.centers - vec[None, :]) ** 2).sum(axis=1)
    return int(d2.argmin()) + 1
