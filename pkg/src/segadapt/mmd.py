"""Kernel two-sample distances between embedded image sets.

Squared maximum mean discrepancy with an RBF kernel. The bandwidth defaults
to the median heuristic computed on the pooled pair of embedding sets. The
biased V-statistic is the default estimator: it is non-negative and exactly
zero on identical sample lists, so domain distance matrices have clean zero
diagonals. The unbiased U-statistic is available and may go slightly
negative.

Distance matrices are directional: row i is embedded by the model pretrained
on domain i, so entry (i, j) and entry (j, i) use different feature maps and
the matrix need not be symmetric.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import DegenerateDistances, MissingModel, ShapeError
from .images import GrayImage
from .pools import DomainPool
from .rng import derive_seed, make_rng

__all__ = [
    "KernelConfig",
    "DistanceMatrix",
    "rbf_kernel",
    "median_heuristic",
    "mmd2",
    "domain_distance_matrix",
    "select_optimal_source",
    "rank_sources",
    "rank_sources_for_target",
    "save_matrix",
    "load_matrix",
]

MEDIAN_HEURISTIC = "median-heuristic"


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel spec; bandwidth is a positive number or the median heuristic."""

    kind: str = "rbf"
    bandwidth: float | str = MEDIAN_HEURISTIC

    def __post_init__(self):
        if self.kind != "rbf":
            raise ValueError(f"unsupported kernel kind {self.kind!r}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != MEDIAN_HEURISTIC:
                raise ValueError(f"unknown bandwidth rule {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise ValueError("fixed bandwidth must be positive")


def rbf_kernel(x: np.ndarray, y: np.ndarray, sigma: float) -> float:
    """exp(-||x - y||^2 / (2 sigma^2))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"embedding length mismatch: {x.shape} vs {y.shape}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    sq = float(np.sum((x - y) ** 2))
    return float(np.exp(-sq / (2.0 * sigma * sigma)))


def median_heuristic(points: np.ndarray) -> float:
    """Median pairwise Euclidean distance over distinct index pairs."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[0] < 2:
        raise ValueError("median heuristic needs at least 2 points")
    sigma = float(np.median(pdist(pts)))
    if sigma <= 0:
        raise DegenerateDistances("median pairwise distance is zero")
    return sigma


def _as_matrix(embeddings) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if arr.ndim != 2:
        raise ShapeError(f"embeddings must be (n, D), got {arr.shape}")
    return arr


def _resolve_sigma(x: np.ndarray, y: np.ndarray, config: KernelConfig) -> float:
    if isinstance(config.bandwidth, str):
        return median_heuristic(np.concatenate([x, y], axis=0))
    return float(config.bandwidth)


def _mmd2_with_sigma(
    x: np.ndarray, y: np.ndarray, config: KernelConfig, estimator: str
) -> tuple[float, float]:
    x = _as_matrix(x)
    y = _as_matrix(y)
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"embedding dims differ: {x.shape[1]} vs {y.shape[1]}")
    min_n = 2 if estimator == "unbiased" else 1
    if x.shape[0] < min_n or y.shape[0] < min_n:
        raise ValueError(f"{estimator} estimator needs at least {min_n} samples per set")
    if estimator not in ("biased", "unbiased"):
        raise ValueError(f"unknown estimator {estimator!r}")
    sigma = _resolve_sigma(x, y, config)
    gamma = 1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(-gamma * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-gamma * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    n, m = x.shape[0], y.shape[0]
    if estimator == "biased":
        value = kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
    else:
        xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
        yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
        value = xx + yy - 2.0 * kxy.mean()
    return float(value), sigma


def mmd2(
    x,
    y,
    config: KernelConfig = KernelConfig(),
    estimator: str = "biased",
) -> float:
    """Squared MMD between two embedding sets under an RBF kernel."""
    value, _ = _mmd2_with_sigma(x, y, config, estimator)
    return value


@dataclass(frozen=True)
class DistanceMatrix:
    """Directional pairwise domain distances with computation metadata."""

    names: tuple[str, ...]
    values: np.ndarray
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        n = len(self.names)
        if vals.shape != (n, n):
            raise ShapeError(f"matrix shape {vals.shape} does not match {n} names")
        if len(set(self.names)) != n:
            raise ValueError("domain names must be unique")
        vals = np.ascontiguousarray(vals)
        vals.flags.writeable = False
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", vals)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown domain {name!r}") from None

    def entry(self, row: str, col: str) -> float:
        return float(self.values[self.index(row), self.index(col)])


def _default_embedder():
    from .model import embed_images

    return embed_images


def _subsample_ids(n: int, cap: int, seed: int, label: str) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    rng = make_rng(derive_seed(seed, "subsample", label))
    return np.sort(rng.choice(n, size=cap, replace=False))


def domain_distance_matrix(
    domains: Sequence[DomainPool],
    models: Mapping[str, object],
    config: KernelConfig = KernelConfig(),
    sample_cap: int = 256,
    seed: int = 0,
    estimator: str = "biased",
    embedder: Optional[Callable] = None,
) -> DistanceMatrix:
    """Pairwise MMD^2 between domains, each row embedded by that row's model.

    Entry (i, j) compares up to sample_cap images of domain i against up to
    sample_cap images of domain j, both mapped through the model pretrained
    on domain i. Subsampling is deterministic in (seed, domain name).
    """
    if sample_cap < 2:
        raise ValueError("sample_cap must be at least 2")
    embed = embedder if embedder is not None else _default_embedder()
    names = [d.name for d in domains]
    for name in names:
        if name not in models:
            raise MissingModel(f"no pretrained model for row domain {name!r}")
    picks = {
        d.name: [d.image(i) for i in _subsample_ids(len(d), sample_cap, seed, d.name)]
        for d in domains
    }
    n = len(domains)
    values = np.zeros((n, n), dtype=np.float64)
    sigmas = np.zeros((n, n), dtype=np.float64)
    for i, row in enumerate(names):
        model = models[row]
        cache = {name: _as_matrix(embed(model, imgs)) for name, imgs in picks.items()}
        for j, col in enumerate(names):
            value, sigma = _mmd2_with_sigma(cache[row], cache[col], config, estimator)
            values[i, j] = value
            sigmas[i, j] = sigma
    metadata = {
        "kernel": config.kind,
        "bandwidth": config.bandwidth,
        "sigma": sigmas.tolist(),
        "estimator": estimator,
        "sample_cap": sample_cap,
        "seed": seed,
        "row_embedder": {name: f"model[{name}]" for name in names},
    }
    return DistanceMatrix(tuple(names), values, metadata)


def rank_sources_for_target(
    target: DomainPool,
    sources: Sequence[DomainPool],
    models: Mapping[str, object],
    config: KernelConfig = KernelConfig(),
    sample_cap: int = 256,
    seed: int = 0,
    estimator: str = "biased",
    embedder: Optional[Callable] = None,
) -> list[tuple[str, float]]:
    """(source, MMD^2 to target) ascending, each row under its own model.

    Computes just the target column of the full matrix; subsampling uses the
    same (seed, domain name) streams, so entries agree with
    domain_distance_matrix.
    """
    if not sources:
        raise ValueError("empty candidate set")
    if any(s.name == target.name for s in sources):
        raise ValueError("target must be excluded from candidates")
    embed = embedder if embedder is not None else _default_embedder()
    for s in sources:
        if s.name not in models:
            raise MissingModel(f"no pretrained model for row domain {s.name!r}")
    target_imgs = [
        target.image(i) for i in _subsample_ids(len(target), sample_cap, seed, target.name)
    ]
    rows = []
    for s in sources:
        imgs = [s.image(i) for i in _subsample_ids(len(s), sample_cap, seed, s.name)]
        model = models[s.name]
        xs = _as_matrix(embed(model, imgs))
        xt = _as_matrix(embed(model, target_imgs))
        value, _ = _mmd2_with_sigma(xs, xt, config, estimator)
        rows.append((s.name, float(value)))
    order = sorted(range(len(rows)), key=lambda i: (rows[i][1], i))
    return [rows[i] for i in order]


def select_optimal_source(matrix: DistanceMatrix, target: str, candidates: Sequence[str]) -> str:
    """Candidate row with the smallest distance to the target column; ties keep order."""
    ranked = rank_sources(matrix, target, candidates)
    return ranked[0][0]


def rank_sources(
    matrix: DistanceMatrix, target: str, candidates: Sequence[str]
) -> list[tuple[str, float]]:
    """Candidates sorted by ascending distance to target; stable in declared order."""
    if not candidates:
        raise ValueError("empty candidate set")
    if target in candidates:
        raise ValueError("target must be excluded from candidates")
    matrix.index(target)
    dists = [(c, matrix.entry(c, target)) for c in candidates]
    order = sorted(range(len(dists)), key=lambda i: (dists[i][1], i))
    return [dists[i] for i in order]


def save_matrix(matrix: DistanceMatrix, csv_path: str | Path) -> Path:
    """CSV with domain-name headers plus a JSON metadata sidecar."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["domain"] + list(matrix.names))
        for i, name in enumerate(matrix.names):
            writer.writerow([name] + [repr(float(v)) for v in matrix.values[i]])
    meta_path = csv_path.with_suffix(".json")
    meta_path.write_text(json.dumps(matrix.metadata, indent=2, sort_keys=True) + "\n")
    return csv_path


def load_matrix(csv_path: str | Path) -> DistanceMatrix:
    csv_path = Path(csv_path)
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = tuple(rows[0][1:])
    values = np.array([[float(v) for v in row[1:]] for row in rows[1:]], dtype=np.float64)
    meta_path = csv_path.with_suffix(".json")
    metadata = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return DistanceMatrix(names, values, metadata)
