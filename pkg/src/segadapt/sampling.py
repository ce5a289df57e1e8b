"""Batch selection over the unlabeled pool.

Six strategies: random, the three uncertainty-rank windows (min / max /
median), a gradient-embedding D^2 selector, and uncertainty-weighted k-means.
Every sampler returns distinct pool indices drawn from the unlabeled set and
is deterministic under a fixed seed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DegenerateEmbeddings, InvalidBatch, PoolExhausted
from .model import ModelParams, embed_images, predict_with_features
from .pools import DomainPool
from .rng import derive_seed, make_rng
from .uncertainty import UncertaintyConfig, image_uncertainty

__all__ = [
    "SAMPLER_NAMES",
    "SamplerKind",
    "sample",
    "sample_median_uncertainty",
    "sample_badge",
    "sample_clue",
    "dsq_select",
    "weighted_kmeans_select",
]

SAMPLER_NAMES = (
    "random",
    "min-uncertainty",
    "max-uncertainty",
    "median-uncertainty",
    "badge",
    "clue",
)


@dataclass(frozen=True)
class SamplerKind:
    name: str
    kmeans_iters: int = 50

    def __post_init__(self):
        if self.name not in SAMPLER_NAMES:
            raise ValueError(f"unknown sampler {self.name!r}; expected one of {SAMPLER_NAMES}")
        if self.kmeans_iters < 1:
            raise ValueError("kmeans_iters must be at least 1")


def _check_batch(k: int, n_unlabeled: int):
    if k < 1:
        raise InvalidBatch(f"batch size must be at least 1, got {k}")
    if k > n_unlabeled:
        raise PoolExhausted(f"requested {k} samples but only {n_unlabeled} unlabeled remain")


def _scored_ascending(model, pool, config, seed, ids):
    """(index, U) pairs sorted ascending by uncertainty, ties by image id."""
    scored = [
        (i, image_uncertainty(model, pool.image(i), config, seed).value) for i in ids
    ]
    return sorted(scored, key=lambda t: (t[1], pool.sample_ids[t[0]]))


def sample_median_uncertainty(scores_ascending: Sequence[tuple[int, float]], k: int):
    """The k contiguous ranks starting at floor((n - k) / 2)."""
    n = len(scores_ascending)
    _check_batch(k, n)
    start = (n - k) // 2
    return tuple(idx for idx, _ in scores_ascending[start : start + k])


def dsq_select(vectors: np.ndarray, k: int, seed: int) -> tuple[int, ...]:
    """k-means++ style seeding over row vectors; returns row positions.

    First pick is the row with the largest norm; each later pick is drawn
    with probability proportional to squared distance from the chosen set.
    Identical rows trigger a DegenerateEmbeddings warning and positional
    fallback.
    """
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if n == 1:
        return (0,)
    if np.ptp(x, axis=0).max(initial=0.0) == 0.0:
        warnings.warn("all embeddings identical; selecting in id order", DegenerateEmbeddings)
        return tuple(range(k))
    rng = make_rng(seed)
    norms = np.linalg.norm(x, axis=1)
    chosen = [int(norms.argmax())]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        d2[chosen] = 0.0
        total = d2.sum()
        if total <= 0.0:
            # remaining rows coincide with chosen ones; fill positionally
            rest = [i for i in range(n) if i not in chosen]
            chosen.extend(rest[: k - len(chosen)])
            break
        pick = int(rng.choice(n, p=d2 / total))
        chosen.append(pick)
        d2 = np.minimum(d2, ((x - x[pick]) ** 2).sum(axis=1))
    return tuple(chosen)


def weighted_kmeans_select(
    vectors: np.ndarray, weights: np.ndarray, k: int, seed: int, iters: int = 50
) -> tuple[int, ...]:
    """Weighted Lloyd k-means; returns the row nearest each centroid.

    Initialization draws the first centroid with probability proportional to
    the weights, then proportional to weight times squared distance. Rows
    returned are distinct (greedy nearest-unassigned per centroid).
    """
    x = np.asarray(vectors, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n = x.shape[0]
    if w.shape != (n,):
        raise ValueError("one weight per vector required")
    if w.min() < 0:
        raise ValueError("weights must be non-negative")
    if n == 1:
        return (0,)
    if np.ptp(x, axis=0).max(initial=0.0) == 0.0:
        warnings.warn("all embeddings identical; selecting in id order", DegenerateEmbeddings)
        return tuple(range(k))
    if w.sum() <= 0.0:
        w = np.ones(n)
    rng = make_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    first = int(rng.choice(n, p=w / w.sum()))
    centroids[0] = x[first]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        score = w * d2
        total = score.sum()
        if total <= 0.0:
            centroids[j] = x[int(rng.integers(0, n))]
        else:
            centroids[j] = x[int(rng.choice(n, p=score / total))]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))

    assign = None
    for _ in range(iters):
        dist = cdist(x, centroids, "sqeuclidean")
        new_assign = dist.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = assign == j
            mass = w[members].sum()
            if mass > 0.0:
                centroids[j] = (w[members, None] * x[members]).sum(axis=0) / mass
            else:
                # dead centroid: reseed at the worst-served heavy row
                far = int((w * dist[np.arange(n), assign]).argmax())
                centroids[j] = x[far]

    dist = cdist(x, centroids, "sqeuclidean")
    chosen: list[int] = []
    for j in range(k):
        order = np.lexsort((np.arange(n), dist[:, j]))
        pick = next(int(i) for i in order if int(i) not in chosen)
        chosen.append(pick)
    return tuple(chosen)


def _badge_embeddings(model: ModelParams, pool: DomainPool, ids) -> np.ndarray:
    """Outer product of mean class residual and mean decoder feature, per image."""
    rows = []
    for i in ids:
        probs, feats = predict_with_features(model, pool.image(i))
        p = probs.probs.astype(np.float64)
        onehot = np.eye(p.shape[2])[p.argmax(axis=2)]
        residual = (p - onehot).mean(axis=(0, 1))
        pooled = feats.astype(np.float64).mean(axis=(0, 1))
        rows.append(np.outer(residual, pooled).ravel())
    return np.stack(rows)


def sample_badge(model: ModelParams, pool: DomainPool, k: int, seed: int) -> tuple[int, ...]:
    ids = sorted(pool.unlabeled_ids)
    _check_batch(k, len(ids))
    g = _badge_embeddings(model, pool, ids)
    positions = dsq_select(g, k, derive_seed(seed, "sample", "badge"))
    return tuple(ids[p] for p in positions)


def sample_clue(
    model: ModelParams,
    pool: DomainPool,
    k: int,
    config: UncertaintyConfig,
    seed: int,
    iters: int = 50,
) -> tuple[int, ...]:
    ids = sorted(pool.unlabeled_ids)
    _check_batch(k, len(ids))
    feats = embed_images(model, [pool.image(i) for i in ids]).astype(np.float64)
    weights = np.array(
        [image_uncertainty(model, pool.image(i), config, seed).value for i in ids]
    )
    positions = weighted_kmeans_select(
        feats, weights, k, derive_seed(seed, "sample", "clue"), iters
    )
    return tuple(ids[p] for p in positions)


def sample(
    kind: SamplerKind | str,
    model: ModelParams,
    pool: DomainPool,
    k: int,
    config: UncertaintyConfig,
    seed: int,
) -> tuple[int, ...]:
    """Select k distinct unlabeled indices with the named strategy."""
    if isinstance(kind, str):
        kind = SamplerKind(kind)
    ids = sorted(pool.unlabeled_ids)
    _check_batch(k, len(ids))
    if kind.name == "random":
        rng = make_rng(derive_seed(seed, "sample", "random"))
        return tuple(int(i) for i in rng.choice(ids, size=k, replace=False))
    if kind.name == "badge":
        return sample_badge(model, pool, k, seed)
    if kind.name == "clue":
        return sample_clue(model, pool, k, config, seed, kind.kmeans_iters)
    scored = _scored_ascending(model, pool, config, seed, ids)
    if kind.name == "min-uncertainty":
        return tuple(idx for idx, _ in scored[:k])
    if kind.name == "max-uncertainty":
        return tuple(idx for idx, _ in reversed(scored[-k:]))
    return sample_median_uncertainty(scored, k)
