"""MC-dropout uncertainty: mean predictive distribution over K stochastic
passes, per-pixel entropy in nats, and image scores for ranking a pool.

The same base seed is used for every image so a score depends only on
(model, image content, config, seed); duplicate images score identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import PoolExhausted
from .images import GrayImage, ProbMap
from .model import ModelParams, predict_stochastic
from .pools import DomainPool
from .rng import derive_seed

__all__ = [
    "UncertaintyConfig",
    "UncertaintyScore",
    "mc_mean_prediction",
    "pixel_entropy",
    "image_uncertainty",
    "rank_pool_by_uncertainty",
]


@dataclass(frozen=True)
class UncertaintyConfig:
    """Number of stochastic passes and the entropy stability constant."""

    k_passes: int = 10
    epsilon: float = 1e-12
    clamp_negative: bool = True

    def __post_init__(self):
        if self.k_passes < 1:
            raise ValueError("k_passes must be at least 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class UncertaintyScore:
    """Mean pixel entropy of one image, optionally with the per-pixel map."""

    image_id: str
    value: float
    entropy_map: Optional[np.ndarray] = field(default=None, compare=False)


def mc_mean_prediction(
    model: ModelParams, image: GrayImage, config: UncertaintyConfig, seed: int
) -> ProbMap:
    """Mean class distribution over k_passes dropout-on forward passes.

    Pass k uses the stream derived from (seed, "mc", k); the mean of points
    on the simplex stays on the simplex.
    """
    acc = None
    for k in range(config.k_passes):
        p = predict_stochastic(model, image, derive_seed(seed, "mc", k))
        acc = p.probs.astype(np.float64) if acc is None else acc + p.probs
    return ProbMap((acc / config.k_passes).astype(np.float32))


def pixel_entropy(
    probs: ProbMap, epsilon: float = 1e-12, clamp_negative: bool = True
) -> np.ndarray:
    """H(x) = -sum_c p_c ln(p_c + epsilon), per pixel.

    The epsilon inside the log makes one-hot pixels slightly negative;
    clamping floors the map at 0.
    """
    p = probs.probs.astype(np.float64)
    h = -(p * np.log(p + epsilon)).sum(axis=2)
    if clamp_negative:
        h = np.maximum(h, 0.0)
    return h


def image_uncertainty(
    model: ModelParams,
    image: GrayImage,
    config: UncertaintyConfig,
    seed: int,
    image_id: str = "",
    keep_map: bool = False,
) -> UncertaintyScore:
    """Mean of the pixel entropy map under the MC-mean distribution."""
    mean = mc_mean_prediction(model, image, config, seed)
    h = pixel_entropy(mean, config.epsilon, config.clamp_negative)
    return UncertaintyScore(image_id, float(h.mean()), h if keep_map else None)


def rank_pool_by_uncertainty(
    model: ModelParams,
    pool: DomainPool,
    config: UncertaintyConfig,
    seed: int,
    keep_maps: bool = False,
) -> list[UncertaintyScore]:
    """Scores for the unlabeled set, most uncertain first; ties by image id."""
    ids = sorted(pool.unlabeled_ids)
    if not ids:
        raise PoolExhausted(f"pool {pool.name!r} has no unlabeled images")
    scores = [
        image_uncertainty(model, pool.image(i), config, seed, pool.sample_ids[i], keep_maps)
        for i in ids
    ]
    return sorted(scores, key=lambda s: (-s.value, s.image_id))
