"""Instance segmentation scoring: seeded watershed and Variation of Information.

Membrane probability maps (class channel 0) are turned into instance labels by
priority-flooding from low-membrane seed regions, then compared to ground
truth with VI split/merge terms in nats. Also aggregates result tables into
per-sampler efficacy percentages.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import NoLabels, NoSeeds, ShapeError
from .images import GrayImage, LabelMap, ProbMap
from .pools import DomainPool

__all__ = [
    "WatershedConfig",
    "VIResult",
    "seeded_watershed",
    "variation_of_information",
    "evaluate_model",
    "EvalResult",
    "sampler_efficacy",
    "STRATEGY_CLASS",
]

MEMBRANE_CHANNEL = 0

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class WatershedConfig:
    """Seed threshold and minimum seed area; flooding uses 4-connectivity."""

    membrane_threshold: float = 0.5
    min_seed_area: int = 8

    def __post_init__(self):
        if not 0.0 < self.membrane_threshold < 1.0:
            raise ValueError("membrane_threshold must lie in (0, 1)")
        if self.min_seed_area < 1:
            raise ValueError("min_seed_area must be at least 1")


def _membrane_array(membrane) -> np.ndarray:
    if isinstance(membrane, ProbMap):
        return np.asarray(membrane.channel(MEMBRANE_CHANNEL), dtype=np.float64)
    arr = np.asarray(membrane, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"membrane map must be 2-D, got shape {arr.shape}")
    return arr


def seeded_watershed(membrane, config: WatershedConfig = WatershedConfig()) -> LabelMap:
    """Flood instance labels from low-membrane seed components.

    Seeds are 4-connected components of {membrane < threshold} with area at
    least min_seed_area. Remaining pixels (ridges and sub-threshold specks)
    are claimed by priority flood in ascending membrane value, ties broken by
    row-major pixel index, so the output is a total labeling with one label
    per seed.
    """
    mem = _membrane_array(membrane)
    h, w = mem.shape
    below, _ = ndimage.label(mem < config.membrane_threshold, structure=FOUR_CONNECTED)
    areas = np.bincount(below.ravel())
    keep = np.flatnonzero(areas >= config.min_seed_area)
    keep = keep[keep > 0]
    remap = np.zeros(areas.size, dtype=np.int32)
    remap[keep] = np.arange(1, keep.size + 1, dtype=np.int32)
    labels = remap[below]
    if keep.size == 0:
        raise NoSeeds(
            f"no seed component of area >= {config.min_seed_area} below "
            f"threshold {config.membrane_threshold}"
        )

    flat_mem = mem.ravel()
    flat_labels = labels.ravel()
    heap: list[tuple[float, int, int]] = []
    seed_idx = np.flatnonzero(flat_labels)
    for idx in seed_idx:
        r, c = divmod(int(idx), w)
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w:
                nidx = nr * w + nc
                if flat_labels[nidx] == 0:
                    heapq.heappush(heap, (flat_mem[nidx], nidx, int(flat_labels[idx])))
    while heap:
        _, idx, label = heapq.heappop(heap)
        if flat_labels[idx]:
            continue
        flat_labels[idx] = label
        r, c = divmod(idx, w)
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < h and 0 <= nc < w:
                nidx = nr * w + nc
                if flat_labels[nidx] == 0:
                    heapq.heappush(heap, (flat_mem[nidx], nidx, label))
    return LabelMap(flat_labels.reshape(h, w))


@dataclass(frozen=True)
class VIResult:
    """Variation of Information decomposition, in nats."""

    vi_split: float
    vi_merge: float
    vi_total: float
    n_pixels: int

    def __post_init__(self):
        if min(self.vi_split, self.vi_merge, self.vi_total) < 0:
            raise ValueError("VI terms must be non-negative")
        if abs(self.vi_total - (self.vi_split + self.vi_merge)) > 1e-12:
            raise ValueError("vi_total must equal vi_split + vi_merge")

    @staticmethod
    def of(vi_split: float, vi_merge: float, n_pixels: int) -> "VIResult":
        return VIResult(vi_split, vi_merge, vi_split + vi_merge, n_pixels)


def _conditional_entropies(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(H(a|b), H(b|a)) in nats from the joint contingency table."""
    _, a = np.unique(a, return_inverse=True)
    _, b = np.unique(b, return_inverse=True)
    pairs = a.astype(np.int64) * (int(b.max()) + 1) + b
    counts = np.bincount(pairs).astype(np.float64)
    counts = counts[counts > 0]
    n = counts.sum()
    h_joint = -np.sum(counts / n * np.log(counts / n))

    def marginal(x):
        c = np.bincount(x).astype(np.float64)
        c = c[c > 0]
        return -np.sum(c / n * np.log(c / n))

    h_a = marginal(a)
    h_b = marginal(b)
    return float(max(0.0, h_joint - h_b)), float(max(0.0, h_joint - h_a))


def variation_of_information(
    pred: LabelMap, gt: LabelMap, ignore_gt_zero: bool = True
) -> VIResult:
    """VI split/merge between predicted and ground-truth instance maps.

    vi_split = H(gt | pred) measures over-merging of gt instances in pred;
    vi_merge = H(pred | gt) measures over-splitting. Membrane pixels
    (gt label 0) are excluded from counting by default.
    """
    if pred.labels.shape != gt.labels.shape:
        raise ShapeError(
            f"shape mismatch: pred {pred.labels.shape} vs gt {gt.labels.shape}"
        )
    mask = gt.labels != 0 if ignore_gt_zero else np.ones(gt.labels.shape, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise NoLabels("no counted pixels (all ground truth is membrane)")
    p = pred.labels[mask].ravel()
    g = gt.labels[mask].ravel()
    h_gt_given_pred, h_pred_given_gt = _conditional_entropies(g, p)
    return VIResult.of(h_gt_given_pred, h_pred_given_gt, n)


@dataclass(frozen=True)
class EvalResult:
    """Per-image VI scores and their unweighted mean."""

    per_image: tuple[VIResult, ...]
    mean: VIResult


def evaluate_model(
    model,
    pool: DomainPool,
    config: WatershedConfig = WatershedConfig(),
    ignore_gt_zero: bool = True,
    predict_fn: Optional[Callable[[object, GrayImage], ProbMap]] = None,
) -> EvalResult:
    """Watershed the model's membrane predictions and score VI on every image."""
    if predict_fn is None:
        from .model import predict as predict_fn  # deferred: torch import is heavy
    missing = [i for i in range(len(pool)) if pool.labels(i) is None]
    if missing:
        raise NoLabels(f"pool {pool.name!r} lacks ground truth for indices {missing}")
    per_image = []
    for i in range(len(pool)):
        prob = predict_fn(model, pool.image(i))
        seg = seeded_watershed(prob, config)
        per_image.append(variation_of_information(seg, pool.labels(i), ignore_gt_zero))
    split = float(np.mean([r.vi_split for r in per_image]))
    merge = float(np.mean([r.vi_merge for r in per_image]))
    mean = VIResult.of(split, merge, sum(r.n_pixels for r in per_image))
    return EvalResult(tuple(per_image), mean)


STRATEGY_CLASS = {
    "random": "Baseline",
    "min-uncertainty": "Uncertainty",
    "max-uncertainty": "Uncertainty",
    "median-uncertainty": "Uncertainty",
    "clue": "Uncertainty + Diversity",
    "badge": "Uncertainty + Diversity",
}


def sampler_efficacy(rows: Sequence) -> list[dict]:
    """Percent of (target, sample_size) settings each sampler wins.

    A setting is complete when every sampler seen anywhere in the table has a
    result there; incomplete settings are skipped with a warning. The winner
    of a setting has the lowest mean vi_total; ties share the win equally.
    """
    samplers = sorted({r.method for r in rows})
    means: dict[tuple, dict[str, list[float]]] = {}
    for r in rows:
        means.setdefault((r.target, r.sample_size), {}).setdefault(r.method, []).append(
            r.vi_total
        )
    wins = {s: 0.0 for s in samplers}
    n_settings = 0
    for setting in sorted(means):
        table = means[setting]
        if set(table) != set(samplers):
            warnings.warn(f"setting {setting} missing samplers; skipped", stacklevel=2)
            continue
        n_settings += 1
        by_sampler = {s: float(np.mean(v)) for s, v in table.items()}
        best = min(by_sampler.values())
        winners = [s for s, v in by_sampler.items() if v == best]
        for s in winners:
            wins[s] += 1.0 / len(winners)
    if n_settings == 0:
        raise ValueError("no complete (target, sample_size) setting in table")
    return [
        {
            "sampler": s,
            "strategy": STRATEGY_CLASS.get(s, "Unknown"),
            "efficacy_percent": 100.0 * wins[s] / n_settings,
        }
        for s in samplers
    ]
