"""Synthetic EM-like tissue domains with exact instance ground truth.

Each sample is a Voronoi partition of minimum-separation random centers:
instance labels are cell ids, membrane (label 0) is a band around cell
boundaries, and the image adds per-cell intensity, membrane darkening,
texture noise, gamma, and optional acquisition artifacts (white stripes,
black tiles, contrast compression). All randomness is derived from
``DomainSpec.seed``; artifact streams are separate from the tissue stream,
so the same tissue renders identically across artifact settings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .errors import SpecInfeasible
from .images import GrayImage, LabelMap
from .pools import DomainPool
from .rng import derive_seed, make_rng

__all__ = [
    "DomainSpec",
    "ArtifactFlags",
    "generate_sample",
    "generate_domain",
    "Benchmark",
    "make_benchmark",
    "expected_cell_count",
    "voronoi_partition",
    "boundary_crossings",
    "analytic_membrane_fraction",
    "clone_with_artifacts",
]

MEMBRANE_INTENSITY = 40.0
CELL_INTENSITY_RANGE = (110.0, 220.0)
STRIPE_WIDTH_RANGE = (2, 6)


@dataclass(frozen=True)
class DomainSpec:
    """Morphology, texture, and artifact parameters of one synthetic domain."""

    name: str
    size: int = 64
    mean_diameter: float = 16.0
    diameter_var: float = 4.0
    membrane_thickness: float = 2.0
    noise_sigma: float = 6.0
    gamma: float = 1.0
    stripe_prob: float = 0.0
    tile_prob: float = 0.0
    contrast_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for p in (self.stripe_prob, self.tile_prob, self.contrast_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("artifact probabilities must lie in [0, 1]")
        if self.mean_diameter < 4 * self.membrane_thickness:
            raise ValueError("mean_diameter must be at least 4x membrane_thickness")
        if self.size < 8:
            raise ValueError("size must be at least 8")
        if self.membrane_thickness < 1:
            raise ValueError("membrane_thickness must be at least 1")


@dataclass(frozen=True)
class ArtifactFlags:
    """Ground-truth record of which artifacts an image received."""

    stripe: bool = False
    tile: bool = False
    contrast: bool = False


def expected_cell_count(size: int, diameter: float) -> int:
    """Cells fitting at the density implied by the mean diameter."""
    raw = size * size / ((math.pi / 4.0) * diameter * diameter)
    if raw < 1.0:
        raise SpecInfeasible(
            f"diameter {diameter} too large for a {size}x{size} image: no cell fits"
        )
    return max(2, round(raw))


def _sample_centers(rng, size: int, n_cells: int, diameter: float) -> np.ndarray:
    """Random centers with pairwise separation >= 0.55 * diameter."""
    min_sep = 0.55 * diameter
    centers: list[tuple[float, float]] = []
    attempts = 0
    while len(centers) < n_cells and attempts < 200 * n_cells:
        attempts += 1
        cand = rng.random(2) * size
        if all((cand[0] - r) ** 2 + (cand[1] - c) ** 2 >= min_sep**2 for r, c in centers):
            centers.append((float(cand[0]), float(cand[1])))
    if len(centers) < 2:
        raise SpecInfeasible(f"could not place 2 separated cell centers in {size}x{size}")
    return np.array(centers)


def boundary_crossings(cells: np.ndarray) -> np.ndarray:
    """Pixels whose right or down neighbor belongs to a different cell."""
    right = np.zeros(cells.shape, dtype=bool)
    down = np.zeros(cells.shape, dtype=bool)
    right[:, :-1] = cells[:, :-1] != cells[:, 1:]
    down[:-1, :] = cells[:-1, :] != cells[1:, :]
    return right | down


def _membrane_mask(cells: np.ndarray, thickness: float) -> np.ndarray:
    """Band of pixels around inter-cell boundaries, ~thickness pixels wide.

    Thickness renders in whole pixels: even widths grow symmetrically from the
    two-pixel crossing band, odd widths from the one-sided crossing line.
    """
    t = max(1, round(thickness))
    one_sided = boundary_crossings(cells)
    if t == 1:
        return one_sided
    if t % 2:
        core, extra = one_sided, (t - 1) // 2
    else:
        right = np.zeros(cells.shape, dtype=bool)
        down = np.zeros(cells.shape, dtype=bool)
        right[:, :-1] = cells[:, :-1] != cells[:, 1:]
        down[:-1, :] = cells[:-1, :] != cells[1:, :]
        core = right | down | np.roll(right, 1, axis=1) | np.roll(down, 1, axis=0)
        extra = (t - 2) // 2
    if extra == 0:
        return core
    dist = ndimage.distance_transform_edt(~core)
    return dist <= extra


def voronoi_partition(spec: DomainSpec, index: int) -> np.ndarray:
    """The sample's full cell-id map (1..k), before membrane masking."""
    size = spec.size
    rng = make_rng(derive_seed(spec.seed, "tissue", index))
    d_img = float(
        np.clip(
            rng.normal(spec.mean_diameter, math.sqrt(spec.diameter_var)),
            4 * spec.membrane_thickness,
            2 * spec.mean_diameter,
        )
    )
    n_cells = expected_cell_count(size, d_img)
    centers = _sample_centers(rng, size, n_cells, d_img)
    rows, cols = np.mgrid[0:size, 0:size]
    pix = np.stack([rows.ravel() + 0.5, cols.ravel() + 0.5], axis=1)
    return np.argmin(cdist(pix, centers, "sqeuclidean"), axis=1).reshape(size, size) + 1


def analytic_membrane_fraction(cells: np.ndarray, thickness: float) -> float:
    """perimeter x thickness / area, with the Cauchy-Crofton digital-length
    correction (Euclidean boundary length ~ pi/4 of the crossing count).
    At thickness 1 the band is the crossing set itself, so no correction."""
    crossings = float(boundary_crossings(cells).sum())
    t = max(1, round(thickness))
    if t == 1:
        return crossings / cells.size
    return (math.pi / 4.0) * crossings * t / cells.size


def generate_sample(
    spec: DomainSpec, index: int
) -> tuple[GrayImage, LabelMap, ArtifactFlags]:
    """Render one (image, instance labels, artifact flags) triple."""
    size = spec.size
    cells = voronoi_partition(spec, index)
    membrane = _membrane_mask(cells, spec.membrane_thickness)
    labels = np.where(membrane, 0, cells).astype(np.int32)

    rng = make_rng(derive_seed(spec.seed, "texture", index))
    lo, hi = CELL_INTENSITY_RANGE
    cell_intensity = rng.uniform(lo, hi, size=int(cells.max()) + 1)
    img = cell_intensity[cells]
    img[membrane] = MEMBRANE_INTENSITY
    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 255.0)
    img = 255.0 * (img / 255.0) ** spec.gamma

    rng_stripe = make_rng(derive_seed(spec.seed, "stripe", index))
    rng_tile = make_rng(derive_seed(spec.seed, "tile", index))
    rng_contrast = make_rng(derive_seed(spec.seed, "contrast", index))
    stripe = bool(rng_stripe.random() < spec.stripe_prob)
    tile = bool(rng_tile.random() < spec.tile_prob)
    contrast = bool(rng_contrast.random() < spec.contrast_prob)
    if stripe:
        width = int(rng_stripe.integers(STRIPE_WIDTH_RANGE[0], STRIPE_WIDTH_RANGE[1] + 1))
        col = int(rng_stripe.integers(0, max(1, size - width)))
        img[:, col : col + width] = 255.0
    if tile:
        side = max(2, size // 4)
        r0 = int(rng_tile.integers(0, size - side))
        c0 = int(rng_tile.integers(0, size - side))
        img[r0 : r0 + side, c0 : c0 + side] = 0.0
    if contrast:
        img = 128.0 + (img - 128.0) * 0.5

    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return GrayImage(img), LabelMap(labels), ArtifactFlags(stripe, tile, contrast)


def generate_domain(
    spec: DomainSpec, n_samples: int, return_flags: bool = False
):
    """A fully-labeled pool of n_samples rendered tissue images."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    samples = []
    flags = []
    for i in range(n_samples):
        img, lab, f = generate_sample(spec, i)
        samples.append((img, lab))
        flags.append(f)
    pool = DomainPool.from_samples(spec.name, samples)
    if return_flags:
        return pool, flags
    return pool


FAMILY_DIAMETERS = (12.0, 18.0, 26.0)
FAMILY_GAMMAS = (0.45, 1.0, 3.5)
SIBLING_NOISE = (4.0, 9.0, 6.0, 11.0)


@dataclass(frozen=True)
class Benchmark:
    """Planted-family multi-domain benchmark plus its ground-truth grouping."""

    pools: tuple[DomainPool, ...]
    families: dict[str, str]
    specs: dict[str, DomainSpec]


def default_family_sizes(n_domains: int) -> tuple[int, ...]:
    """Split n domains across 3 families as evenly as possible."""
    base = n_domains // 3
    sizes = [base, base, base]
    for i in range(n_domains - 3 * base):
        sizes[i] += 1
    return tuple(s for s in sizes if s > 0)


def make_benchmark(
    n_domains: int = 6,
    seed: int = 0,
    n_samples: int = 24,
    size: int = 64,
    family_sizes: Optional[Sequence[int]] = None,
    artifact_probs: Optional[dict] = None,
) -> Benchmark:
    """Domains in planted families: families differ in cell diameter and
    gamma, siblings within a family differ only in texture noise."""
    if n_domains < 3:
        raise ValueError("benchmark needs at least 3 domains")
    sizes = tuple(family_sizes) if family_sizes is not None else default_family_sizes(n_domains)
    if sum(sizes) != n_domains:
        raise ValueError(f"family sizes {sizes} do not sum to {n_domains}")
    extra = dict(artifact_probs or {})
    pools = []
    families = {}
    specs = {}
    for fi, fam_size in enumerate(sizes):
        letter = chr(ord("A") + fi)
        for mi in range(fam_size):
            name = f"{letter}{mi + 1}"
            spec = DomainSpec(
                name=name,
                size=size,
                mean_diameter=FAMILY_DIAMETERS[fi % len(FAMILY_DIAMETERS)],
                gamma=FAMILY_GAMMAS[fi % len(FAMILY_GAMMAS)],
                noise_sigma=SIBLING_NOISE[mi % len(SIBLING_NOISE)],
                seed=derive_seed(seed, "domain", letter, str(mi)),
                **extra,
            )
            pools.append(generate_domain(spec, n_samples))
            families[name] = letter
            specs[name] = spec
    return Benchmark(tuple(pools), families, specs)


def clone_with_artifacts(spec: DomainSpec, **probs) -> DomainSpec:
    """Same tissue, different artifact rates (tissue stream is unchanged)."""
    return replace(spec, **probs)
