"""Domain pools: ordered samples with labeled/unlabeled index bookkeeping.

On disk a domain is a directory tree `<domain>/<split>/<id>.pgm` with paired
`<id>.labels.pgm` ground truth. Pools are immutable; moving samples between
the unlabeled and labeled sets returns a new pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import SegadaptError
from .images import GrayImage, LabelMap, load_image, load_labels, save_image, save_labels

__all__ = ["DomainPool", "load_pool", "save_pool", "split_pool"]


@dataclass(frozen=True)
class DomainPool:
    """Named sample collection partitioned into labeled and unlabeled index sets.

    A sample is (image, labels-or-None). The labels of unlabeled samples, when
    present, act as the annotation oracle: they are invisible to selection
    strategies until the index moves to the labeled set.
    """

    name: str
    samples: tuple[tuple[GrayImage, Optional[LabelMap]], ...]
    labeled_ids: frozenset[int]
    unlabeled_ids: frozenset[int]
    sample_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = len(self.samples)
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "labeled_ids", frozenset(self.labeled_ids))
        object.__setattr__(self, "unlabeled_ids", frozenset(self.unlabeled_ids))
        if not self.sample_ids:
            object.__setattr__(self, "sample_ids", tuple(f"{i:05d}" for i in range(n)))
        else:
            object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        if len(self.sample_ids) != n:
            raise SegadaptError("sample_ids length mismatch")
        if self.labeled_ids & self.unlabeled_ids:
            raise SegadaptError("labeled and unlabeled sets overlap")
        if self.labeled_ids | self.unlabeled_ids != frozenset(range(n)):
            raise SegadaptError("labeled and unlabeled sets must partition the index range")
        for i in sorted(self.labeled_ids):
            if self.samples[i][1] is None:
                raise SegadaptError(f"labeled sample {i} has no label map")

    def __len__(self) -> int:
        return len(self.samples)

    def image(self, i: int) -> GrayImage:
        return self.samples[i][0]

    def labels(self, i: int) -> Optional[LabelMap]:
        return self.samples[i][1]

    def labelable_ids(self) -> frozenset[int]:
        """Indices whose ground truth exists (annotation oracle can answer)."""
        return frozenset(i for i, (_, lab) in enumerate(self.samples) if lab is not None)

    def with_labeled(self, ids: Iterable[int]) -> "DomainPool":
        """Move `ids` from the unlabeled to the labeled set."""
        ids = frozenset(ids)
        if not ids <= self.unlabeled_ids:
            raise SegadaptError(f"ids {sorted(ids - self.unlabeled_ids)} not in unlabeled set")
        return DomainPool(
            name=self.name,
            samples=self.samples,
            labeled_ids=self.labeled_ids | ids,
            unlabeled_ids=self.unlabeled_ids - ids,
            sample_ids=self.sample_ids,
        )

    def all_unlabeled(self) -> "DomainPool":
        """Reset bookkeeping so every index is unlabeled (source-free start)."""
        return DomainPool(
            name=self.name,
            samples=self.samples,
            labeled_ids=frozenset(),
            unlabeled_ids=frozenset(range(len(self.samples))),
            sample_ids=self.sample_ids,
        )

    @staticmethod
    def from_samples(
        name: str,
        samples: Sequence[tuple[GrayImage, Optional[LabelMap]]],
        labeled: bool = True,
        sample_ids: Sequence[str] = (),
    ) -> "DomainPool":
        n = len(samples)
        all_ids = frozenset(range(n))
        eligible = frozenset(i for i in range(n) if samples[i][1] is not None)
        labeled_ids = (all_ids & eligible) if labeled else frozenset()
        return DomainPool(
            name=name,
            samples=tuple(samples),
            labeled_ids=labeled_ids,
            unlabeled_ids=all_ids - labeled_ids,
            sample_ids=tuple(sample_ids),
        )


def split_pool(pool: DomainPool, n_first: int) -> tuple[DomainPool, DomainPool]:
    """Split by sample order into (first n, rest); both keep full labeling."""
    if not 0 < n_first < len(pool):
        raise SegadaptError(f"split point {n_first} outside (0, {len(pool)})")
    first = DomainPool.from_samples(
        pool.name, pool.samples[:n_first], sample_ids=pool.sample_ids[:n_first]
    )
    rest = DomainPool.from_samples(
        pool.name, pool.samples[n_first:], sample_ids=pool.sample_ids[n_first:]
    )
    return first, rest


def save_pool(pool: DomainPool, root: str | Path, split: str) -> Path:
    """Write samples to `<root>/<pool.name>/<split>/` in the standard layout."""
    out = Path(root) / pool.name / split
    out.mkdir(parents=True, exist_ok=True)
    for i, (img, lab) in enumerate(pool.samples):
        sid = pool.sample_ids[i]
        save_image(img, out / f"{sid}.pgm")
        if lab is not None:
            save_labels(lab, out / f"{sid}.labels.pgm")
    return out


def load_pool(domain_dir: str | Path, split: str, name: str | None = None, labeled: bool = True) -> DomainPool:
    """Load `<domain_dir>/<split>/*.pgm` (with optional paired labels) as a pool."""
    base = Path(domain_dir) / split
    if not base.is_dir():
        raise SegadaptError(f"no such split directory: {base}")
    samples = []
    ids = []
    for img_path in sorted(base.glob("*.pgm")):
        if img_path.name.endswith(".labels.pgm"):
            continue
        sid = img_path.name[: -len(".pgm")]
        lab_path = base / f"{sid}.labels.pgm"
        lab = load_labels(lab_path) if lab_path.exists() else None
        samples.append((load_image(img_path), lab))
        ids.append(sid)
    if not samples:
        raise SegadaptError(f"no samples under {base}")
    return DomainPool.from_samples(
        name or Path(domain_dir).name, samples, labeled=labeled, sample_ids=ids
    )
