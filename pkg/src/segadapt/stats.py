"""Clustering of domain distance matrices and the hypothesis tests around it.

Provides UPGMA (average linkage) dendrograms over symmetrized distance
matrices, flat cuts, the Fowlkes-Mallows pair-counting index, a fixed-size
permutation test for cluster agreement, and the Mann-Whitney U test.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .errors import ExactEnumerationTooLarge
from .mmd import DistanceMatrix
from .rng import derive_seed, make_rng

__all__ = [
    "Dendrogram",
    "Clustering",
    "symmetrize",
    "agglomerative_cluster",
    "cut_at_k",
    "fowlkes_mallows",
    "permutation_test_fm",
    "count_assignments",
    "mann_whitney_u",
    "render_dendrogram",
]


def symmetrize(matrix: DistanceMatrix) -> DistanceMatrix:
    """(M + M^T) / 2; diagonal preserved."""
    vals = (matrix.values + matrix.values.T) / 2.0
    metadata = dict(matrix.metadata)
    metadata["symmetrized"] = True
    return DistanceMatrix(matrix.names, vals, metadata)


@dataclass(frozen=True)
class Dendrogram:
    """Merge history over named leaves.

    Node ids follow the usual convention: leaf i is node i, and the cluster
    created by merge t (0-based) is node n + t. Merge tuples are
    (node_a, node_b, height) with node_a < node_b.
    """

    leaves: tuple[str, ...]
    merges: tuple[tuple[int, int, float], ...]
    linkage: str = "average"

    def __post_init__(self):
        n = len(self.leaves)
        if len(self.merges) != n - 1:
            raise ValueError(f"expected {n - 1} merges for {n} leaves, got {len(self.merges)}")
        heights = [m[2] for m in self.merges]
        if any(b < a - 1e-12 for a, b in zip(heights, heights[1:])):
            raise ValueError("merge heights must be non-decreasing")


@dataclass(frozen=True)
class Clustering:
    """Flat assignment of items to clusters 0..k-1."""

    items: tuple[str, ...]
    assignment: tuple[int, ...]
    k: int

    def __post_init__(self):
        if len(self.items) != len(self.assignment):
            raise ValueError("one cluster id per item required")
        if len(set(self.items)) != len(self.items):
            raise ValueError("item names must be unique")
        if self.assignment and not all(0 <= c < self.k for c in self.assignment):
            raise ValueError(f"cluster ids must lie in [0, {self.k})")

    def by_item(self) -> dict[str, int]:
        return dict(zip(self.items, self.assignment))

    @staticmethod
    def from_groups(groups: dict[str, int] | Iterable[tuple[str, int]]) -> "Clustering":
        """Build from item -> group-label pairs; labels are renumbered 0..k-1."""
        pairs = list(groups.items()) if isinstance(groups, dict) else list(groups)
        items = tuple(name for name, _ in pairs)
        relabel: dict = {}
        assignment = []
        for _, g in pairs:
            if g not in relabel:
                relabel[g] = len(relabel)
            assignment.append(relabel[g])
        return Clustering(items, tuple(assignment), len(relabel))


def _cluster_name(leaves: tuple[str, ...], members: frozenset[int]) -> str:
    return min(leaves[i] for i in members)


def agglomerative_cluster(matrix: DistanceMatrix, linkage: str = "average") -> Dendrogram:
    """UPGMA over a symmetric non-negative distance matrix.

    Inter-cluster distance is the mean of all pairwise leaf distances. When
    several pairs tie at the minimum, the pair whose sorted cluster-name pair
    is lexicographically smallest merges first; a cluster is named after its
    lexicographically smallest leaf.
    """
    if linkage != "average":
        raise ValueError(f"unsupported linkage {linkage!r}")
    n = len(matrix.names)
    if n < 2:
        raise ValueError("clustering needs at least 2 items")
    if not np.allclose(matrix.values, matrix.values.T):
        raise ValueError("matrix must be symmetric; apply symmetrize() first")
    if matrix.values.min() < 0:
        raise ValueError("distances must be non-negative")
    base = matrix.values
    # active: node id -> member leaf-index set
    active: dict[int, frozenset[int]] = {i: frozenset({i}) for i in range(n)}
    merges = []
    for t in range(n - 1):
        best = None
        for a in sorted(active):
            for b in sorted(active):
                if b <= a:
                    continue
                ma, mb = active[a], active[b]
                d = float(np.mean([base[i, j] for i in sorted(ma) for j in sorted(mb)]))
                names = tuple(sorted((_cluster_name(matrix.names, ma),
                                      _cluster_name(matrix.names, mb))))
                key = (d, names)
                if best is None or key < best[0]:
                    best = (key, a, b)
        (d, _), a, b = best
        merges.append((a, b, d))
        active[n + t] = active.pop(a) | active.pop(b)
    return Dendrogram(matrix.names, tuple(merges), "average")


def cut_at_k(dendrogram: Dendrogram, k: int) -> Clustering:
    """Undo the last k-1 merges; cluster ids ordered by first leaf occurrence."""
    n = len(dendrogram.leaves)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    members: dict[int, frozenset[int]] = {i: frozenset({i}) for i in range(n)}
    for t, (a, b, _) in enumerate(dendrogram.merges[: n - k]):
        members[n + t] = members.pop(a) | members.pop(b)
    cluster_of = {}
    for node in members.values():
        for i in node:
            cluster_of[i] = node
    seen: dict[frozenset, int] = {}
    assignment = []
    for i in range(n):
        node = cluster_of[i]
        if node not in seen:
            seen[node] = len(seen)
        assignment.append(seen[node])
    return Clustering(dendrogram.leaves, tuple(assignment), k)


def _pair_counts(a: Sequence[int], b: Sequence[int]) -> tuple[float, float, float]:
    """(pairs together in both, together in a, together in b) via contingency."""
    a = np.asarray(a)
    b = np.asarray(b)
    ct = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(ct, (a, b), 1)

    def pairs(x: np.ndarray) -> float:
        return float((x * (x - 1) / 2.0).sum())

    return pairs(ct), pairs(ct.sum(axis=1)), pairs(ct.sum(axis=0))


def fowlkes_mallows(c1: Clustering, c2: Clustering) -> float:
    """TP / sqrt((TP+FP)(TP+FN)) over same-cluster item pairs; 0 when TP = 0."""
    if set(c1.items) != set(c2.items):
        raise ValueError("clusterings must cover the same items")
    order = {name: i for i, name in enumerate(c1.items)}
    a = list(c1.assignment)
    b = [0] * len(a)
    for name, cid in zip(c2.items, c2.assignment):
        b[order[name]] = cid
    tp, pa, pb = _pair_counts(a, b)
    if tp == 0:
        return 0.0
    return float(tp / math.sqrt(pa * pb))


def count_assignments(sizes: Sequence[int]) -> int:
    """Number of distinct assignments of n items into labeled clusters of fixed sizes."""
    n = sum(sizes)
    total = math.factorial(n)
    for s in sizes:
        total //= math.factorial(s)
    return total


def _distinct_label_vectors(counts: list[int]):
    """Yield all distinct label vectors with counts[c] occurrences of label c."""
    n = sum(counts)
    vec = [0] * n

    def rec(pos: int):
        if pos == n:
            yield tuple(vec)
            return
        for c, left in enumerate(counts):
            if left:
                counts[c] -= 1
                vec[pos] = c
                yield from rec(pos + 1)
                counts[c] += 1

    yield from rec(0)


EXACT_LIMIT = 10**6


def permutation_test_fm(
    reference: Clustering,
    observed: Clustering,
    mode: str = "exact",
    n_perm: int = 20000,
    seed: int = 0,
) -> float:
    """Permutation p-value for FM agreement under fixed cluster sizes.

    The null family holds the observed clustering's cluster sizes fixed and
    reassigns items uniformly over all distinct labeled assignments.
    p = proportion with FM >= the observed FM; Monte Carlo mode estimates it
    with add-one smoothing.
    """
    observed_fm = fowlkes_mallows(reference, observed)
    order = {name: i for i, name in enumerate(reference.items)}
    ref = list(reference.assignment)
    obs = [0] * len(ref)
    for name, cid in zip(observed.items, observed.assignment):
        obs[order[name]] = cid
    counts = np.bincount(obs, minlength=observed.k).tolist()
    tol = 1e-12

    def fm_of(labels) -> float:
        tp, pa, pb = _pair_counts(ref, list(labels))
        return 0.0 if tp == 0 else float(tp / math.sqrt(pa * pb))

    if mode == "exact":
        total = count_assignments(counts)
        if total > EXACT_LIMIT:
            raise ExactEnumerationTooLarge(
                f"{total} assignments exceed the exact-mode limit of {EXACT_LIMIT}"
            )
        hits = sum(1 for vec in _distinct_label_vectors(list(counts))
                   if fm_of(vec) >= observed_fm - tol)
        return hits / total
    if mode == "montecarlo":
        rng = make_rng(derive_seed(seed, "permfm"))
        labels = np.asarray(obs)
        hits = 0
        for _ in range(n_perm):
            perm = rng.permutation(labels)
            if fm_of(perm) >= observed_fm - tol:
                hits += 1
        return (1 + hits) / (1 + n_perm)
    raise ValueError(f"unknown mode {mode!r}")


def _u_statistic(a: np.ndarray, b: np.ndarray) -> float:
    gt = (a[:, None] > b[None, :]).sum()
    eq = (a[:, None] == b[None, :]).sum()
    return float(gt + 0.5 * eq)


EXACT_MW_LIMIT = 12


def mann_whitney_u(
    group_a: Sequence[float],
    group_b: Sequence[float],
    alternative: str = "two-sided",
) -> tuple[float, float]:
    """Mann-Whitney U statistic for group a and its p-value.

    Exact p by enumerating all assignments of the pooled values when
    n_a + n_b <= 12; otherwise a normal approximation with tie correction and
    a 0.5 continuity correction. Two-sided p doubles the smaller tail, capped
    at 1.
    """
    a = np.asarray(list(group_a), dtype=np.float64)
    b = np.asarray(list(group_b), dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be non-empty")
    if alternative not in ("two-sided", "a-greater"):
        raise ValueError(f"unknown alternative {alternative!r}")
    u_obs = _u_statistic(a, b)
    na, nb = a.size, b.size
    n = na + nb
    if n <= EXACT_MW_LIMIT:
        pooled = np.concatenate([a, b])
        tol = 1e-12
        ge = le = total = 0
        for idx in itertools.combinations(range(n), na):
            mask = np.zeros(n, dtype=bool)
            mask[list(idx)] = True
            u = _u_statistic(pooled[mask], pooled[~mask])
            total += 1
            if u >= u_obs - tol:
                ge += 1
            if u <= u_obs + tol:
                le += 1
        p_greater = ge / total
        p_less = le / total
    else:
        mean = na * nb / 2.0
        _, tie_counts = np.unique(np.concatenate([a, b]), return_counts=True)
        tie_term = float(((tie_counts**3 - tie_counts).sum())) / (n * (n - 1))
        var = na * nb / 12.0 * ((n + 1) - tie_term)
        if var <= 0:
            p_greater = p_less = 1.0
        else:
            sd = math.sqrt(var)
            p_greater = float(norm.sf((u_obs - mean - 0.5) / sd))
            p_less = float(norm.cdf((u_obs - mean + 0.5) / sd))
    if alternative == "a-greater":
        p = p_greater
    else:
        p = min(1.0, 2.0 * min(p_greater, p_less))
    return u_obs, p


def render_dendrogram(dendrogram: Dendrogram) -> str:
    """Indented text rendering, children ordered by cluster name."""
    n = len(dendrogram.leaves)
    children: dict[int, tuple[int, int, float]] = {
        n + t: (a, b, h) for t, (a, b, h) in enumerate(dendrogram.merges)
    }

    def name_of(node: int) -> str:
        if node < n:
            return dendrogram.leaves[node]
        a, b, _ = children[node]
        return min(name_of(a), name_of(b))

    lines: list[str] = []

    def walk(node: int, depth: int):
        pad = "  " * depth
        if node < n:
            lines.append(f"{pad}{dendrogram.leaves[node]}")
            return
        a, b, h = children[node]
        lines.append(f"{pad}+ h={h:.6g}")
        for child in sorted((a, b), key=name_of):
            walk(child, depth + 1)

    root = n + len(dendrogram.merges) - 1 if dendrogram.merges else 0
    walk(root, 0)
    return "\n".join(lines)
