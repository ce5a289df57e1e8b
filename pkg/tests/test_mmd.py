"""Kernel, bandwidth heuristic, MMD^2 estimators, and distance-matrix contracts."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from segadapt.errors import DegenerateDistances, MissingModel, ShapeError
from segadapt.images import GrayImage
from segadapt.mmd import (
    DistanceMatrix,
    KernelConfig,
    domain_distance_matrix,
    load_matrix,
    median_heuristic,
    mmd2,
    rank_sources,
    rbf_kernel,
    save_matrix,
    select_optimal_source,
)
from segadapt.pools import DomainPool
from segadapt.rng import make_rng


# ---------------------------------------------------------------- kernel

def test_rbf_self_similarity_is_one():
    x = np.array([1.0, -2.0, 3.0])
    assert rbf_kernel(x, x, sigma=0.7) == 1.0


def test_rbf_forced_value_at_two_sigma_squared():
    # ||x - y||^2 = 4 and sigma^2 = 2 gives exp(-1)
    x = np.array([0.0])
    y = np.array([2.0])
    assert abs(rbf_kernel(x, y, sigma=math.sqrt(2.0)) - math.exp(-1)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(
    v=hnp.arrays(np.float64, 4, elements=st.floats(-5, 5)),
    w=hnp.arrays(np.float64, 4, elements=st.floats(-5, 5)),
    sigma=st.floats(0.1, 10),
)
def test_rbf_symmetric_and_bounded(v, w, sigma):
    k = rbf_kernel(v, w, sigma)
    assert k == rbf_kernel(w, v, sigma)
    assert 0 <= k <= 1  # may underflow to 0 at extreme distance/sigma ratios


def test_rbf_rejects_length_mismatch():
    with pytest.raises(ShapeError):
        rbf_kernel(np.zeros(3), np.zeros(4), 1.0)


# ---------------------------------------------------------------- bandwidth

def test_median_heuristic_single_pair():
    assert median_heuristic(np.array([[0.0], [2.0]])) == 2.0


def test_median_heuristic_odd_count():
    # pairwise distances {1, 2, 3} -> median 2
    assert median_heuristic(np.array([[0.0], [1.0], [3.0]])) == 2.0


def test_median_heuristic_identical_points_degenerate():
    with pytest.raises(DegenerateDistances):
        median_heuristic(np.zeros((200, 3)))


# ---------------------------------------------------------------- mmd2

def test_mmd2_zero_on_identical_sets():
    x = make_rng(0).normal(size=(20, 5))
    assert mmd2(x, x.copy()) == 0.0


def test_mmd2_singleton_closed_form():
    cfg = KernelConfig(bandwidth=math.sqrt(2.0))
    value = mmd2(np.array([[0.0]]), np.array([[2.0]]), cfg)
    assert abs(value - (2.0 - 2.0 * math.exp(-1))) < 1e-12


def test_mmd2_increases_with_mean_shift():
    rng = make_rng(42)
    base = rng.normal(size=(500, 1))
    other = rng.normal(size=(500, 1))
    cfg = KernelConfig(bandwidth=1.0)
    values = [mmd2(base, other + shift, cfg) for shift in (0.0, 1.0, 2.0, 4.0)]
    assert all(v2 > v1 for v1, v2 in zip(values, values[1:]))


def test_mmd2_symmetric_in_arguments():
    rng = make_rng(3)
    x = rng.normal(size=(15, 4))
    y = rng.normal(size=(12, 4)) + 0.5
    cfg = KernelConfig(bandwidth=2.0)
    assert abs(mmd2(x, y, cfg) - mmd2(y, x, cfg)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 12), m=st.integers(2, 12))
def test_mmd2_biased_nonnegative(seed, n, m):
    rng = make_rng(seed)
    x = rng.normal(size=(n, 3))
    y = rng.normal(size=(m, 3)) + rng.normal()
    assert mmd2(x, y, KernelConfig(bandwidth=1.5)) >= 0.0


def test_mmd2_estimators_converge():
    cfg = KernelConfig(bandwidth=1.0)
    diffs = []
    for n in (50, 500):
        rng = make_rng(7)
        x = rng.normal(size=(n, 2))
        y = rng.normal(size=(n, 2)) + 0.3
        diffs.append(abs(mmd2(x, y, cfg) - mmd2(x, y, cfg, estimator="unbiased")))
    assert diffs[1] < diffs[0]


def test_mmd2_unbiased_needs_two_samples():
    with pytest.raises(ValueError):
        mmd2(np.zeros((1, 2)), np.ones((3, 2)), KernelConfig(bandwidth=1.0), "unbiased")


# ---------------------------------------------------------------- matrix

def _matrix():
    names = ("s1", "s2", "s3", "t")
    vals = np.array(
        [
            [0.0, 0.3, 0.4, 0.5],
            [0.3, 0.0, 0.2, 0.2],
            [0.1, 0.6, 0.0, 0.9],
            [0.5, 0.2, 0.9, 0.0],
        ]
    )
    return DistanceMatrix(names, vals, {"estimator": "biased"})


def test_matrix_shape_contract():
    with pytest.raises(ShapeError):
        DistanceMatrix(("a", "b"), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        DistanceMatrix(("a", "a"), np.zeros((2, 2)))


def test_matrix_entry_lookup():
    m = _matrix()
    assert m.entry("s3", "t") == 0.9
    with pytest.raises(KeyError):
        m.entry("nope", "t")


def test_matrix_csv_roundtrip(tmp_path):
    m = _matrix()
    path = save_matrix(m, tmp_path / "dist.csv")
    back = load_matrix(path)
    assert back.names == m.names
    np.testing.assert_array_equal(back.values, m.values)
    assert back.metadata == m.metadata


# ------------------------------------------------- domain_distance_matrix

def _stat_embedder(model, images):
    """Per-image (mean, std) embedding; ignores the model."""
    return np.array(
        [[img.pixels.mean(), img.pixels.std()] for img in images], dtype=np.float64
    )


def _pool_with_mean(name: str, mean: float, n: int, seed: int) -> DomainPool:
    rng = make_rng(seed)
    samples = []
    for _ in range(n):
        pix = np.clip(rng.normal(mean, 10.0, size=(8, 8)), 0, 255).astype(np.uint8)
        samples.append((GrayImage(pix), None))
    return DomainPool.from_samples(name, samples, labeled=False)


def test_domain_matrix_structure():
    domains = [
        _pool_with_mean("a", 60.0, 12, 0),
        _pool_with_mean("b", 65.0, 12, 1),
        _pool_with_mean("c", 200.0, 12, 2),
    ]
    models = {d.name: object() for d in domains}
    m = domain_distance_matrix(
        domains, models, KernelConfig(bandwidth=20.0), sample_cap=16, seed=0,
        embedder=_stat_embedder,
    )
    assert np.allclose(np.diag(m.values), 0.0)
    assert (m.values >= 0).all()
    # a and b are close, c is far from both, in both directions
    assert m.entry("a", "b") < m.entry("a", "c")
    assert m.entry("b", "a") < m.entry("b", "c")
    assert m.entry("c", "a") > m.entry("a", "b")


def test_domain_matrix_missing_model():
    domains = [_pool_with_mean("a", 50.0, 4, 0), _pool_with_mean("b", 60.0, 4, 1)]
    with pytest.raises(MissingModel):
        domain_distance_matrix(domains, {"a": object()}, embedder=_stat_embedder)


def test_domain_matrix_subsample_deterministic():
    domains = [_pool_with_mean("a", 50.0, 30, 0), _pool_with_mean("b", 90.0, 30, 1)]
    models = {"a": object(), "b": object()}
    kwargs = dict(config=KernelConfig(bandwidth=15.0), sample_cap=8, seed=5,
                  embedder=_stat_embedder)
    m1 = domain_distance_matrix(domains, models, **kwargs)
    m2 = domain_distance_matrix(domains, models, **kwargs)
    np.testing.assert_array_equal(m1.values, m2.values)


# ---------------------------------------------------------------- selection

def test_select_optimal_source_argmin():
    m = _matrix()
    assert select_optimal_source(m, "t", ["s1", "s2", "s3"]) == "s2"


def test_select_optimal_source_tie_keeps_declared_order():
    vals = np.array([[0.0, 0.3], [0.3, 0.0]])
    m = DistanceMatrix(("x", "t"), vals)
    assert select_optimal_source(m, "t", ["x"]) == "x"
    vals = np.array(
        [[0.0, 0.0, 0.3], [0.0, 0.0, 0.3], [0.3, 0.3, 0.0]]
    )
    m = DistanceMatrix(("p", "q", "t"), vals)
    assert select_optimal_source(m, "t", ["q", "p"]) == "q"


def test_select_optimal_source_contract_errors():
    m = _matrix()
    with pytest.raises(ValueError):
        select_optimal_source(m, "t", [])
    with pytest.raises(ValueError):
        select_optimal_source(m, "t", ["t", "s1"])


def test_select_invariant_under_monotone_transform():
    m = _matrix()
    for transform in (np.exp, np.sqrt, lambda v: 3 * v + 1):
        vals = m.values.copy()
        t = m.index("t")
        vals[:, t] = transform(vals[:, t])
        m2 = DistanceMatrix(m.names, vals)
        assert select_optimal_source(m2, "t", ["s1", "s2", "s3"]) == "s2"


def test_rank_sources_sorted():
    m = _matrix()
    ranked = rank_sources(m, "t", ["s1", "s2", "s3"])
    assert [name for name, _ in ranked] == ["s2", "s1", "s3"]
    assert [d for _, d in ranked] == sorted(d for _, d in ranked)
