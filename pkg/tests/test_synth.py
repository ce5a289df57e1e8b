"""Tissue generator geometry, artifact streams, and planted-family benchmarks."""

import numpy as np
import pytest
from scipy import ndimage

from segadapt.errors import SpecInfeasible
from segadapt.images import ProbMap
from segadapt.segeval import WatershedConfig, seeded_watershed, variation_of_information
from segadapt.synth import (
    ArtifactFlags,
    DomainSpec,
    analytic_membrane_fraction,
    boundary_crossings,
    clone_with_artifacts,
    expected_cell_count,
    generate_domain,
    generate_sample,
    make_benchmark,
    voronoi_partition,
)
from segadapt.synth import _membrane_mask


# ---------------------------------------------------------------- spec

def test_spec_contract():
    with pytest.raises(ValueError):
        DomainSpec(name="x", stripe_prob=1.5)
    with pytest.raises(ValueError):
        DomainSpec(name="x", mean_diameter=6.0, membrane_thickness=2.0)
    with pytest.raises(ValueError):
        DomainSpec(name="x", size=4)


def test_infeasible_spec():
    with pytest.raises(SpecInfeasible):
        expected_cell_count(16, 32.0)
    spec = DomainSpec(name="x", size=16, mean_diameter=32.0, diameter_var=0.01)
    with pytest.raises(SpecInfeasible):
        generate_sample(spec, 0)


# ---------------------------------------------------------------- geometry

def test_membrane_within_half_thickness_of_boundary():
    spec = DomainSpec(name="x", membrane_thickness=4.0, mean_diameter=18.0, seed=2)
    cells = voronoi_partition(spec, 0)
    _, labels, _ = generate_sample(spec, 0)
    crossings = boundary_crossings(cells)
    dist = ndimage.distance_transform_edt(~crossings)
    membrane = labels.labels == 0
    assert membrane.any()
    assert dist[membrane].max() <= np.ceil(spec.membrane_thickness / 2)
    # non-membrane pixels keep their cell id
    np.testing.assert_array_equal(labels.labels[~membrane], cells[~membrane])


@pytest.mark.parametrize("diameter,thickness", [(12.0, 2.0), (16.0, 2.0), (18.0, 3.0), (26.0, 4.0)])
def test_membrane_fraction_near_analytic(diameter, thickness):
    spec = DomainSpec(name="x", mean_diameter=diameter, membrane_thickness=thickness, seed=1)
    for i in range(4):
        cells = voronoi_partition(spec, i)
        measured = _membrane_mask(cells, thickness).mean()
        estimate = analytic_membrane_fraction(cells, thickness)
        assert abs(measured - estimate) / estimate < 0.2


def test_instance_count_at_least_two():
    for seed in range(3):
        spec = DomainSpec(name="x", seed=seed)
        _, labels, _ = generate_sample(spec, 0)
        assert len(np.unique(labels.labels[labels.labels > 0])) >= 2


def test_generate_domain_deterministic():
    spec = DomainSpec(name="dom", seed=11, stripe_prob=0.5, tile_prob=0.2)
    a, fa = generate_domain(spec, 5, return_flags=True)
    b, fb = generate_domain(spec, 5, return_flags=True)
    assert fa == fb
    for i in range(5):
        np.testing.assert_array_equal(a.image(i).pixels, b.image(i).pixels)
        np.testing.assert_array_equal(a.labels(i).labels, b.labels(i).labels)


# ---------------------------------------------------------------- artifacts

def test_zero_stripe_probability_flags_nothing():
    _, flags = generate_domain(DomainSpec(name="x", seed=0), 10, return_flags=True)
    assert all(f == ArtifactFlags(False, False, False) for f in flags)


def test_stripe_artifact_geometry():
    spec = DomainSpec(name="x", seed=4, stripe_prob=1.0)
    img, _, flags = generate_sample(spec, 0)
    assert flags.stripe
    full_white_cols = np.where((img.pixels == 255).all(axis=0))[0]
    assert 2 <= len(full_white_cols) <= 6
    assert np.array_equal(full_white_cols, np.arange(full_white_cols[0], full_white_cols[-1] + 1))


def test_tile_artifact_zero_block():
    spec = DomainSpec(name="x", seed=4, tile_prob=1.0)
    img, _, flags = generate_sample(spec, 0)
    assert flags.tile
    side = spec.size // 4
    zero = img.pixels == 0
    found = any(
        zero[r : r + side, c : c + side].all()
        for r in range(spec.size - side + 1)
        for c in range(spec.size - side + 1)
    )
    assert found


def test_contrast_artifact_compresses_range():
    base_img, _, _ = generate_sample(DomainSpec(name="x", seed=4), 0)
    comp_img, _, flags = generate_sample(
        DomainSpec(name="x", seed=4, contrast_prob=1.0), 0
    )
    assert flags.contrast
    assert comp_img.pixels.std() < base_img.pixels.std()


def test_tissue_identical_across_artifact_settings():
    base = DomainSpec(name="x", seed=9)
    striped = clone_with_artifacts(base, stripe_prob=1.0)
    img0, lab0, _ = generate_sample(base, 3)
    img1, lab1, f1 = generate_sample(striped, 3)
    assert f1.stripe
    np.testing.assert_array_equal(lab0.labels, lab1.labels)
    diff_cols = np.unique(np.where(img0.pixels != img1.pixels)[1])
    assert len(diff_cols) <= 6  # only the stripe columns changed


# ---------------------------------------------------------------- benchmark

def test_benchmark_default_layout():
    b = make_benchmark(seed=0, n_samples=2)
    assert [p.name for p in b.pools] == ["A1", "A2", "B1", "B2", "C1", "C2"]
    assert b.families == {
        "A1": "A", "A2": "A", "B1": "B", "B2": "B", "C1": "C", "C2": "C",
    }
    # siblings share morphology and differ only in noise
    for fam in "ABC":
        s1, s2 = b.specs[f"{fam}1"], b.specs[f"{fam}2"]
        assert s1.mean_diameter == s2.mean_diameter
        assert s1.gamma == s2.gamma
        assert s1.noise_sigma != s2.noise_sigma
    diam = {b.specs[f"{fam}1"].mean_diameter for fam in "ABC"}
    assert len(diam) == 3


def test_benchmark_family_sizes_override():
    b = make_benchmark(n_domains=6, seed=1, n_samples=1, family_sizes=(3, 2, 1))
    assert [p.name for p in b.pools] == ["A1", "A2", "A3", "B1", "B2", "C1"]
    assert sorted(b.families.values()) == ["A", "A", "A", "B", "B", "C"]


def test_benchmark_contract():
    with pytest.raises(ValueError):
        make_benchmark(n_domains=2)
    with pytest.raises(ValueError):
        make_benchmark(n_domains=6, family_sizes=(2, 2))


def test_benchmark_deterministic():
    a = make_benchmark(seed=7, n_samples=2)
    b = make_benchmark(seed=7, n_samples=2)
    for pa, pb in zip(a.pools, b.pools):
        for i in range(2):
            np.testing.assert_array_equal(pa.image(i).pixels, pb.image(i).pixels)


# ------------------------------------------------- watershed self-consistency

def test_watershed_recovers_instances_from_true_membrane():
    spec = DomainSpec(name="x", seed=6)
    totals = []
    for i in range(3):
        _, labels, _ = generate_sample(spec, i)
        mem = (labels.labels == 0).astype(np.float32)
        prob = ProbMap(np.stack([mem, 1.0 - mem], axis=2))
        seg = seeded_watershed(prob, WatershedConfig())
        totals.append(variation_of_information(seg, labels).vi_total)
    assert float(np.mean(totals)) <= 0.05
