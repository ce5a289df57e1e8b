"""Image/label IO, pool invariants, seed derivation, and manifest round-trips."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segadapt.errors import (
    EmptyRun,
    LabelOverflow,
    MalformedPgm,
    SegadaptError,
    ShapeError,
    UnsupportedDepth,
)
from segadapt.images import (
    GrayImage,
    LabelMap,
    ProbMap,
    load_image,
    load_labels,
    save_image,
    save_labels,
)
from segadapt.manifest import (
    ResultRow,
    aggregate_rows,
    config_hash,
    read_run_manifest,
    write_run_manifest,
)
from segadapt.pools import DomainPool, load_pool, save_pool
from segadapt.rng import derive_seed, make_rng


# ---------------------------------------------------------------- rng

def test_derive_seed_deterministic_and_label_sensitive():
    a = derive_seed(7, "init")
    assert a == derive_seed(7, "init")
    assert a != derive_seed(7, "crop")
    assert a != derive_seed(8, "init")
    assert 0 <= a < 2**64


def test_derive_seed_path_not_concatenation():
    # ("ab", "c") and ("a", "bc") must derive different streams
    assert derive_seed(1, "ab", "c") != derive_seed(1, "a", "bc")


def test_make_rng_reproducible():
    x = make_rng(derive_seed(3, "t")).normal(size=5)
    y = make_rng(derive_seed(3, "t")).normal(size=5)
    np.testing.assert_array_equal(x, y)


# ---------------------------------------------------------------- images

def test_gray_image_rejects_bad_shape_and_dtype():
    with pytest.raises(ShapeError):
        GrayImage(np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(ShapeError):
        GrayImage(np.zeros((4, 4), dtype=np.float32))


def test_prob_map_normalization_contract():
    good = np.full((2, 2, 2), 0.5, dtype=np.float32)
    ProbMap(good)
    bad = good.copy()
    bad[0, 0, 0] = 0.9
    with pytest.raises(ShapeError):
        ProbMap(bad)


def test_image_roundtrip(tmp_path):
    rng = make_rng(0)
    img = GrayImage(rng.integers(0, 256, size=(9, 13), dtype=np.uint8))
    p = tmp_path / "img.pgm"
    save_image(img, p)
    back = load_image(p)
    np.testing.assert_array_equal(img.pixels, back.pixels)


def test_labels_roundtrip_16bit(tmp_path):
    rng = make_rng(1)
    lab = LabelMap(rng.integers(0, 65536, size=(7, 5)).astype(np.int32))
    p = tmp_path / "lab.labels.pgm"
    save_labels(lab, p)
    back = load_labels(p)
    np.testing.assert_array_equal(lab.labels, back.labels)


def test_label_overflow_rejected(tmp_path):
    lab = LabelMap(np.full((2, 2), 70000, dtype=np.int32))
    with pytest.raises(LabelOverflow):
        save_labels(lab, tmp_path / "x.labels.pgm")


def test_wrong_maxval_rejected(tmp_path):
    p = tmp_path / "odd.pgm"
    p.write_bytes(b"P5\n2 2\n127\n" + bytes(4))
    with pytest.raises(UnsupportedDepth):
        load_image(p)


def test_malformed_pgm_rejected(tmp_path):
    cases = [
        b"P6\n2 2\n255\n" + bytes(12),        # wrong magic
        b"P5\n2 2\n255\n" + bytes(3),          # truncated payload
        b"P5\n2 2\n255\n" + bytes(5),          # trailing bytes
        b"P5\n2\n255\n" + bytes(4),            # missing height
    ]
    for i, raw in enumerate(cases):
        p = tmp_path / f"bad{i}.pgm"
        p.write_bytes(raw)
        with pytest.raises(MalformedPgm):
            load_image(p)


def test_pgm_comments_accepted(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 2\n# another\n255\n" + bytes([1, 2, 3, 4]))
    img = load_image(p)
    np.testing.assert_array_equal(img.pixels, np.array([[1, 2], [3, 4]], dtype=np.uint8))


@settings(max_examples=25, deadline=None)
@given(
    h=st.integers(min_value=1, max_value=16),
    w=st.integers(min_value=1, max_value=16),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_image_roundtrip_property(tmp_path_factory, h, w, seed):
    tmp = tmp_path_factory.mktemp("pgm")
    img = GrayImage(make_rng(seed).integers(0, 256, size=(h, w), dtype=np.uint8))
    save_image(img, tmp / "a.pgm")
    np.testing.assert_array_equal(load_image(tmp / "a.pgm").pixels, img.pixels)


@settings(max_examples=25, deadline=None)
@given(
    h=st.integers(min_value=1, max_value=12),
    w=st.integers(min_value=1, max_value=12),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_label_roundtrip_property(tmp_path_factory, h, w, seed):
    tmp = tmp_path_factory.mktemp("lab")
    lab = LabelMap(make_rng(seed).integers(0, 65536, size=(h, w)).astype(np.int32))
    save_labels(lab, tmp / "a.labels.pgm")
    np.testing.assert_array_equal(load_labels(tmp / "a.labels.pgm").labels, lab.labels)


def test_canonical_header_bytes(tmp_path):
    img = GrayImage(np.zeros((3, 4), dtype=np.uint8))
    p = tmp_path / "h.pgm"
    save_image(img, p)
    assert p.read_bytes() == b"P5\n4 3\n255\n" + bytes(12)


# ---------------------------------------------------------------- pools

def _small_pool():
    rng = make_rng(5)
    samples = []
    for i in range(4):
        img = GrayImage(rng.integers(0, 256, size=(6, 6), dtype=np.uint8))
        lab = LabelMap(rng.integers(0, 4, size=(6, 6)).astype(np.int32)) if i < 3 else None
        samples.append((img, lab))
    return DomainPool.from_samples("dom-a", samples, labeled=False).with_labeled({0})


def test_pool_partition_invariant():
    pool = _small_pool()
    assert pool.labeled_ids == frozenset({0})
    assert pool.unlabeled_ids == frozenset({1, 2, 3})
    assert pool.labeled_ids | pool.unlabeled_ids == frozenset(range(4))
    assert pool.labelable_ids() == frozenset({0, 1, 2})  # 3 has no ground truth


def test_pool_with_labeled_moves_ids():
    pool = _small_pool()
    moved = pool.with_labeled(frozenset({1, 2}))
    assert moved.labeled_ids == frozenset({0, 1, 2})
    assert moved.unlabeled_ids == frozenset({3})
    # original untouched
    assert pool.labeled_ids == frozenset({0})


def test_pool_with_labeled_rejects_ungrounded():
    pool = _small_pool()
    with pytest.raises(SegadaptError):
        pool.with_labeled(frozenset({3}))  # no labels to reveal


def test_pool_all_unlabeled_resets():
    pool = _small_pool().all_unlabeled()
    assert pool.labeled_ids == frozenset()
    assert pool.unlabeled_ids == frozenset(range(4))


def test_pool_roundtrip(tmp_path):
    pool = _small_pool()
    save_pool(pool, tmp_path, "train")
    back = load_pool(tmp_path / "dom-a", "train", labeled=False)
    assert back.name == pool.name
    assert back.sample_ids == pool.sample_ids
    for i in range(4):
        np.testing.assert_array_equal(back.image(i).pixels, pool.image(i).pixels)
        if pool.labels(i) is not None:
            np.testing.assert_array_equal(back.labels(i).labels, pool.labels(i).labels)
        else:
            assert back.labels(i) is None


# ---------------------------------------------------------------- manifest

def test_manifest_aggregation_frozen_values(tmp_path):
    rows = [
        ResultRow("t", "m", "s", 4, seed, vs, vm, vs + vm)
        for seed, (vs, vm) in zip([0, 1, 2], [(0.3, 0.2), (0.35, 0.25), (0.4, 0.3)])
    ]
    path = write_run_manifest({"note": "x"}, rows, tmp_path / "run.json")
    manifest = read_run_manifest(path)
    agg = manifest["aggregates"]
    assert len(agg) == 1
    # vi_total values 0.5, 0.6, 0.7: mean 0.6, sample std 0.1
    assert abs(agg[0]["vi_total_mean"] - 0.6) < 1e-12
    assert abs(agg[0]["vi_total_std"] - 0.1) < 1e-12


def test_manifest_csv_mirror(tmp_path):
    rows = [ResultRow("t", "m", "s", 4, 0, 0.5, 0.25, 0.75)]
    path = write_run_manifest({}, rows, tmp_path / "run.json")
    lines = path.with_suffix(".csv").read_text().splitlines()
    assert lines[0] == "target,method,transfer_domain,sample_size,seed,vi_split,vi_merge,vi_total"
    assert lines[1] == "t,m,s,4,0,0.5,0.25,0.75"


def test_manifest_empty_run():
    with pytest.raises(EmptyRun):
        write_run_manifest({}, [], "/tmp/never.json")


def test_manifest_tamper_detect(tmp_path):
    rows = [ResultRow("t", "m", "s", 4, s, 0.5, 0.25, 0.75) for s in (0, 1)]
    path = write_run_manifest({}, rows, tmp_path / "run.json")
    data = json.loads(path.read_text())
    data["aggregates"][0]["vi_total_mean"] = 0.1
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError):
        read_run_manifest(path)


def test_config_hash_order_invariant():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


def test_single_seed_std_zero():
    agg = aggregate_rows([ResultRow("t", "m", "s", 1, 0, 0.1, 0.2, 0.3)])
    assert agg[0]["vi_total_std"] == 0.0
