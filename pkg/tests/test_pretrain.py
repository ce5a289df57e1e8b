"""Per-domain source pretraining: splits, determinism, and quality reporting."""

import numpy as np
import pytest

from segadapt.errors import InvalidSteps, NoSeeds
from segadapt.images import GrayImage, LabelMap
from segadapt.model import ModelConfig, TrainConfig, init_model, load_checkpoint
from segadapt.pools import DomainPool
from segadapt.pretrain import PretrainJob, PretrainReport, holdout_split, pretrain_domain
from segadapt.segeval import evaluate_model
from segadapt.synth import DomainSpec, generate_domain

TINY_MODEL = ModelConfig(depth=1, base_channels=4, input_size=32)


def _dummy_pool(n, size=8):
    samples = []
    for i in range(n):
        img = GrayImage(np.full((size, size), i % 256, dtype=np.uint8))
        samples.append((img, LabelMap(np.ones((size, size), dtype=np.int32))))
    return DomainPool.from_samples("dummy", samples)


@pytest.fixture(scope="module")
def tiny_domain():
    spec = DomainSpec(
        name="tiny", size=32, mean_diameter=12.0, diameter_var=2.0,
        membrane_thickness=2.0, noise_sigma=4.0, seed=21,
    )
    return generate_domain(spec, 10)


@pytest.fixture(scope="module")
def tiny_job():
    return PretrainJob(
        domain="tiny",
        model=TINY_MODEL,
        train=TrainConfig(step_budget=300, seed=4),
    )


@pytest.fixture(scope="module")
def tiny_result(tiny_domain, tiny_job):
    return pretrain_domain(tiny_domain, tiny_job)


# --- job and split contracts --------------------------------------------------

def test_zero_steps_rejected():
    with pytest.raises(InvalidSteps):
        PretrainJob(domain="x", train=TrainConfig(step_budget=0))
    with pytest.raises(InvalidSteps):
        PretrainJob(domain="x", train=TrainConfig(step_budget=-3))


@pytest.mark.parametrize("n,n_train,n_holdout", [(24, 19, 5), (10, 8, 2), (5, 4, 1), (2, 1, 1)])
def test_holdout_split_sizes(n, n_train, n_holdout):
    tr, ho = holdout_split(_dummy_pool(n))
    assert (len(tr), len(ho)) == (n_train, n_holdout)


def test_holdout_split_needs_two_samples():
    with pytest.raises(ValueError):
        holdout_split(_dummy_pool(1))


def test_holdout_split_keeps_order():
    pool = _dummy_pool(10)
    tr, ho = holdout_split(pool)
    assert [int(tr.image(i).pixels[0, 0]) for i in range(8)] == list(range(8))
    assert [int(ho.image(i).pixels[0, 0]) for i in range(2)] == [8, 9]


def test_rejects_partially_labeled_pool(tiny_domain, tiny_job):
    samples = [(tiny_domain.image(i), tiny_domain.labels(i)) for i in range(4)]
    samples[2] = (samples[2][0], None)
    gappy = DomainPool.from_samples("tiny", samples)
    with pytest.raises(ValueError):
        pretrain_domain(gappy, tiny_job)


# --- training runs -------------------------------------------------------------

def test_report_is_consistent(tiny_domain, tiny_job, tiny_result):
    params, report = tiny_result
    assert isinstance(report, PretrainReport)
    assert report.domain == "tiny"
    assert report.steps == 300
    assert params.steps_trained() == 300
    assert report.n_train + report.n_holdout == len(tiny_domain)
    assert (report.n_train, report.n_holdout) == (8, 2)
    assert report.param_hash == params.param_hash()
    assert report.final_loss == params.loss_history[-1]
    assert report.checkpoint_path is None
    assert np.isfinite(report.holdout_vi.vi_total)


def test_deterministic(tiny_domain, tiny_job, tiny_result):
    params, report = tiny_result
    again, again_report = pretrain_domain(tiny_domain, tiny_job)
    assert again.param_hash() == report.param_hash
    assert again_report.holdout_vi == report.holdout_vi


def test_seed_changes_result(tiny_domain, tiny_job, tiny_result):
    _, report = tiny_result
    import dataclasses
    job = dataclasses.replace(tiny_job, train=TrainConfig(step_budget=300, seed=5))
    other, _ = pretrain_domain(tiny_domain, job)
    assert other.param_hash() != report.param_hash


def test_checkpoint_written(tiny_domain, tiny_job, tmp_path):
    import dataclasses
    job = dataclasses.replace(
        tiny_job,
        train=TrainConfig(step_budget=20, seed=4),
        out_path=str(tmp_path / "tiny_ck"),
    )
    params, report = pretrain_domain(tiny_domain, job)
    assert report.checkpoint_path is not None
    assert report.checkpoint_path.endswith(".npz")
    assert (tmp_path / "tiny_ck.npz").exists()
    assert (tmp_path / "tiny_ck.json").exists()
    loaded = load_checkpoint(report.checkpoint_path)
    assert loaded.param_hash() == params.param_hash()


def test_beats_fresh_init_on_holdout(tiny_domain, tiny_job, tiny_result):
    params, report = tiny_result
    _, holdout = holdout_split(tiny_domain)
    fresh = init_model(TINY_MODEL, seed=777)
    try:
        fresh_vi = evaluate_model(fresh, holdout).mean.vi_total
    except NoSeeds:
        return  # fresh init cannot even produce fragments: trivially worse
    assert report.holdout_vi.vi_total < fresh_vi
