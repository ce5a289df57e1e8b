"""Source-model pretraining: one fresh-init model per fully labeled domain,
trained on the first 80% of samples and scored on the held-out tail.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .model import (
    ModelConfig,
    ModelParams,
    TrainConfig,
    init_model,
    save_checkpoint,
    train_steps,
)
from .pools import DomainPool, split_pool
from .rng import derive_seed
from .segeval import VIResult, WatershedConfig, evaluate_model

__all__ = ["PretrainJob", "PretrainReport", "holdout_split", "pretrain_domain"]

HOLDOUT_FRACTION = 0.2


@dataclass(frozen=True)
class PretrainJob:
    """What to train: domain name, architecture, schedule, checkpoint target."""

    domain: str
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig(step_budget=2000)
    out_path: Optional[str] = None
    watershed: WatershedConfig = WatershedConfig()


@dataclass(frozen=True)
class PretrainReport:
    domain: str
    steps: int
    n_train: int
    n_holdout: int
    final_loss: float
    holdout_vi: VIResult
    param_hash: str
    checkpoint_path: Optional[str]


def holdout_split(pool: DomainPool) -> tuple[DomainPool, DomainPool]:
    """First 80% of samples by index for training, the rest held out."""
    n = len(pool)
    if n < 2:
        raise ValueError("holdout split needs at least 2 samples")
    n_train = min(max(int(n * (1 - HOLDOUT_FRACTION)), 1), n - 1)
    return split_pool(pool, n_train)


def pretrain_domain(pool: DomainPool, job: PretrainJob) -> tuple[ModelParams, PretrainReport]:
    """Fresh init, job.train.step_budget updates, held-out VI; deterministic."""
    if pool.labelable_ids() != frozenset(range(len(pool))):
        raise ValueError(f"domain {pool.name!r} must be fully labeled for pretraining")
    train_pool, holdout = holdout_split(pool)
    params = init_model(job.model, derive_seed(job.train.seed, "pretrain-init", job.domain))
    samples = [(train_pool.image(i), train_pool.labels(i)) for i in range(len(train_pool))]
    params = train_steps(params, samples, job.train, job.train.step_budget)
    quality = evaluate_model(params, holdout, job.watershed)
    path = None
    if job.out_path is not None:
        path = str(save_checkpoint(params, job.out_path))
    report = PretrainReport(
        domain=job.domain,
        steps=job.train.step_budget,
        n_train=len(train_pool),
        n_holdout=len(holdout),
        final_loss=params.loss_history[-1],
        holdout_vi=quality.mean,
        param_hash=params.param_hash(),
        checkpoint_path=path,
    )
    return params, report
