"""Budgeted active adaptation of a segmentation model to a target domain.

One engine drives four modes: scratch training, passive transfer from the
closest source (by squared MMD under each source's own embedder), active
transfer from the farthest source, and active transfer from the closest
source. Transfer modes fine-tune the chosen source model; the annotation
budget A and gradient-step budget B are conserved exactly in every mode,
split over min(T, A) iterations with remainders pushed to the earliest ones.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import InsufficientTrainingBudget, PoolExhausted
from .manifest import ResultRow
from .mmd import KernelConfig, rank_sources_for_target
from .model import ModelConfig, ModelParams, TrainConfig, init_model, train_steps
from .pools import DomainPool
from .rng import derive_seed
from .sampling import SamplerKind, sample
from .segeval import WatershedConfig, evaluate_model
from .uncertainty import UncertaintyConfig

__all__ = [
    "MODES",
    "BudgetPlan",
    "AdaptConfig",
    "IterationLog",
    "RunRecord",
    "plan_budget",
    "run_adaptation",
    "run_experiment_grid",
    "write_grid_table",
]

MODES = ("scratch", "passive-min-mmd", "active-max-mmd", "active-min-mmd")
_RANDOM_SAMPLER_MODES = ("scratch", "passive-min-mmd")


@dataclass(frozen=True)
class BudgetPlan:
    """A annotations and B steps split across t_effective iterations."""

    annotation_budget: int
    step_budget: int
    t_requested: int
    t_effective: int
    k_annotations: tuple[int, ...]
    s_steps: tuple[int, ...]

    def __post_init__(self):
        if len(self.k_annotations) != self.t_effective or len(self.s_steps) != self.t_effective:
            raise ValueError("schedule length must equal t_effective")
        if sum(self.k_annotations) != self.annotation_budget:
            raise ValueError("annotation schedule does not sum to the budget")
        if sum(self.s_steps) != self.step_budget:
            raise ValueError("step schedule does not sum to the budget")
        if min(self.k_annotations) < 1 or min(self.s_steps) < 1:
            raise ValueError("every iteration needs at least one annotation and one step")


def _split_evenly(total: int, parts: int) -> tuple[int, ...]:
    base, extra = divmod(total, parts)
    return tuple(base + 1 if i < extra else base for i in range(parts))


def plan_budget(annotation_budget: int, step_budget: int, t_requested: int) -> BudgetPlan:
    """min(T, A) iterations; remainders go one-per-iteration to the earliest."""
    if annotation_budget < 1:
        raise ValueError("annotation budget must be at least 1")
    if t_requested < 1:
        raise ValueError("iteration count must be at least 1")
    t_eff = min(t_requested, annotation_budget)
    if step_budget < t_eff:
        raise InsufficientTrainingBudget(
            f"{step_budget} steps cannot cover {t_eff} iterations"
        )
    return BudgetPlan(
        annotation_budget,
        step_budget,
        t_requested,
        t_eff,
        _split_evenly(annotation_budget, t_eff),
        _split_evenly(step_budget, t_eff),
    )


@dataclass(frozen=True)
class AdaptConfig:
    """Mode, sampler, budgets, and sub-configs for one adaptation run.

    Scratch and passive modes always use random sampling, so the sampler
    field is coerced for them; scratch additionally ignores source models.
    """

    mode: str = "active-min-mmd"
    sampler: SamplerKind = SamplerKind("median-uncertainty")
    annotation_budget: int = 4
    step_budget: int = 800
    t_requested: int = 4
    seed: int = 0
    model: ModelConfig = ModelConfig()
    uncertainty: UncertaintyConfig = UncertaintyConfig()
    kernel: KernelConfig = KernelConfig()
    sample_cap: int = 256
    estimator: str = "biased"
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode in _RANDOM_SAMPLER_MODES and self.sampler.name != "random":
            object.__setattr__(self, "sampler", SamplerKind("random"))


@dataclass(frozen=True)
class IterationLog:
    index: int
    selected_ids: tuple[str, ...]
    annotations: int
    steps: int


@dataclass(frozen=True)
class RunRecord:
    """Audit trail of one run: provenance, schedule, per-iteration picks."""

    target: str
    mode: str
    sampler: str
    source_domain: Optional[str]
    source_ranking: tuple[tuple[str, float], ...]
    plan: BudgetPlan
    iterations: tuple[IterationLog, ...]
    seed: int
    initial_param_hash: str
    final_param_hash: str

    def total_annotations(self) -> int:
        return sum(it.annotations for it in self.iterations)

    def total_steps(self) -> int:
        return sum(it.steps for it in self.iterations)


def _annotatable_pool(target_pool: DomainPool, needed: int) -> DomainPool:
    """Label-holding samples of the target, reset to fully unlabeled."""
    ids = sorted(target_pool.labelable_ids())
    if len(ids) < needed:
        raise PoolExhausted(
            f"target {target_pool.name!r} has {len(ids)} annotatable samples, need {needed}"
        )
    return DomainPool(
        name=target_pool.name,
        samples=tuple(target_pool.samples[i] for i in ids),
        labeled_ids=frozenset(),
        unlabeled_ids=frozenset(range(len(ids))),
        sample_ids=tuple(target_pool.sample_ids[i] for i in ids),
    )


def _choose_source(ranking: list[tuple[str, float]], mode: str) -> str:
    if mode == "active-max-mmd":
        top = max(d for _, d in ranking)
        return next(name for name, d in ranking if d == top)
    return ranking[0][0]


def run_adaptation(
    target_pool: DomainPool,
    candidate_models: Mapping[str, ModelParams],
    candidate_pools: Sequence[DomainPool],
    config: AdaptConfig,
    embedder: Optional[Callable] = None,
) -> tuple[ModelParams, RunRecord]:
    """Annotate and fine-tune on the target under the configured mode.

    The labeled set starts empty; iteration t selects K_t unlabeled samples,
    reveals their stored ground truth, and trains S_t steps on everything
    labeled so far.
    """
    plan = plan_budget(config.annotation_budget, config.step_budget, config.t_requested)
    work = _annotatable_pool(target_pool, config.annotation_budget)

    if config.mode == "scratch":
        ranking: list[tuple[str, float]] = []
        source = None
        model = init_model(config.model, derive_seed(config.seed, "scratch-init"))
    else:
        ranking = rank_sources_for_target(
            work,
            list(candidate_pools),
            candidate_models,
            config.kernel,
            config.sample_cap,
            derive_seed(config.seed, "mmd"),
            config.estimator,
            embedder,
        )
        source = _choose_source(ranking, config.mode)
        model = candidate_models[source]

    initial_hash = model.param_hash()
    train_cfg = TrainConfig(
        step_budget=config.step_budget,
        batch_size=1,
        learning_rate=config.learning_rate,
        seed=derive_seed(config.seed, "train"),
    )
    logs = []
    for t in range(plan.t_effective):
        picked = sample(
            config.sampler,
            model,
            work,
            plan.k_annotations[t],
            config.uncertainty,
            derive_seed(config.seed, "iter", t),
        )
        work = work.with_labeled(picked)
        labeled = [
            (work.image(i), work.labels(i)) for i in sorted(work.labeled_ids)
        ]
        model = train_steps(model, labeled, train_cfg, plan.s_steps[t])
        logs.append(
            IterationLog(
                index=t,
                selected_ids=tuple(work.sample_ids[i] for i in picked),
                annotations=len(picked),
                steps=plan.s_steps[t],
            )
        )
    record = RunRecord(
        target=target_pool.name,
        mode=config.mode,
        sampler=config.sampler.name,
        source_domain=source,
        source_ranking=tuple(ranking),
        plan=plan,
        iterations=tuple(logs),
        seed=config.seed,
        initial_param_hash=initial_hash,
        final_param_hash=model.param_hash(),
    )
    return model, record


def run_experiment_grid(
    targets: Mapping[str, tuple[DomainPool, DomainPool]],
    candidate_models: Mapping[str, ModelParams],
    candidate_pools: Sequence[DomainPool],
    modes: Sequence[str],
    sample_sizes: Sequence[int],
    seeds: Sequence[int],
    base_config: AdaptConfig,
    eval_config: WatershedConfig = WatershedConfig(),
    embedder: Optional[Callable] = None,
) -> list[tuple[ResultRow, RunRecord]]:
    """One run per (target, mode, annotation budget, seed).

    `targets` maps a name to its (adaptation pool, held-out test pool).
    Candidates sharing the target's name are excluded per cell. The base
    config supplies everything except mode, budget, and seed.
    """
    if not seeds:
        raise ValueError("at least one seed required")
    if not modes:
        raise ValueError("at least one mode required")
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
    if any(a < 1 for a in sample_sizes) or not sample_sizes:
        raise ValueError("sample sizes must be positive")
    out = []
    for target in sorted(targets):
        train_pool, test_pool = targets[target]
        sources = [p for p in candidate_pools if p.name != target]
        for mode in modes:
            for a in sample_sizes:
                for seed in seeds:
                    cfg = dataclasses.replace(
                        base_config, mode=mode, annotation_budget=a, seed=seed
                    )
                    model, record = run_adaptation(
                        train_pool, candidate_models, sources, cfg, embedder
                    )
                    result = evaluate_model(model, test_pool, eval_config)
                    row = ResultRow(
                        target=target,
                        method=mode,
                        transfer_domain=record.source_domain or "none",
                        sample_size=a,
                        seed=seed,
                        vi_split=result.mean.vi_split,
                        vi_merge=result.mean.vi_merge,
                        vi_total=result.mean.vi_total,
                    )
                    out.append((row, record))
    return out


def write_grid_table(rows: Sequence[ResultRow], path: str | Path) -> Path:
    """Wide mean±std table: one row per method, one column per (target, A).

    The smallest mean in each column is flagged with a trailing '*'. Output
    bytes are deterministic for a given row set.
    """
    if not rows:
        raise ValueError("no rows to tabulate")
    methods = list(dict.fromkeys(r.method for r in rows))
    columns = sorted({(r.target, r.sample_size) for r in rows})
    cells: dict[tuple[str, str, int], tuple[float, float]] = {}
    for method in methods:
        for target, a in columns:
            vals = [
                r.vi_total for r in rows
                if r.method == method and r.target == target and r.sample_size == a
            ]
            if vals:
                mean = float(np.mean(vals))
                std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
                cells[(method, target, a)] = (mean, std)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method"] + [f"{t}/A={a}" for t, a in columns])
        for method in methods:
            line = [method]
            for target, a in columns:
                got = cells.get((method, target, a))
                if got is None:
                    line.append("")
                    continue
                mean, std = got
                col_means = [
                    cells[(m, target, a)][0] for m in methods if (m, target, a) in cells
                ]
                flag = "*" if mean <= min(col_means) else ""
                line.append(f"{mean:.4f}+-{std:.4f}{flag}")
            writer.writerow(line)
    return path
