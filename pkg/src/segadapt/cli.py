"""Command-line entry point wiring the library into reproducible runs.

One binary with verb subcommands. Flags can be preloaded from a JSON config
file (--config); explicit flags win over config values, config values win
over built-in defaults. Every run writes a manifest recording the resolved
configuration, seeds, and content hashes of all inputs, so outputs can be
reproduced byte for byte from the manifest alone.

Exit codes: 0 success, 1 runtime failure, 2 usage error (argparse),
3 invalid configuration. Failures print a single `error:` line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .adapt import (
    MODES,
    AdaptConfig,
    run_adaptation,
    run_experiment_grid,
    write_grid_table,
)
from .errors import SegadaptError
from .images import GrayImage, save_image
from .manifest import VERSION, ResultRow, content_hash, write_run_manifest
from .mmd import (
    MEDIAN_HEURISTIC,
    KernelConfig,
    domain_distance_matrix,
    load_matrix,
    rank_sources,
    save_matrix,
)
from .model import (
    ModelConfig,
    TrainConfig,
    embed_images,
    load_checkpoint,
    save_checkpoint,
    set_compute_threads,
)
from .pools import load_pool, save_pool, split_pool
from .pretrain import PretrainJob, holdout_split, pretrain_domain
from .sampling import SAMPLER_NAMES, SamplerKind
from .segeval import WatershedConfig, evaluate_model
from .stats import (
    Clustering,
    agglomerative_cluster,
    cut_at_k,
    fowlkes_mallows,
    permutation_test_fm,
    render_dendrogram,
    symmetrize,
)
from .synth import DomainSpec, generate_domain, make_benchmark
from .uncertainty import UncertaintyConfig, rank_pool_by_uncertainty

__all__ = ["main"]


class ConfigError(Exception):
    """Invalid configuration or missing referenced path; maps to exit 3."""


def _fail_line(exc: Exception) -> str:
    msg = f"{type(exc).__name__}: {exc}".replace("\n", "; ")
    return f"error: {msg}"


def _int_list(value) -> list[int]:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    parts = [p for p in str(value).split(",") if p.strip() != ""]
    if not parts:
        raise ConfigError("empty integer list")
    return [int(p) for p in parts]


def _str_list(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [p.strip() for p in str(value).split(",") if p.strip() != ""]


def _bandwidth(value) -> object:
    if value == MEDIAN_HEURISTIC:
        return value
    return float(value)


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} directory not found: {p}")
    return p


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {p}")
    return p


def _checkpoint_blob(path) -> Path:
    p = Path(path).with_suffix(".npz")
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    return p


def _load_json(path) -> dict:
    p = _require_file(path, "config")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top-level JSON value must be an object")
    return data


def _sub_config(data: dict, key: str, cls):
    """Build a nested dataclass config from a JSON sub-object."""
    sub = data.get(key, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"config key {key!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(sub) - known)
    if unknown:
        raise ConfigError(f"unknown {key} config keys: {', '.join(unknown)}")
    try:
        return cls(**sub)
    except (SegadaptError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid {key} config: {exc}") from exc


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: dict,
                    outputs: Sequence[str]) -> None:
    manifest = {
        "version": VERSION,
        "command": command,
        "config": config,
        "inputs": {str(k): content_hash(v) for k, v in inputs.items()},
        "outputs": sorted(outputs),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (out_dir / "manifest.json").write_text(text)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved(dc) -> dict:
    return dataclasses.asdict(dc)


def _model_config(data: dict, fallback_size: Optional[int] = None) -> ModelConfig:
    sub = dict(data.get("model", {}))
    if "input_size" not in sub and fallback_size is not None:
        sub["input_size"] = fallback_size
    return _sub_config({"model": sub}, "model", ModelConfig)


def _domain_pool(data_dir: Path, domain: str, split: str):
    try:
        return load_pool(data_dir / domain, split, name=domain)
    except SegadaptError as exc:
        raise ConfigError(str(exc)) from exc


# --- subcommands ---------------------------------------------------------------

def _cmd_synth_gen(args) -> int:
    spec_path = _require_file(args.spec, "spec")
    data = _load_json(spec_path)
    out = _out_dir(args)

    specs: list[DomainSpec] = []
    families = {}
    if "benchmark" in data:
        bench_kwargs = dict(data["benchmark"])
        if "family_sizes" in bench_kwargs and bench_kwargs["family_sizes"] is not None:
            bench_kwargs["family_sizes"] = tuple(bench_kwargs["family_sizes"])
        try:
            bench = make_benchmark(**bench_kwargs)
        except (SegadaptError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid benchmark spec: {exc}") from exc
        specs = [bench.specs[p.name] for p in bench.pools]
        families = dict(bench.families)
        n_samples = int(bench_kwargs.get("n_samples", 24))
    elif "domains" in data:
        n_samples = int(data.get("n_samples", 24))
        try:
            specs = [DomainSpec(**d) for d in data["domains"]]
        except (SegadaptError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid domain spec: {exc}") from exc
    else:
        raise ConfigError("spec file needs a 'benchmark' or 'domains' key")
    if n_samples < 1:
        raise ConfigError("n_samples must be at least 1")

    outputs = []
    for spec in specs:
        pool, flags = generate_domain(spec, n_samples, return_flags=True)
        save_pool(pool, out / "domains", args.split)
        art = out / "domains" / spec.name / "artifacts.csv"
        with open(art, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["image_id", "stripe", "tile", "contrast"])
            for sid, f in zip(pool.sample_ids, flags):
                writer.writerow([sid, int(f.stripe), int(f.tile), int(f.contrast)])
        outputs.append(f"domains/{spec.name}")
    if families:
        (out / "families.json").write_text(
            json.dumps(families, indent=2, sort_keys=True) + "\n")
        outputs.append("families.json")

    config = {
        "spec": data,
        "split": args.split,
        "n_samples": n_samples,
        "domains": [_resolved(s) for s in specs],
        "seed": [s.seed for s in specs],
        "threads": args.threads,
    }
    _write_manifest(out, "synth-gen", config, {"spec": spec_path}, outputs)
    return 0


def _cmd_pretrain(args) -> int:
    data_dir = _require_dir(args.data, "data")
    out = _out_dir(args)
    extra = _load_json(args.config) if args.config else {}
    pool = _domain_pool(data_dir, args.domain, args.split)
    model_cfg = _model_config(extra, fallback_size=pool.image(0).height)
    try:
        train_cfg = TrainConfig(step_budget=args.steps, learning_rate=args.learning_rate,
                                seed=args.seed)
        watershed = _sub_config(extra, "watershed", WatershedConfig)
        job = PretrainJob(domain=args.domain, model=model_cfg, train=train_cfg,
                          out_path=str(out / args.domain), watershed=watershed)
    except (SegadaptError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    params, report = pretrain_domain(pool, job)
    report_dict = dataclasses.asdict(report)
    # record the checkpoint relative to the run dir so reruns are relocatable
    if report.checkpoint_path:
        report_dict["checkpoint_path"] = Path(report.checkpoint_path).name
    (out / "report.json").write_text(json.dumps(report_dict, indent=2, sort_keys=True) + "\n")

    config = {
        "domain": args.domain,
        "split": args.split,
        "model": _resolved(model_cfg),
        "train": _resolved(train_cfg),
        "watershed": _resolved(watershed),
        "holdout": {"n_train": report.n_train, "n_holdout": report.n_holdout},
        "seed": args.seed,
        "threads": args.threads,
    }
    inputs = {"data": data_dir / args.domain}
    if args.config:
        inputs["config"] = Path(args.config)
    _write_manifest(out, "pretrain", config, inputs,
                    [f"{args.domain}.npz", f"{args.domain}.json", "report.json"])
    return 0


def _cmd_embed(args) -> int:
    blob = _checkpoint_blob(args.checkpoint)
    data_dir = _require_dir(args.data, "data")
    out = _out_dir(args)
    pool = _domain_pool(data_dir, args.domain, args.split)
    model = load_checkpoint(blob)
    vectors = embed_images(model, [pool.image(i) for i in range(len(pool))])
    path = out / "embeddings.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id"] + [f"e{j}" for j in range(vectors.shape[1])])
        for sid, row in zip(pool.sample_ids, vectors):
            writer.writerow([sid] + [repr(float(v)) for v in row])

    config = {
        "domain": args.domain,
        "split": args.split,
        "model": _resolved(model.config),
        "embedding_dim": int(vectors.shape[1]),
        "threads": args.threads,
    }
    _write_manifest(out, "embed", config,
                    {"checkpoint": blob, "data": data_dir / args.domain},
                    ["embeddings.csv"])
    return 0


def _load_domain_models(models_dir: Path, domains: Sequence[str]) -> dict:
    models = {}
    for d in domains:
        models[d] = load_checkpoint(_checkpoint_blob(models_dir / d))
    return models


def _cmd_mmd_matrix(args) -> int:
    data_dir = _require_dir(args.data, "data")
    models_dir = _require_dir(args.models, "models")
    out = _out_dir(args)
    domains = _str_list(args.domains) if args.domains else sorted(
        p.name for p in data_dir.iterdir() if p.is_dir())
    if not domains:
        raise ConfigError(f"no domain directories under {data_dir}")
    try:
        kernel = KernelConfig(bandwidth=_bandwidth(args.bandwidth))
    except (SegadaptError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    pools = [_domain_pool(data_dir, d, args.split) for d in domains]
    models = _load_domain_models(models_dir, domains)

    matrix = domain_distance_matrix(pools, models, kernel, sample_cap=args.sample_cap,
                                    seed=args.seed, estimator=args.estimator)
    save_matrix(matrix, out / "mmd_matrix.csv")

    config = {
        "domains": domains,
        "split": args.split,
        "kernel": _resolved(kernel),
        "sample_cap": args.sample_cap,
        "estimator": args.estimator,
        "seed": args.seed,
        "threads": args.threads,
    }
    inputs = {"data": data_dir, "models": models_dir}
    _write_manifest(out, "mmd-matrix", config, inputs,
                    ["mmd_matrix.csv", "mmd_matrix.json"])
    return 0


def _cmd_ods(args) -> int:
    matrix_path = _require_file(args.matrix, "matrix")
    matrix = load_matrix(matrix_path)
    candidates = _str_list(args.candidates) if args.candidates else [
        n for n in matrix.names if n != args.target]
    try:
        ranking = rank_sources(matrix, args.target, candidates)
    except (SegadaptError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    selected = ranking[0][0]
    print(selected)

    if args.out:
        out = _out_dir(args)
        payload = {
            "target": args.target,
            "candidates": candidates,
            "ranking": [[name, dist] for name, dist in ranking],
            "selected": selected,
        }
        (out / "ods.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        config = {"target": args.target, "candidates": candidates, "threads": args.threads}
        _write_manifest(out, "ods", config, {"matrix": matrix_path}, ["ods.json"])
    return 0


def _cmd_audit_uncertainty(args) -> int:
    blob = _checkpoint_blob(args.checkpoint)
    data_dir = _require_dir(args.data, "data")
    out = _out_dir(args)
    try:
        cfg = UncertaintyConfig(k_passes=args.passes)
    except (SegadaptError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    pool = _domain_pool(data_dir, args.domain, args.split)
    model = load_checkpoint(blob)

    scores = rank_pool_by_uncertainty(model, pool.all_unlabeled(), cfg, seed=args.seed,
                                      keep_maps=args.heatmaps)
    path = out / "uncertainty.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "uncertainty"])
        for s in scores:
            writer.writerow([s.image_id, repr(float(s.value))])
    outputs = ["uncertainty.csv"]

    if args.heatmaps:
        heat_dir = out / "heatmaps"
        heat_dir.mkdir(exist_ok=True)
        # one shared scale keeps grey values comparable across images
        scale = max((float(s.entropy_map.max()) for s in scores), default=0.0)
        scale = scale if scale > 0 else 1.0
        for s in scores:
            grey = np.clip(np.rint(s.entropy_map / scale * 255.0), 0, 255).astype(np.uint8)
            save_image(GrayImage(grey), heat_dir / f"{s.image_id}.pgm")
        sidecar = {"scale_nats_at_255": scale, "unit": "nats", "maxval": 255}
        (heat_dir / "scale.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        outputs.append("heatmaps")

    config = {
        "domain": args.domain,
        "split": args.split,
        "uncertainty": _resolved(cfg),
        "model": _resolved(model.config),
        "seed": args.seed,
        "heatmaps": bool(args.heatmaps),
        "threads": args.threads,
    }
    _write_manifest(out, "audit-uncertainty", config,
                    {"checkpoint": blob, "data": data_dir / args.domain}, outputs)
    return 0


def _split_target(pool, test_count: Optional[int]):
    if test_count is None:
        return holdout_split(pool)
    try:
        return split_pool(pool, len(pool) - test_count)
    except SegadaptError as exc:
        raise ConfigError(str(exc)) from exc


def _adapt_config_from(extra: dict, args, model_cfg: ModelConfig, mode: str, a: int,
                       seed: int) -> AdaptConfig:
    try:
        return AdaptConfig(
            mode=mode,
            sampler=SamplerKind(args.sampler),
            annotation_budget=a,
            step_budget=args.steps,
            t_requested=args.iterations,
            seed=seed,
            model=model_cfg,
            uncertainty=_sub_config(extra, "uncertainty", UncertaintyConfig),
            kernel=_sub_config(extra, "kernel", KernelConfig),
            sample_cap=extra.get("sample_cap", 256),
            estimator=extra.get("estimator", "biased"),
            learning_rate=args.learning_rate,
        )
    except (SegadaptError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _cmd_adapt(args) -> int:
    data_dir = _require_dir(args.data, "data")
    out = _out_dir(args)
    extra = _load_json(args.config) if args.config else {}
    seeds = _int_list(args.seeds)
    if not seeds:
        raise ConfigError("at least one seed required")
    if args.annotations < 1:
        raise ConfigError("annotation budget must be positive")

    target_pool = _domain_pool(data_dir, args.target, args.split)
    adapt_pool, test_pool = _split_target(target_pool, args.test_count)
    model_cfg = _model_config(extra, fallback_size=target_pool.image(0).height)
    watershed = _sub_config(extra, "watershed", WatershedConfig)

    sources = []
    models, source_pools = {}, []
    inputs = {"data": data_dir / args.target}
    if args.mode != "scratch":
        sources = _str_list(args.sources) if args.sources else []
        if args.models is None:
            raise ConfigError(f"mode {args.mode!r} needs --models")
        models_dir = _require_dir(args.models, "models")
        if not sources:
            sources = sorted(p.stem for p in models_dir.glob("*.npz") if p.stem != args.target)
        if not sources:
            raise ConfigError(f"no source checkpoints under {models_dir}")
        models = _load_domain_models(models_dir, sources)
        source_pools = [_domain_pool(data_dir, d, args.split) for d in sources]
        inputs["models"] = models_dir

    rows, records = [], []
    base = None
    for seed in seeds:
        cfg = _adapt_config_from(extra, args, model_cfg, args.mode, args.annotations, seed)
        base = cfg
        adapted, record = run_adaptation(adapt_pool, models, source_pools, cfg)
        result = evaluate_model(adapted, test_pool, watershed)
        save_checkpoint(adapted, out / f"adapted_seed{seed}")
        rows.append(ResultRow(
            target=args.target, method=args.mode,
            transfer_domain=record.source_domain or "none",
            sample_size=args.annotations, seed=seed,
            vi_split=result.mean.vi_split, vi_merge=result.mean.vi_merge,
            vi_total=result.mean.vi_total,
        ))
        records.append(dataclasses.asdict(record))

    config = {
        "target": args.target,
        "split": args.split,
        "test_count": len(test_pool),
        "adapt": _resolved(base),
        "watershed": _resolved(watershed),
        "seeds": seeds,
        "sources": sources,
        "runs": records,
        "threads": args.threads,
    }
    if args.config:
        inputs["config"] = Path(args.config)
    write_run_manifest(config, rows, out / "results.json")
    outputs = ["results.json", "results.csv"] + [f"adapted_seed{s}.npz" for s in seeds]
    _write_manifest(out, "adapt", config, inputs, outputs)
    return 0


def _cmd_evaluate(args) -> int:
    blob = _checkpoint_blob(args.checkpoint)
    data_dir = _require_dir(args.data, "data")
    out = _out_dir(args)
    try:
        watershed = WatershedConfig(membrane_threshold=args.threshold,
                                    min_seed_area=args.min_seed_area)
    except (SegadaptError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    pool = _domain_pool(data_dir, args.domain, args.split)
    model = load_checkpoint(blob)
    result = evaluate_model(model, pool, watershed)

    path = out / "per_image.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "vi_split", "vi_merge", "vi_total", "n_pixels"])
        for sid, vi in zip(pool.sample_ids, result.per_image):
            writer.writerow([sid, repr(vi.vi_split), repr(vi.vi_merge),
                             repr(vi.vi_total), vi.n_pixels])
    summary = {
        "domain": args.domain,
        "split": args.split,
        "n_images": len(result.per_image),
        "mean": dataclasses.asdict(result.mean),
        "watershed": _resolved(watershed),
        "model_hash": model.param_hash(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    config = {
        "domain": args.domain,
        "split": args.split,
        "watershed": _resolved(watershed),
        "model": _resolved(model.config),
        "threads": args.threads,
    }
    _write_manifest(out, "evaluate", config,
                    {"checkpoint": blob, "data": data_dir / args.domain},
                    ["per_image.csv", "summary.json"])
    return 0


def _cmd_grid(args) -> int:
    if not args.config:
        raise ConfigError("grid requires --config")
    exp = _load_json(args.config)
    out = _out_dir(args)
    for key in ("data", "models", "targets"):
        if key not in exp:
            raise ConfigError(f"grid config missing {key!r}")
    data_dir = _require_dir(exp["data"], "data")
    models_dir = _require_dir(exp["models"], "models")
    targets = _str_list(exp["targets"])
    modes = _str_list(exp.get("modes", list(MODES)))
    sizes = _int_list(exp.get("sample_sizes", [4]))
    seeds = _int_list(exp.get("seeds", [0]))
    split = exp.get("split", "all")
    test_count = exp.get("test_count")
    if not seeds:
        raise ConfigError("at least one seed required")
    if any(a < 1 for a in sizes):
        raise ConfigError("annotation budgets must be positive")

    domains = sorted(p.stem for p in models_dir.glob("*.npz"))
    if not domains:
        raise ConfigError(f"no checkpoints under {models_dir}")
    missing = sorted(set(targets) - {p.name for p in data_dir.iterdir() if p.is_dir()})
    if missing:
        raise ConfigError(f"target domains without data: {', '.join(missing)}")

    pools = {d: _domain_pool(data_dir, d, split) for d in
             sorted(set(domains) | set(targets))}
    first = pools[sorted(pools)[0]]
    model_cfg = _model_config(exp, fallback_size=first.image(0).height)
    target_pools = {t: _split_target(pools[t], test_count) for t in targets}
    candidate_models = _load_domain_models(models_dir, domains)
    candidate_pools = [pools[d] for d in domains]
    watershed = _sub_config(exp, "watershed", WatershedConfig)

    try:
        base = AdaptConfig(
            mode="active-min-mmd",
            sampler=SamplerKind(exp.get("sampler", "median-uncertainty")),
            annotation_budget=max(sizes),
            step_budget=int(exp.get("step_budget", 800)),
            t_requested=int(exp.get("t_requested", 4)),
            seed=seeds[0],
            model=model_cfg,
            uncertainty=_sub_config(exp, "uncertainty", UncertaintyConfig),
            kernel=_sub_config(exp, "kernel", KernelConfig),
            sample_cap=int(exp.get("sample_cap", 256)),
            estimator=exp.get("estimator", "biased"),
            learning_rate=float(exp.get("learning_rate", 1e-3)),
        )
    except (SegadaptError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    results = run_experiment_grid(target_pools, candidate_models, candidate_pools,
                                  modes, sizes, seeds, base, eval_config=watershed)
    rows = [r for r, _ in results]
    records = [dataclasses.asdict(rec) for _, rec in results]

    config = {
        "experiment": exp,
        "modes": modes,
        "sample_sizes": sizes,
        "seeds": seeds,
        "targets": targets,
        "base": _resolved(base),
        "watershed": _resolved(watershed),
        "runs": records,
        "threads": args.threads,
    }
    write_run_manifest(config, rows, out / "results.json")
    write_grid_table(rows, out / "grid_table.csv")
    _write_manifest(out, "grid", config,
                    {"data": data_dir, "models": models_dir,
                     "config": Path(args.config)},
                    ["results.json", "results.csv", "grid_table.csv"])
    return 0


def _read_reference(path: Path) -> Clustering:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["item", "group"]:
        raise ConfigError(f"{path}: expected header 'item,group'")
    pairs = [(r[0], r[1]) for r in rows[1:] if r]
    try:
        return Clustering.from_groups(pairs)
    except (SegadaptError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _cmd_cluster(args) -> int:
    matrix_path = _require_file(args.matrix, "matrix")
    out = _out_dir(args)
    ks = _int_list(args.k)
    if any(k < 1 for k in ks):
        raise ConfigError("k must be positive")
    reference = _read_reference(_require_file(args.reference, "reference")) \
        if args.reference else None

    matrix = symmetrize(load_matrix(matrix_path))
    dend = agglomerative_cluster(matrix)
    text = render_dendrogram(dend)
    (out / "dendrogram.txt").write_text(text if text.endswith("\n") else text + "\n")
    dend_json = {
        "leaves": list(dend.leaves),
        "merges": [[a, b, h] for a, b, h in dend.merges],
    }
    (out / "dendrogram.json").write_text(json.dumps(dend_json, indent=2, sort_keys=True) + "\n")
    outputs = ["dendrogram.txt", "dendrogram.json"]

    stats = {}
    for k in ks:
        if k > len(matrix.names):
            raise ConfigError(f"k={k} exceeds {len(matrix.names)} items")
        cut = cut_at_k(dend, k)
        path = out / f"clusters_k{k}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["item", "cluster"])
            for item in cut.items:
                writer.writerow([item, cut.by_item()[item]])
        outputs.append(path.name)
        if reference is not None:
            fm = fowlkes_mallows(reference, cut)
            p = permutation_test_fm(reference, cut, mode=args.perm_mode,
                                    n_perm=args.n_perm, seed=args.seed)
            stats[str(k)] = {"fowlkes_mallows": fm, "p_value": p}
    if reference is not None:
        payload = {"mode": args.perm_mode, "n_perm": args.n_perm, "seed": args.seed,
                   "by_k": stats}
        (out / "stats.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        outputs.append("stats.json")

    config = {"k": ks, "perm_mode": args.perm_mode, "n_perm": args.n_perm,
              "seed": args.seed, "reference": args.reference, "threads": args.threads}
    inputs = {"matrix": matrix_path}
    if args.reference:
        inputs["reference"] = Path(args.reference)
    _write_manifest(out, "cluster", config, inputs, outputs)
    return 0


# --- parser --------------------------------------------------------------------

def _add_common(parser, out_required=True):
    parser.add_argument("--config", help="JSON file of flag defaults")
    parser.add_argument("--threads", type=int, default=1,
                        help="compute thread cap (default 1, reproducible)")
    parser.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segadapt",
        description="Active domain adaptation toolkit for membrane segmentation.",
    )
    parser.add_argument("--version", action="version", version=f"segadapt {VERSION}")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")

    p = sub.add_parser("synth-gen", help="render synthetic domains to disk")
    p.add_argument("--spec", required=True, help="benchmark or domain-list JSON")
    p.add_argument("--split", default="all")
    _add_common(p)
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("pretrain", help="train one source model on its domain")
    p.add_argument("--data", required=True, help="domain data root")
    p.add_argument("--domain", required=True)
    p.add_argument("--split", default="all")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("embed", help="bottleneck embeddings for a domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--split", default="all")
    _add_common(p)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("mmd-matrix", help="pairwise domain distance matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="checkpoint directory")
    p.add_argument("--domains", help="comma-separated subset (default: all)")
    p.add_argument("--split", default="all")
    p.add_argument("--bandwidth", default=MEDIAN_HEURISTIC)
    p.add_argument("--sample-cap", type=int, default=256)
    p.add_argument("--estimator", choices=("biased", "unbiased"), default="biased")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=_cmd_mmd_matrix)

    p = sub.add_parser("ods", help="pick the min-MMD source for a target")
    p.add_argument("--matrix", required=True, help="distance matrix CSV")
    p.add_argument("--target", required=True)
    p.add_argument("--candidates", help="comma-separated subset (default: all others)")
    _add_common(p, out_required=False)
    p.set_defaults(func=_cmd_ods)

    p = sub.add_parser("audit-uncertainty", help="rank a pool by MC-dropout uncertainty")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--split", default="all")
    p.add_argument("--passes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heatmaps", action="store_true", help="write entropy PGMs")
    _add_common(p)
    p.set_defaults(func=_cmd_audit_uncertainty)

    p = sub.add_parser("adapt", help="budgeted adaptation of a source model to a target")
    p.add_argument("--data", required=True)
    p.add_argument("--models", help="checkpoint directory (unused for scratch)")
    p.add_argument("--target", required=True)
    p.add_argument("--sources", help="comma-separated candidates (default: all others)")
    p.add_argument("--split", default="all")
    p.add_argument("--mode", choices=MODES, default="active-min-mmd")
    p.add_argument("--sampler", choices=SAMPLER_NAMES, default="median-uncertainty")
    p.add_argument("-A", "--annotations", type=int, default=4, help="annotation budget")
    p.add_argument("-B", "--steps", type=int, default=800, help="gradient step budget")
    p.add_argument("-T", "--iterations", type=int, default=4, help="requested iterations")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--test-count", type=int, help="held-out tail size (default: 20%%)")
    _add_common(p)
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("evaluate", help="watershed + VI of a checkpoint on a labeled split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--split", default="all")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-seed-area", type=int, default=8)
    _add_common(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("grid", help="full mode x budget x seed experiment table")
    _add_common(p)
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("cluster", help="UPGMA + cluster statistics from a distance CSV")
    p.add_argument("--matrix", required=True)
    p.add_argument("--k", default="3", help="comma-separated cut sizes")
    p.add_argument("--reference", help="item,group CSV for FM + permutation p")
    p.add_argument("--perm-mode", choices=("exact", "montecarlo"), default="exact")
    p.add_argument("--n-perm", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=_cmd_cluster)

    return parser


def _apply_config_defaults(parser, argv):
    """Let --config JSON values act as subcommand flag defaults."""
    if not argv or argv[0].startswith("-"):
        return
    command = argv[0]
    if command == "grid":
        return  # grid's --config is the experiment spec, not flag defaults
    path = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
    if path is None:
        return
    sub_actions = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    if not sub_actions or command not in sub_actions[0].choices:
        return
    subparser = sub_actions[0].choices[command]
    data = _load_json(path)
    dests = {a.dest for a in subparser._actions}
    flat = {k: v for k, v in data.items() if not isinstance(v, (dict, list))}
    flat.update({k: v for k, v in data.items()
                 if isinstance(v, list) and k in ("seeds", "k")})
    unknown = sorted(k for k in flat if k.replace("-", "_") not in dests)
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    subparser.set_defaults(**{k.replace("-", "_"): v for k, v in flat.items()})


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_defaults(parser, argv)
    except ConfigError as exc:
        print(_fail_line(exc), file=sys.stderr)
        return 3
    args = parser.parse_args(argv)
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        set_compute_threads(args.threads)
        return args.func(args)
    except ConfigError as exc:
        print(_fail_line(exc), file=sys.stderr)
        return 3
    except (SegadaptError, OSError, ValueError, KeyError) as exc:
        print(_fail_line(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
