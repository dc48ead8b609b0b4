"""Experiment orchestration: clean vs poisoned retraining over folds and budgets."""

import dataclasses
import logging
import time
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import numpy as np

from .classifiers import TrainedModel, fit
from .data import kfold, load_dataset, standardize
from .defense import run_defense
from .metrics import (
    f1_score,
    kde_loglik,
    mann_whitney_u,
    paired_diffs,
    significance_stars,
    subgroup_gap_pct,
)
from .models import (
    CfPoisonError,
    ClassifierSpec,
    Counterfactual,
    Dataset,
    ExperimentConfig,
    ExperimentError,
    ExperimentReport,
    FoldPlan,
    MetricRecord,
    PoisonSet,
    TargetSpec,
)
from .poison import (
    diverse_explainer,
    empty_poison_set,
    generate_poison_budget,
    label_flip_poison,
    poisoned_training_set,
)
from .recourse import cost, explain_batch
from .utils import derive_seed, rng_for

logger = logging.getLogger(__name__)

# Purpose keys for derive_seed
_KEY_MODEL = 101
_KEY_CF = 102
_KEY_POISON = 103
_KEY_DEFENSE = 104
_KEY_LOCAL = 105


@dataclasses.dataclass
class _Sample:
    """Values of one metric plus the clean/poisoned samples its significance test compares"""

    values: list = dataclasses.field(default_factory=list)
    clean: list = dataclasses.field(default_factory=list)
    poisoned: list = dataclasses.field(default_factory=list)


@dataclasses.dataclass
class FoldResult:
    fold: int
    samples: dict  # (budget index, metric) -> _Sample
    failures: Counter
    elapsed: float


def _costs(c, cfs) -> np.ndarray:
    return np.array([cost(c, cf.delta) if cf.valid else np.inf for cf in cfs])


def _local_target(cfg: ExperimentConfig, train: Dataset, model: TrainedModel, fold: int) -> TargetSpec:
    """Local targets index the fold's training rows; unset means a seeded pick among eligible rows"""
    target = cfg.target
    if target.local_index is not None:
        if target.local_index >= train.n:
            raise ExperimentError(f"local_index {target.local_index} outside training fold", fold)
        return target
    eligible = np.flatnonzero(model.predict(train.features) == target.y)
    if eligible.size == 0:
        raise ExperimentError("no training row is predicted as the target class", fold)
    pick = int(rng_for(cfg.seed, _KEY_LOCAL, fold).choice(eligible))
    return dataclasses.replace(target, local_index=pick)


def counterfactual_poison(
    cfg: ExperimentConfig,
    train: Dataset,
    model: TrainedModel,
    target: TargetSpec,
    budget: float,
    fold: int = 0,
    budget_index: int = 0,
) -> PoisonSet:
    """Counterfactual-based poison for one fold and budget, seeded by (fold, budget index)"""
    seed = derive_seed(cfg.seed, _KEY_POISON, fold, budget_index)
    poison_cfg = dataclasses.replace(cfg.poison, seed=derive_seed(seed, cfg.poison.seed))
    if budget == 0:
        return empty_poison_set(train.d, poison_cfg)
    return generate_poison_budget(
        train,
        model,
        target,
        poison_cfg,
        budget,
        diverse_explainer(cfg.cost, cfg.recourse),
        cfg.cost,
        cfg.recourse,
    )


def poison_fold(
    cfg: ExperimentConfig,
    train: Dataset,
    model: TrainedModel,
    target: TargetSpec,
    budget: float,
    fold: int = 0,
    budget_index: int = 0,
) -> tuple[Dataset, np.ndarray, int]:
    """
    Poisoned training set of one fold.

    Returns:
        (poisoned training set, row indices of poison within it, failed instances)
    """
    if cfg.poison_mode == "label_flip":
        if budget == 0:
            return train, np.zeros(0, dtype=int), 0
        flipped = label_flip_poison(train, budget, derive_seed(cfg.seed, _KEY_POISON, fold, budget_index))
        return flipped, np.asarray(flipped.provenance["flipped"], dtype=int), 0

    poison = counterfactual_poison(cfg, train, model, target, budget, fold, budget_index)
    poisoned = poisoned_training_set(train, poison)
    return poisoned, np.arange(train.n, train.n + len(poison)), poison.failures


@dataclasses.dataclass
class FoldSplit:
    """Standardized train/test split of one fold with its clean model"""

    fold: int
    train: Dataset
    test: Dataset
    spec: ClassifierSpec
    model: TrainedModel
    target: TargetSpec


def prepare_fold(cfg: ExperimentConfig, ds: Dataset, plan: FoldPlan, fold: int) -> FoldSplit:
    train_idx, test_idx = plan.train_indices(fold), plan.test_indices(fold)
    _, scaled = standardize(ds, train_idx)
    train, test = scaled.subset(train_idx), scaled.subset(test_idx)
    spec = dataclasses.replace(
        cfg.classifier, seed=derive_seed(cfg.seed, _KEY_MODEL, fold, cfg.classifier.seed)
    )
    model = fit(spec, train)
    target = cfg.target
    if target.level == "local":
        target = _local_target(cfg, train, model, fold)
    return FoldSplit(fold, train, test, spec, model, target)


def explain_fold(
    cfg: ExperimentConfig,
    split: FoldSplit,
    model: Optional[TrainedModel] = None,
    reference: Optional[Dataset] = None,
) -> tuple[np.ndarray, list[Counterfactual]]:
    """
    Counterfactuals of the test rows the clean model predicts as the target class.

    Returns:
        (test row indices, counterfactuals in the same order)
    """
    negatives = np.flatnonzero(split.model.predict(split.test.features) == split.target.y)
    model = split.model if model is None else model
    reference = split.train if reference is None else reference
    return negatives, _explain_rows(cfg, split, model, reference, split.test.features[negatives])


def _explain_rows(cfg, split, model, reference, X) -> list[Counterfactual]:
    return explain_batch(
        cfg.cf_method,
        model,
        reference,
        X,
        1 - split.target.y,
        cfg.cost,
        cfg.recourse,
        derive_seed(cfg.seed, _KEY_CF, split.fold),
        cfg.poison.k,
    )


def _add(samples, key, values, clean=(), poisoned=()):
    entry = samples[key]
    entry.values.extend(float(v) for v in values)
    entry.clean.extend(float(v) for v in clean)
    entry.poisoned.extend(float(v) for v in poisoned)


def _run_fold(cfg: ExperimentConfig, ds: Dataset, plan: FoldPlan, fold: int) -> FoldResult:
    start = time.perf_counter()
    failures: Counter = Counter()
    samples: dict = defaultdict(_Sample)

    split = prepare_fold(cfg, ds, plan, fold)
    train, test, spec = split.train, split.test, split.spec
    clean_model, target = split.model, split.target

    negatives, clean_cfs = explain_fold(cfg, split)
    clean_costs = _costs(cfg.cost, clean_cfs)
    failures["cf_clean"] += int(np.sum(~np.isfinite(clean_costs)))
    clean_f1 = f1_score(clean_model.predict(test.features), test.labels)
    if target.level == "local":
        x_target = train.features[target.local_index][None, :]
        clean_target_cost = _costs(cfg.cost, _explain_rows(cfg, split, clean_model, train, x_target))

    for bi, budget in enumerate(cfg.budgets):
        try:
            poisoned_train, poison_idx, poison_failures = poison_fold(
                cfg, train, clean_model, target, budget, fold, bi
            )
            failures["poison_instances"] += poison_failures
            poisoned_model = fit(spec, poisoned_train)
        except CfPoisonError as e:
            raise ExperimentError(str(e), fold, budget) from e

        _, poisoned_cfs = explain_fold(cfg, split, poisoned_model, poisoned_train)
        poisoned_costs = _costs(cfg.cost, poisoned_cfs)
        failures["cf_poisoned"] += int(np.sum(~np.isfinite(poisoned_costs)))
        both = np.isfinite(clean_costs) & np.isfinite(poisoned_costs)

        pct, excluded = paired_diffs(poisoned_costs[both], clean_costs[both])
        failures["excluded_zero_cost"] += excluded
        diff_name = "spillover_cost_diff_pct" if target.level == "local" else "cost_diff_pct"
        _add(samples, (bi, diff_name), pct, clean_costs[both], poisoned_costs[both])
        absolute, _ = paired_diffs(poisoned_costs[both], clean_costs[both], relative=False)
        _add(samples, (bi, "cost_diff_abs"), absolute, clean_costs[both], poisoned_costs[both])

        rows = np.flatnonzero(both)
        clean_sparsity = [clean_cfs[i].costs.sparsity for i in rows]
        poisoned_sparsity = [poisoned_cfs[i].costs.sparsity for i in rows]
        _add(
            samples,
            (bi, "sparsity_diff"),
            np.subtract(poisoned_sparsity, clean_sparsity),
            clean_sparsity,
            poisoned_sparsity,
        )

        if rows.size:
            clean_ll = kde_loglik(train.features, np.array([clean_cfs[i].x_cf for i in rows]))
            poisoned_ll = kde_loglik(train.features, np.array([poisoned_cfs[i].x_cf for i in rows]))
            _add(samples, (bi, "kde_loglik_diff"), poisoned_ll - clean_ll, clean_ll, poisoned_ll)

        poisoned_f1 = f1_score(poisoned_model.predict(test.features), test.labels)
        _add(samples, (bi, "f1_diff"), [poisoned_f1 - clean_f1], [clean_f1], [poisoned_f1])

        if target.level == "subgroup" and test.sensitive is not None:
            groups = test.sensitive[negatives]
            try:
                gap = subgroup_gap_pct(
                    clean_costs[groups == 0],
                    clean_costs[groups == 1],
                    poisoned_costs[groups == 0],
                    poisoned_costs[groups == 1],
                )
            except CfPoisonError:
                gap = float("nan")
            if np.isfinite(gap):
                mine = both & (groups == target.subgroup_value)
                _add(samples, (bi, "subgroup_gap_pct"), [gap], clean_costs[mine], poisoned_costs[mine])
            else:
                failures["subgroup_zero_gap"] += 1

        if target.level == "local":
            poisoned_target_cost = _costs(
                cfg.cost, _explain_rows(cfg, split, poisoned_model, poisoned_train, x_target)
            )
            target_pct, _ = paired_diffs(poisoned_target_cost, clean_target_cost)
            _add(
                samples,
                (bi, "target_cost_diff_pct"),
                target_pct,
                clean_target_cost[np.isfinite(clean_target_cost)],
                poisoned_target_cost[np.isfinite(poisoned_target_cost)],
            )

        for method in cfg.defenses:
            defense = dataclasses.replace(
                cfg.defense, method=method, seed=derive_seed(cfg.seed, _KEY_DEFENSE, fold, bi)
            )
            try:
                report = run_defense(defense, test, poisoned_train, poison_idx)
            except CfPoisonError as e:
                raise ExperimentError(str(e), fold, budget) from e
            _add(samples, (bi, f"recall_{method}"), [report.recall])
            _add(samples, (bi, f"precision_{method}"), [report.precision])

    logger.info("Fold %d done (%d explained rows)", fold, len(negatives))
    return FoldResult(fold, dict(samples), failures, time.perf_counter() - start)


def _fold_job(args) -> FoldResult:
    return _run_fold(*args)


def _record(fold: int, budget: float, metric: str, sample: _Sample) -> MetricRecord:
    values = tuple(sample.values)
    median = float(np.median(values)) if values else float("nan")
    p_value = float("nan")
    if sample.clean and sample.poisoned:
        _, p_value = mann_whitney_u(sample.clean, sample.poisoned)
    return MetricRecord(
        fold=fold,
        budget=budget,
        metric=metric,
        values=values,
        median=median,
        p_value=p_value,
        stars=significance_stars(p_value),
    )


def collect_records(cfg: ExperimentConfig, results: list[FoldResult]) -> list[MetricRecord]:
    """Per-fold records followed by pooled records (fold -1), in a fixed order"""
    records = []
    pooled: dict = defaultdict(_Sample)
    for result in sorted(results, key=lambda r: r.fold):
        for (bi, metric), sample in sorted(result.samples.items()):
            records.append(_record(result.fold, cfg.budgets[bi], metric, sample))
            _add(pooled, (bi, metric), sample.values, sample.clean, sample.poisoned)
    for (bi, metric), sample in sorted(pooled.items()):
        records.append(_record(-1, cfg.budgets[bi], metric, sample))
    return records


def run_experiment(
    cfg: ExperimentConfig,
    workers: int = 1,
    meta: Optional[dict] = None,
    dataset: Optional[Dataset] = None,
) -> ExperimentReport:
    """
    Run the clean vs poisoned protocol over every fold and budget.

    Folds are independent work items; with ``workers > 1`` they run in a process pool and
    are merged in fold order, so the report does not depend on the worker count.
    """
    ds = dataset if dataset is not None else load_dataset(cfg.dataset, cfg.seed)
    plan = kfold(ds, cfg.folds, cfg.seed)
    jobs = [(cfg, ds, plan, fold) for fold in range(cfg.folds)]
    logger.info(
        "Running %s/%s over %d folds and %d budgets",
        cfg.classifier.kind,
        cfg.cf_method,
        cfg.folds,
        len(cfg.budgets),
    )
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(job) for job in jobs]

    failures: Counter = Counter()
    for result in results:
        failures.update(result.failures)
    return ExperimentReport(
        config=cfg.to_dict(),
        records=collect_records(cfg, results),
        failures={key: int(value) for key, value in failures.items()},
        timing={f"fold_{r.fold}": r.elapsed for r in results},
        seed=cfg.seed,
        meta=dict(meta or {}),
    )


def run_ablation(
    cfg: ExperimentConfig, workers: int = 1, meta: Optional[dict] = None
) -> dict[str, ExperimentReport]:
    """The same experiment with boundary-weighted and with uniform source sampling"""
    reports = {}
    for sampling in ("boundary_weighted", "uniform"):
        variant = dataclasses.replace(cfg, poison=dataclasses.replace(cfg.poison, sampling=sampling))
        reports[sampling] = run_experiment(variant, workers, {**(meta or {}), "sampling": sampling})
    return reports
