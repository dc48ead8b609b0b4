"""End-to-end acceptance runs (select with ``pytest -m slow``)."""

import dataclasses
import math
import os

import numpy as np
import pytest
from scipy.stats import binomtest

from cfpoison.classifiers import LinearSvmModel, fit
from cfpoison.data import make_synthetic_gaussians
from cfpoison.evaluation import run_ablation, run_experiment
from cfpoison.metrics import mann_whitney_u
from cfpoison.models import (
    ClassifierSpec,
    Dataset,
    DatasetSource,
    ExperimentConfig,
    GenerationError,
    PoisonConfig,
    TargetSpec,
)
from cfpoison.poison import (
    closest_boundary_point_1nn,
    generate_poison,
    poisoned_training_set,
    svm_margin_poison,
)
from cfpoison.report import canonical_json
from cfpoison.utils import rng_for
from cfpoison.wdn import run_case_study

pytestmark = pytest.mark.slow

SEEDS = range(5)
WORKERS = os.cpu_count() or 1


def gaussian_experiment(seed=0, **changes):
    cfg = ExperimentConfig(
        dataset=DatasetSource(n=500, d=5, separation=4.0),
        classifier=ClassifierSpec("linear_svm"),
        cf_method="gradcf",
        budgets=(0.05,),
        folds=5,
        seed=seed,
    )
    return dataclasses.replace(cfg, **changes)


def pooled(report, metric, budget=0.05):
    (record,) = report.find(metric, budget=budget)
    return record


@pytest.fixture(scope="module")
def gaussian_reports():
    """The linear SVM gradient-counterfactual experiment at a 5% budget, one report per seed."""
    return [run_experiment(gaussian_experiment(seed), WORKERS) for seed in SEEDS]


class TestOneNearestNeighbor:
    """Poisoning at the target's own counterfactual always raises its exact 1-NN cost."""

    def test_cost_strictly_increases(self):
        """The default attack explainer with a single unit alpha, checked against the exact boundary."""
        spec = ClassifierSpec("knn", {"k": 1})
        valid = increased = 0
        for seed in range(100):
            rng = rng_for(seed, 900)
            n, d = int(rng.integers(4, 13)), int(rng.integers(1, 3))
            labels = np.resize([0, 1], n)
            train = Dataset(rng.uniform(0.0, 1.0, (n, d)), rng.permutation(labels))
            target = int(rng.integers(n))
            x = train.features[target]
            model = fit(spec, train)
            t = TargetSpec("local", int(model.predict(x)), local_index=target)
            cfg = PoisonConfig(n=1, k=1, b=1 + 1e-3, alpha_steps=1, sampling="uniform", seed=seed)
            try:
                poison = generate_poison(train, model, t, cfg)
            except GenerationError:
                continue
            valid += 1
            before = np.linalg.norm(closest_boundary_point_1nn(train, x) - x)
            after = np.linalg.norm(closest_boundary_point_1nn(poisoned_training_set(train, poison), x) - x)
            increased += after > before + 1e-6
        assert valid >= 95
        assert increased == valid


class TestSvmMarginBand:
    """Margin-band poison shifts a retrained SVM against the negative class."""

    def test_negative_scores_decrease(self):
        spec = ClassifierSpec("linear_svm")
        decreases = runs = 0
        for seed in range(50):
            train = make_synthetic_gaussians(60, 2, 8.0, seed)
            model = fit(spec, train)
            closest = float(np.min((2 * train.labels - 1) * model.decision_score(train.features)))
            if closest <= 0:
                continue
            # same hyperplane, scaled so the closest training rows score just past +-1
            scale = closest * (1 - 1e-9)
            canonical = LinearSvmModel(spec, 2, model.hyperparameters, model.w / scale, model.b / scale)
            poison = svm_margin_poison(canonical, train, xi=0.5, count=10, seed=seed)
            retrained = fit(spec, poisoned_training_set(train, poison))
            test = make_synthetic_gaussians(200, 2, 8.0, seed + 1000)
            negatives = test.features[test.labels == 0]
            runs += 1
            decreases += retrained.decision_score(negatives).mean() < model.decision_score(negatives).mean()
        assert runs >= 40
        assert binomtest(decreases, runs, 0.5, alternative="greater").pvalue <= 0.05


class TestGaussianExperiment:
    """Counterfactual poison against label flipping on the Gaussian benchmark."""

    def test_cost_increase(self, gaussian_reports):
        record = pooled(gaussian_reports[0], "cost_diff_pct")
        assert 0.02 <= record.median <= 0.5
        assert record.p_value <= 0.05

    def test_plausibility_unchanged(self, gaussian_reports):
        """Counterfactual log-likelihood does not shift significantly in most seeds."""
        neutral = sum(pooled(r, "kde_loglik_diff").p_value > 0.05 for r in gaussian_reports)
        assert neutral >= 4

    def test_label_flip_has_no_effect(self):
        neutral = 0
        for seed in SEEDS:
            report = run_experiment(gaussian_experiment(seed, poison_mode="label_flip"), WORKERS)
            record = pooled(report, "cost_diff_pct")
            neutral += math.isnan(record.p_value) or record.p_value > 0.05 or record.median <= 0
        assert neutral >= 4

    def test_budget_sweep_saturates(self):
        """Medians rise with the budget up to one inversion of at most two points."""
        budgets = (0.05, 0.1, 0.2, 0.4)
        report = run_experiment(gaussian_experiment(0, budgets=budgets), WORKERS)
        medians = [pooled(report, "cost_diff_pct", b).median for b in budgets]
        drops = [a - b for a, b in zip(medians, medians[1:]) if b < a]
        assert len(drops) <= 1
        assert all(drop <= 0.02 for drop in drops)


class TestDetection:
    """Sanitization defenses against counterfactual poison."""

    METHODS = ("iforest", "knn_defense", "l2_defense", "slab_defense")

    def test_low_recall(self):
        recalls = {method: [] for method in self.METHODS}
        for seed in SEEDS:
            report = run_experiment(gaussian_experiment(seed, defenses=self.METHODS), WORKERS)
            for method in self.METHODS:
                recalls[method].append(pooled(report, f"recall_{method}").median)
        for method, values in recalls.items():
            assert np.median(values) <= 0.5, method

    def test_uniform_sampling_is_easier_to_detect(self):
        boundary, uniform = [], []
        for seed in SEEDS:
            reports = run_ablation(gaussian_experiment(seed, defenses=("iforest",)), WORKERS)
            boundary.append(pooled(reports["boundary_weighted"], "recall_iforest").median)
            uniform.append(pooled(reports["uniform"], "recall_iforest").median)
        assert np.median(uniform) >= np.median(boundary)


class TestSensorCaseStudy:
    """Poisoning the virtual-sensor detector makes alarm explanations less sparse."""

    def test_sparsity_rises(self):
        report = run_case_study(0)
        assert report.meta["train_rows"] == 1000
        assert 40 <= report.meta["poison_count"] <= 50
        clean, poisoned = pooled(report, "sparsity_clean"), pooled(report, "sparsity_poisoned")
        assert poisoned.median > clean.median
        assert mann_whitney_u(clean.values, poisoned.values)[1] <= 0.05
        assert pooled(report, "localization_rate").median >= 0.8


class TestDeterminism:
    """Reports do not depend on the worker count."""

    def test_serial_equals_parallel(self):
        cfg = gaussian_experiment(0, budgets=(0.05, 0.1))
        serial = canonical_json(run_experiment(cfg, 1).to_dict())
        assert canonical_json(run_experiment(cfg, 1).to_dict()) == serial
        assert canonical_json(run_experiment(cfg, 4).to_dict()) == serial
