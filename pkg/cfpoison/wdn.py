"""Sensor-network event detection with virtual sensors and alarm explanations."""

import dataclasses
import itertools
import logging
import math
from typing import Optional, Union

import numpy as np

from .config import wdn_settings
from .defense import calibrate_threshold
from .metrics import mann_whitney_u, significance_stars
from .models import (
    CostSpec,
    Counterfactual,
    DataValidationError,
    Dataset,
    ExperimentReport,
    GenerationError,
    MetricRecord,
    PoisonConfig,
    PoisonSet,
    SensorFault,
    SensorScenario,
    VirtualSensorEnsemble,
)
from .poison import craft_poison, empty_poison_set
from .recourse import cost_record
from .utils import derive_seed, rng_for

logger = logging.getLogger(__name__)

# Purpose keys for rng_for / derive_seed
_KEY_NETWORK = 60
_KEY_DEMAND = 61
_KEY_JITTER = 62
_KEY_FAULT_NOISE = 63
_KEY_CASE = 70

PERIOD = 96
HARMONICS = (1.0, 0.5, 0.25)
SPARSITY = CostSpec(p=1, sparsity_tol=1e-9)


def synth_scenario(
    m: int,
    T: int,
    faults: list[SensorFault],
    seed: int,
    noise: float = 0.05,
    jitter: float = 0.0,
    network_seed: int = 0,
) -> SensorScenario:
    """
    Correlated pressure-like readings of ``m`` sensors over ``T`` steps.

    Two latent demand signals (sums of harmonics with random phases) are mixed affinely
    into every sensor. The mixing is fixed by ``network_seed``; ``jitter`` perturbs it
    multiplicatively per scenario. Faults add Gaussian noise to one sensor in a window.
    """
    if m < 2 or T < 1:
        raise DataValidationError("a scenario needs at least 2 sensors and 1 step")
    network = rng_for(network_seed, _KEY_NETWORK)
    mixing = network.uniform(0.3, 1.0, size=(2, m))
    offsets = network.uniform(20.0, 60.0, size=m)
    if jitter > 0:
        perturb = rng_for(seed, _KEY_JITTER)
        mixing = mixing * (1.0 + jitter * perturb.standard_normal(mixing.shape))
        offsets = offsets * (1.0 + jitter * perturb.standard_normal(m))

    demand = rng_for(seed, _KEY_DEMAND)
    steps = np.arange(T)[:, None]
    latent = np.zeros((T, 2))
    for h, amplitude in enumerate(HARMONICS, start=1):
        phases = demand.uniform(0, 2 * math.pi, size=2)
        latent += amplitude * np.sin(2 * math.pi * h * steps / PERIOD + phases)
    readings = offsets + latent @ mixing
    if noise > 0:
        readings = readings + noise * demand.standard_normal((T, m))

    fault_noise = rng_for(seed, _KEY_FAULT_NOISE)
    for fault in faults:
        if not (0 <= fault.start < fault.end <= T):
            raise DataValidationError(f"fault window [{fault.start}, {fault.end}) outside [0, {T})")
        readings[fault.start : fault.end, fault.sensor] += fault.sigma * fault_noise.standard_normal(
            fault.end - fault.start
        )
    return SensorScenario(
        readings=readings,
        faults=tuple(faults),
        seed=seed,
        params={"m": m, "T": T, "noise": noise, "jitter": jitter, "network_seed": network_seed},
    )


def _readings(data: Union[SensorScenario, np.ndarray]) -> np.ndarray:
    return data.readings if isinstance(data, SensorScenario) else np.atleast_2d(np.asarray(data, float))


def fit_ensemble(clean: Union[SensorScenario, np.ndarray], p: int = 2) -> VirtualSensorEnsemble:
    """Ordinary least squares of every sensor on all other sensors plus an intercept"""
    X = _readings(clean)
    T, m = X.shape
    if T < m:
        raise DataValidationError(f"need at least {m} steps to fit {m} virtual sensors")
    coefficients = np.zeros((m, m))
    intercepts = np.zeros(m)
    for i in range(m):
        others = [j for j in range(m) if j != i]
        design = np.column_stack([X[:, others], np.ones(T)])
        solution, *_ = np.linalg.lstsq(design, X[:, i], rcond=None)
        coefficients[i, others] = solution[:-1]
        intercepts[i] = solution[-1]
    return VirtualSensorEnsemble(coefficients, intercepts, p=p)


def predict_readings(ens: VirtualSensorEnsemble, x) -> np.ndarray:
    X = np.asarray(x, dtype=float)
    return X @ ens.coefficients.T + ens.intercepts


def residuals(ens: VirtualSensorEnsemble, x) -> np.ndarray:
    return predict_readings(ens, x) - np.asarray(x, dtype=float)


def residual_norms(ens: VirtualSensorEnsemble, x) -> np.ndarray:
    return np.linalg.norm(np.atleast_2d(residuals(ens, x)), ord=ens.p, axis=1)


def calibrate_zeta(
    ens: VirtualSensorEnsemble, validation: Union[SensorScenario, np.ndarray], false_alarm_rate: float
) -> VirtualSensorEnsemble:
    """Ensemble with its threshold set to the clean residual-norm quantile"""
    zeta = calibrate_threshold(residual_norms(ens, _readings(validation)), false_alarm_rate)
    return dataclasses.replace(ens, zeta=max(zeta, np.nextafter(0.0, 1.0)))


def detect(ens: VirtualSensorEnsemble, x_t) -> int:
    """1 when the residual norm reaches the threshold"""
    return int(residual_norms(ens, x_t)[0] >= ens.zeta)


def detect_batch(ens: VirtualSensorEnsemble, X) -> np.ndarray:
    return (residual_norms(ens, X) >= ens.zeta).astype(int)


def explain_alarm(ens: VirtualSensorEnsemble, x_t, max_support: int) -> Counterfactual:
    """
    Sparsest sensor change that silences an alarm.

    Subsets are tried by increasing size; on each subset the residual is minimized by least
    squares over those coordinates. Among subsets of the smallest sufficient size the one
    with the smallest change wins (earliest subset on ties).
    """
    x = np.asarray(x_t, dtype=float).reshape(-1)
    m = ens.sensors
    if len(x) != m:
        raise DataValidationError(f"expected {m} readings, got {len(x)}")
    if not detect(ens, x):
        raise DataValidationError("reading does not raise an alarm")

    system = ens.coefficients - np.eye(m)
    r = residuals(ens, x)
    for size in range(1, min(max_support, m) + 1):
        best: Optional[tuple[float, np.ndarray]] = None
        for subset in itertools.combinations(range(m), size):
            cols = list(subset)
            step, *_ = np.linalg.lstsq(system[:, cols], -r, rcond=None)
            delta = np.zeros(m)
            delta[cols] = step
            if residual_norms(ens, x + delta)[0] < ens.zeta:
                size_l2 = float(np.linalg.norm(delta))
                if best is None or size_l2 < best[0]:
                    best = (size_l2, delta)
        if best is not None:
            return Counterfactual(
                x_orig=x,
                delta=best[1],
                y_cf=0,
                valid=True,
                costs=cost_record(SPARSITY, best[1]),
                generator="alarm_subset",
                iterations=size,
            )
    raise GenerationError(f"no sensor subset of size <= {max_support} silences the alarm")


def _faulty_scenarios(count, settings, seed, key, jitter, network_seed) -> list[SensorScenario]:
    m, T = settings["sensors"], settings["steps"]
    length = settings["fault_length"]
    scenarios = []
    for index in range(count):
        scenario_seed = derive_seed(seed, key, index)
        rng = rng_for(scenario_seed, key)
        start = int(rng.integers(length, T - 2 * length))
        fault = SensorFault(int(rng.integers(m)), start, start + length, float(settings["fault_sigma"]))
        scenarios.append(
            synth_scenario(m, T, [fault], scenario_seed, settings["noise"], jitter, network_seed)
        )
    return scenarios


def true_positive_rows(ens: VirtualSensorEnsemble, scenario: SensorScenario) -> np.ndarray:
    """Steps inside a fault window where the detector raises an alarm"""
    return np.flatnonzero(scenario.fault_mask() & (detect_batch(ens, scenario.readings) == 1))


@dataclasses.dataclass
class CaseStudyResult:
    report: ExperimentReport
    scenarios: dict[str, list[SensorScenario]]
    poison: PoisonSet
    clean_sparsity: list[int]
    poisoned_sparsity: list[int]
    alarms: list[dict]


def _explain_all(ens, scenarios, max_support, label):
    sparsity, alarms, failures, localized, total = [], [], 0, 0, 0
    for s_index, scenario in enumerate(scenarios):
        for step in true_positive_rows(ens, scenario):
            try:
                cf = explain_alarm(ens, scenario.readings[step], max_support)
            except GenerationError:
                failures += 1
                continue
            support = [int(j) for j in np.flatnonzero(np.abs(cf.delta) > SPARSITY.sparsity_tol)]
            faulty = scenario.faulty_sensors_at(int(step))
            total += 1
            localized += int(bool(faulty & set(support)))
            sparsity.append(cf.costs.sparsity)
            alarms.append(
                {
                    "model": label,
                    "scenario": s_index,
                    "step": int(step),
                    "support": support,
                    "faulty": sorted(faulty),
                    "sparsity": cf.costs.sparsity,
                }
            )
    return sparsity, alarms, failures, (localized / total if total else math.nan)


def case_study(seed: int, settings: Optional[dict] = None) -> CaseStudyResult:
    """
    Poison a virtual-sensor detector through its own alarm explanations.

    Set 1 (fault free) fits the ensemble and calibrates the threshold; true-positive alarms
    of set 2 are the targets of the attack, whose rows join the training data; set 3
    (faulty, perturbed generator) compares explanation sparsity under the clean and the
    refit ensemble. The threshold stays at its clean calibration.
    """
    settings = wdn_settings(settings)
    m, T = settings["sensors"], settings["steps"]
    network_seed = derive_seed(seed, _KEY_CASE)
    train_count = settings["train_scenarios"]
    set1 = [
        synth_scenario(m, T, [], derive_seed(seed, _KEY_CASE, 1, i), settings["noise"], 0.0, network_seed)
        for i in range(train_count + 1)
    ]
    set2 = _faulty_scenarios(3, settings, seed, 2, 0.0, network_seed)
    set3 = _faulty_scenarios(3, settings, seed, 3, settings["jitter"], network_seed)

    train_rows = np.vstack([s.readings for s in set1[:train_count]])
    clean = calibrate_zeta(fit_ensemble(train_rows), set1[train_count], settings["false_alarm_rate"])
    logger.info("Clean detector: %d training rows, zeta=%.4f", len(train_rows), clean.zeta)

    target_rows = np.vstack([s.readings[true_positive_rows(clean, s)] for s in set2])
    count = int(math.floor(settings["budget"] * len(train_rows) + 0.5))
    if count == 0 or len(target_rows) == 0:
        poison = empty_poison_set(m)
    else:
        targets = Dataset(target_rows, np.ones(len(target_rows), dtype=int))
        cfg = PoisonConfig(
            n=count,
            k=1,
            b=max(1.0, settings["alpha"]),
            alpha_steps=1,
            sampling="uniform",
            seed=derive_seed(seed, _KEY_CASE, 4),
            fixed_alpha=settings["alpha"],
        )

        def explainer(model, x, y_cf, k, draw_seed):
            try:
                return [explain_alarm(model, x, settings["max_support"])]
            except GenerationError:
                return []

        poison = craft_poison(targets, clean, np.arange(len(target_rows)), 0, cfg, explainer)
        poison = poison.truncate(count)

    poisoned = dataclasses.replace(
        fit_ensemble(np.vstack([train_rows, poison.features]) if len(poison) else train_rows),
        zeta=clean.zeta,
    )

    clean_sparsity, clean_alarms, clean_failures, localization = _explain_all(
        clean, set3, settings["max_support"], "clean"
    )
    poisoned_sparsity, poisoned_alarms, poisoned_failures, _ = _explain_all(
        poisoned, set3, settings["max_support"], "poisoned"
    )

    p_value = math.nan
    if clean_sparsity and poisoned_sparsity:
        _, p_value = mann_whitney_u(clean_sparsity, poisoned_sparsity)
    budget = float(settings["budget"])

    def record(metric, values, p=math.nan):
        values = tuple(float(v) for v in values)
        median = float(np.median(values)) if values else math.nan
        return MetricRecord(-1, budget, metric, values, median, p, significance_stars(p))

    clean_rate = float(np.mean(detect_batch(clean, set1[train_count].readings)))
    report = ExperimentReport(
        config={"wdn": settings, "seed": seed},
        records=[
            record("sparsity_clean", clean_sparsity, p_value),
            record("sparsity_poisoned", poisoned_sparsity, p_value),
            record("localization_rate", [localization]),
            record("false_alarm_rate_clean", [clean_rate]),
        ],
        failures={"explain_clean": clean_failures, "explain_poisoned": poisoned_failures},
        seed=seed,
        meta={
            "poison_count": len(poison),
            "train_rows": int(len(train_rows)),
            "target_rows": int(len(target_rows)),
            "zeta": clean.zeta,
        },
    )
    return CaseStudyResult(
        report=report,
        scenarios={"train": set1, "poison_source": set2, "evaluation": set3},
        poison=poison,
        clean_sparsity=clean_sparsity,
        poisoned_sparsity=poisoned_sparsity,
        alarms=clean_alarms + poisoned_alarms,
    )


def run_case_study(seed: int, settings: Optional[dict] = None) -> ExperimentReport:
    return case_study(seed, settings).report
