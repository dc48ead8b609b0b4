"""Data models for cfpoison."""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

import numpy as np

from .utils import from_json_float, to_jsonable

SCHEMA_VERSION = 1


class CfPoisonError(Exception):
    """Base class of all library errors"""

    kind = "runtime"


class ConfigError(CfPoisonError):
    """Configuration does not validate"""

    kind = "validation"


class DataValidationError(CfPoisonError):
    """Input data violates a dataset invariant"""

    kind = "validation"


class PreconditionError(DataValidationError):
    """Input violates the precondition of a poisoning construction"""


class DimensionError(CfPoisonError, ValueError):
    """Input dimension does not match the fitted dimension"""

    kind = "validation"


class UnsupportedGradientError(CfPoisonError):
    """Model has no input gradient; callers must fall back to gradient-free search"""


class GenerationError(CfPoisonError):
    """No counterfactual could be generated"""


class EmptyTargetError(CfPoisonError):
    """Poisoning target set is empty"""


class DetectionError(CfPoisonError):
    """Outlier scoring cannot run on the given input"""


class RetrainError(CfPoisonError):
    """Retraining on a poisoned training set failed"""


class ExperimentError(CfPoisonError):
    """Experiment failure with fold/budget context"""

    def __init__(self, message: str, fold: Optional[int] = None, budget: Optional[float] = None):
        context = []
        if fold is not None:
            context.append(f"fold={fold}")
        if budget is not None:
            context.append(f"budget={budget}")
        prefix = f"[{' '.join(context)}] " if context else ""
        super().__init__(prefix + message)
        self.fold = fold
        self.budget = budget


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------- data


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix with binary labels and an optional binary sensitive attribute"""

    features: np.ndarray
    labels: np.ndarray
    sensitive: Optional[np.ndarray] = None
    feature_names: tuple[str, ...] = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        features = np.array(self.features, dtype=float, copy=True)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        if features.ndim != 2:
            raise DataValidationError(f"features must be a matrix, got shape {features.shape}")
        n, d = features.shape
        if not np.all(np.isfinite(features)):
            raise DataValidationError("features contain NaN or infinite entries")

        labels = np.asarray(self.labels)
        if labels.shape != (n,):
            raise DataValidationError(f"labels must have length {n}, got shape {labels.shape}")
        if not np.all(np.isin(labels, (0, 1))):
            raise DataValidationError("labels must be in {0, 1}")

        sensitive = None
        if self.sensitive is not None:
            sensitive = np.asarray(self.sensitive)
            if sensitive.shape != (n,):
                raise DataValidationError(f"sensitive must have length {n}")
            if not np.all(np.isin(sensitive, (0, 1))):
                raise DataValidationError("sensitive attribute must be in {0, 1}")
            sensitive = _frozen_array(sensitive, int)

        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(d))
        if len(names) != d:
            raise DataValidationError(f"expected {d} feature names, got {len(names)}")

        features.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", _frozen_array(labels, int))
        object.__setattr__(self, "sensitive", sensitive)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "provenance", dict(self.provenance))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> tuple[int, int]:
        return int(np.sum(self.labels == 0)), int(np.sum(self.labels == 1))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            sensitive=None if self.sensitive is None else self.sensitive[idx],
            feature_names=self.feature_names,
            provenance=self.provenance,
        )

    def with_features(self, features: np.ndarray) -> "Dataset":
        return Dataset(features, self.labels, self.sensitive, self.feature_names, self.provenance)

    def with_labels(self, labels: np.ndarray, **provenance) -> "Dataset":
        return Dataset(
            self.features,
            labels,
            self.sensitive,
            self.feature_names,
            {**self.provenance, **provenance},
        )

    def append(
        self, features: np.ndarray, labels: np.ndarray, sensitive: Optional[np.ndarray] = None
    ) -> "Dataset":
        """Return the union of this dataset and extra rows (appended at the end)"""
        extra = np.asarray(features, dtype=float).reshape(-1, self.d)
        extra_labels = np.asarray(labels, dtype=int).reshape(-1)
        merged_sensitive = None
        if self.sensitive is not None:
            if sensitive is None:
                sensitive = np.zeros(len(extra_labels), dtype=int)
            merged_sensitive = np.concatenate([self.sensitive, np.asarray(sensitive, dtype=int)])
        return Dataset(
            np.vstack([self.features, extra]),
            np.concatenate([self.labels, extra_labels]),
            merged_sensitive,
            self.feature_names,
            self.provenance,
        )


@dataclass(frozen=True, eq=False)
class Standardizer:
    """Per-feature affine scaling fitted on a subset of rows"""

    means: np.ndarray
    scales: np.ndarray
    constant: np.ndarray

    def __post_init__(self):
        scales = _frozen_array(self.scales, float)
        if np.any(scales <= 0):
            raise DataValidationError("scales must be positive")
        object.__setattr__(self, "means", _frozen_array(self.means, float))
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "constant", _frozen_array(self.constant, bool))

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=float) - self.means) / self.scales

    def inverse(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) * self.scales + self.means


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Assignment of every row to one of ``fold_count`` folds"""

    fold_count: int
    assignments: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "assignments", _frozen_array(self.assignments, int))

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)

    def fold_sizes(self) -> list[int]:
        return [int(np.sum(self.assignments == f)) for f in range(self.fold_count)]


# --------------------------------------------------------------------------- classifiers


CLASSIFIER_KINDS = ("knn", "linear_svm", "random_forest", "mlp")


@dataclass(frozen=True)
class ClassifierSpec:
    """Classifier kind, frozen hyperparameters and seed"""

    kind: str = "linear_svm"
    hyperparameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CLASSIFIER_KINDS:
            raise ConfigError(f"classifier.kind must be one of {', '.join(CLASSIFIER_KINDS)}")
        object.__setattr__(self, "hyperparameters", dict(self.hyperparameters))


# --------------------------------------------------------------------------- recourse


@dataclass(frozen=True)
class CostSpec:
    """Weighted p-norm recourse cost plus the sparsity tolerance"""

    p: int = 2
    weights: Optional[tuple[float, ...]] = None
    sparsity_tol: float = 1e-6

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ConfigError(f"cost.p must be 1 or 2, got {self.p}")
        if self.weights is not None:
            weights = tuple(float(w) for w in self.weights)
            if any(w <= 0 for w in weights):
                raise ConfigError("cost.weights must be positive")
            object.__setattr__(self, "weights", weights)
        if not self.sparsity_tol > 0:
            raise ConfigError("cost.sparsity_tol must be positive")


@dataclass(frozen=True)
class RecourseSettings:
    """Constants of the counterfactual search procedures"""

    c_init: float = 1.0
    step: float = 0.05
    round_steps: int = 200
    max_rounds: int = 10
    check_every: int = 50
    budget: int = 2000
    bisect_steps: int = 50
    div_weight: float = 0.1
    jitter: float = 0.1
    proto_weight: float = 0.5
    proto_neighbors: int = 5
    initial_radius: float = 0.1
    shell_growth: float = 1.3
    shell_samples: int = 200
    max_shells: int = 60


@dataclass(frozen=True)
class CfCosts:
    l1: float
    l2: float
    sparsity: int


@dataclass(eq=False)
class Counterfactual:
    """A counterfactual change ``delta`` of ``x_orig`` towards class ``y_cf``"""

    x_orig: np.ndarray
    delta: np.ndarray
    y_cf: int
    valid: bool
    costs: CfCosts
    generator: str
    iterations: int = 0
    seed: int = 0
    elapsed: float = 0.0

    @property
    def x_cf(self) -> np.ndarray:
        return self.x_orig + self.delta

    def to_dict(self) -> dict:
        return {
            "x_orig": to_jsonable(self.x_orig, None),
            "delta": to_jsonable(self.delta, None),
            "y_cf": int(self.y_cf),
            "valid": bool(self.valid),
            "costs": to_jsonable(asdict(self.costs), None),
            "generator": self.generator,
            "iterations": int(self.iterations),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Counterfactual":
        costs = doc["costs"]
        return cls(
            x_orig=np.array([from_json_float(v) for v in doc["x_orig"]]),
            delta=np.array([from_json_float(v) for v in doc["delta"]]),
            y_cf=int(doc["y_cf"]),
            valid=bool(doc["valid"]),
            costs=CfCosts(
                from_json_float(costs["l1"]), from_json_float(costs["l2"]), int(costs["sparsity"])
            ),
            generator=doc["generator"],
            iterations=int(doc.get("iterations", 0)),
            seed=int(doc.get("seed", 0)),
        )


# --------------------------------------------------------------------------- poisoning


@dataclass(frozen=True)
class TargetSpec:
    """Which region of the data space a poisoning targets"""

    level: str = "global"
    y: int = 0
    subgroup_value: Optional[int] = None
    local_index: Optional[int] = None

    def __post_init__(self):
        if self.level not in ("global", "subgroup", "local"):
            raise ConfigError(f"target.level must be global, subgroup or local, got {self.level}")
        if self.y not in (0, 1):
            raise ConfigError("target.y must be 0 or 1")
        if (self.subgroup_value is not None) != (self.level == "subgroup"):
            raise ConfigError("target.subgroup_value is required exactly for level=subgroup")
        if self.subgroup_value is not None and self.subgroup_value not in (0, 1):
            raise ConfigError("target.subgroup_value must be 0 or 1")
        if self.level == "local" and self.local_index is not None and self.local_index < 0:
            raise ConfigError("target.local_index must be non-negative")
        if self.level != "local" and self.local_index is not None:
            raise ConfigError("target.local_index is only allowed for level=local")


@dataclass(frozen=True)
class PoisonConfig:
    """Hyperparameters of the recourse poisoning algorithm"""

    n: int = 1
    k: int = 3
    b: float = 1.5
    alpha_steps: int = 2
    sampling: str = "boundary_weighted"
    seed: int = 0
    fixed_alpha: Optional[float] = None

    def __post_init__(self):
        if self.n < 1 or self.k < 1 or self.alpha_steps < 1:
            raise ConfigError("poison.n, poison.k and poison.alpha_steps must be >= 1")
        if self.b < 1:
            raise ConfigError("poison.b must be >= 1")
        if self.sampling not in ("boundary_weighted", "uniform"):
            raise ConfigError(f"poison.sampling must be boundary_weighted or uniform, got {self.sampling}")
        if self.fixed_alpha is not None and self.fixed_alpha <= 0:
            raise ConfigError("poison.fixed_alpha must be positive")

    def alphas(self) -> np.ndarray:
        """Scaling factors applied to each counterfactual direction"""
        if self.fixed_alpha is not None:
            return np.array([float(self.fixed_alpha)])
        return np.linspace(1.0, float(self.b), self.alpha_steps)


@dataclass(frozen=True)
class PoisonProvenance:
    source_row: int
    cf_index: int
    alpha: float


@dataclass(eq=False)
class PoisonSet:
    """Crafted instances together with where each one came from"""

    features: np.ndarray
    labels: np.ndarray
    provenance: list[PoisonProvenance]
    config: dict = field(default_factory=dict)
    failures: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim == 1:
            self.features = self.features.reshape(0, 0) if self.features.size == 0 else self.features.reshape(1, -1)
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if len(self.provenance) != len(self.labels):
            raise DataValidationError("every poison instance needs provenance")

    def __len__(self) -> int:
        return len(self.labels)

    def truncate(self, count: int) -> "PoisonSet":
        return PoisonSet(
            self.features[:count], self.labels[:count], self.provenance[:count], self.config, self.failures
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "instances": [
                {"z": to_jsonable(z, None), "y": int(y)} for z, y in zip(self.features, self.labels)
            ],
            "provenance": [to_jsonable(asdict(p), None) for p in self.provenance],
            "config": to_jsonable(self.config, None),
            "failures": int(self.failures),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PoisonSet":
        instances = doc.get("instances", [])
        features = np.array([[from_json_float(v) for v in inst["z"]] for inst in instances], dtype=float)
        return cls(
            features=features,
            labels=np.array([int(inst["y"]) for inst in instances], dtype=int),
            provenance=[
                PoisonProvenance(int(p["source_row"]), int(p["cf_index"]), float(p["alpha"]))
                for p in doc.get("provenance", [])
            ],
            config=doc.get("config", {}),
            failures=int(doc.get("failures", 0)),
        )


@dataclass(eq=False)
class PoisonVerdict:
    """Per-target recourse costs before and after retraining on a poisoned set"""

    targets: np.ndarray
    clean_costs: np.ndarray
    poisoned_costs: np.ndarray

    @property
    def deltas(self) -> np.ndarray:
        return self.poisoned_costs - self.clean_costs

    @property
    def mean_delta(self) -> float:
        finite = self.deltas[np.isfinite(self.deltas)]
        return float(np.mean(finite)) if finite.size else math.nan

    @property
    def median_delta(self) -> float:
        finite = self.deltas[np.isfinite(self.deltas)]
        return float(np.median(finite)) if finite.size else math.nan


# --------------------------------------------------------------------------- defenses

DEFENSE_METHODS = ("iforest", "lof", "knn_defense", "l2_defense", "slab_defense")


@dataclass(frozen=True)
class DefenseSpec:
    """Sanitization method and its settings"""

    method: str = "iforest"
    k: int = 5
    calibration_fpr: float = 0.05
    trees: int = 100
    subsample: int = 256
    lof_k: int = 20
    same_class: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in DEFENSE_METHODS:
            raise ConfigError(f"defense.method must be one of {', '.join(DEFENSE_METHODS)}")
        if not 0 < self.calibration_fpr < 1:
            raise ConfigError("defense.calibration_fpr must be in (0, 1)")
        if min(self.k, self.trees, self.subsample, self.lof_k) < 1:
            raise ConfigError("defense counts must be >= 1")


@dataclass(eq=False)
class DetectionReport:
    """Flags of a defense together with their scores and threshold"""

    method: str
    flags: np.ndarray
    scores: np.ndarray
    threshold: float
    recall: float
    precision: float
    precision_defined: bool
    poison_indices: np.ndarray

    def to_dict(self) -> dict:
        return to_jsonable(
            {
                "schema_version": SCHEMA_VERSION,
                "method": self.method,
                "flags": self.flags.astype(bool),
                "scores": self.scores,
                "threshold": self.threshold,
                "recall": self.recall,
                "precision": self.precision,
                "precision_defined": self.precision_defined,
                "poison_indices": self.poison_indices.astype(int),
            }
        )


# --------------------------------------------------------------------------- experiments

CF_METHODS = ("nun", "gradcf", "diverse", "proto")
POISON_MODES = ("counterfactual", "label_flip")


@dataclass(frozen=True)
class DatasetSource:
    """Where an experiment's data comes from"""

    kind: str = "synthetic"
    n: int = 500
    d: int = 5
    separation: float = 4.0
    path: Optional[str] = None
    target_column: Optional[str] = None
    sensitive_column: Optional[str] = None
    balance: bool = True

    def __post_init__(self):
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.kind must be synthetic or csv, got {self.kind}")
        if self.kind == "csv" and (not self.path or not self.target_column):
            raise ConfigError("dataset.path and dataset.target_column are required for csv")


@dataclass(frozen=True)
class ExperimentConfig:
    """Full definition of an evaluation run"""

    dataset: DatasetSource = field(default_factory=DatasetSource)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    cf_method: str = "gradcf"
    cost: CostSpec = field(default_factory=CostSpec)
    target: TargetSpec = field(default_factory=TargetSpec)
    poison: PoisonConfig = field(default_factory=PoisonConfig)
    poison_mode: str = "counterfactual"
    budgets: tuple[float, ...] = (0.05,)
    folds: int = 5
    seed: int = 0
    defenses: tuple[str, ...] = ()
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    recourse: RecourseSettings = field(default_factory=RecourseSettings)

    def __post_init__(self):
        if self.cf_method not in CF_METHODS:
            raise ConfigError(f"cf_method must be one of {', '.join(CF_METHODS)}")
        if self.poison_mode not in POISON_MODES:
            raise ConfigError(f"poison_mode must be one of {', '.join(POISON_MODES)}")
        budgets = tuple(float(b) for b in self.budgets)
        if not budgets or any(not 0 <= b <= 1 for b in budgets):
            raise ConfigError("budgets must be a non-empty list of fractions in [0, 1]")
        object.__setattr__(self, "budgets", budgets)
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        for method in self.defenses:
            if method not in DEFENSE_METHODS:
                raise ConfigError(f"unknown defense '{method}'")
        object.__setattr__(self, "defenses", tuple(self.defenses))

    def to_dict(self) -> dict:
        return to_jsonable(asdict(self), None)


STAR_CUTPOINTS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))


@dataclass(frozen=True, eq=False)
class MetricRecord:
    """One metric on one fold (``fold == -1`` pools all folds) at one budget"""

    fold: int
    budget: float
    metric: str
    values: tuple[float, ...]
    median: float
    p_value: float
    stars: str

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "budget": self.budget,
            "metric": self.metric,
            "values": list(self.values),
            "median": self.median,
            "p_value": self.p_value,
            "stars": self.stars,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricRecord":
        return cls(
            fold=int(doc["fold"]),
            budget=float(doc["budget"]),
            metric=doc["metric"],
            values=tuple(from_json_float(v) for v in doc["values"]),
            median=from_json_float(doc["median"]),
            p_value=from_json_float(doc["p_value"]),
            stars=doc["stars"],
        )


@dataclass(eq=False)
class ExperimentReport:
    """Serializable outcome of an experiment run"""

    config: dict
    records: list[MetricRecord]
    failures: dict[str, int] = field(default_factory=dict)
    timing: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    meta: dict[str, Any] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        """Canonical content; timing is deliberately not part of it"""
        return to_jsonable(
            {
                "schema_version": self.schema_version,
                "seed": self.seed,
                "config": self.config,
                "meta": self.meta,
                "failures": dict(sorted(self.failures.items())),
                "records": [r.to_dict() for r in self.records],
            }
        )

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentReport":
        return cls(
            config=doc.get("config", {}),
            records=[MetricRecord.from_dict(r) for r in doc.get("records", [])],
            failures={k: int(v) for k, v in doc.get("failures", {}).items()},
            seed=int(doc.get("seed", 0)),
            meta=doc.get("meta", {}),
            schema_version=int(doc.get("schema_version", SCHEMA_VERSION)),
        )

    def find(self, metric: str, budget: Optional[float] = None, fold: int = -1) -> list[MetricRecord]:
        return [
            r
            for r in self.records
            if r.metric == metric and r.fold == fold and (budget is None or r.budget == budget)
        ]


# --------------------------------------------------------------------------- sensor networks


@dataclass(frozen=True)
class SensorFault:
    """Gaussian noise added to one sensor over the window [start, end)"""

    sensor: int
    start: int
    end: int
    sigma: float


@dataclass(frozen=True, eq=False)
class SensorScenario:
    """Correlated multi-sensor readings with their injected faults"""

    readings: np.ndarray
    faults: tuple[SensorFault, ...]
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        readings = _frozen_array(self.readings, float)
        steps = readings.shape[0]
        for fault in self.faults:
            if not (0 <= fault.start < fault.end <= steps):
                raise DataValidationError(f"fault window [{fault.start}, {fault.end}) outside [0, {steps})")
            if not fault.sigma > 0:
                raise DataValidationError("fault sigma must be positive")
            if not 0 <= fault.sensor < readings.shape[1]:
                raise DataValidationError(f"fault sensor {fault.sensor} out of range")
        object.__setattr__(self, "readings", readings)
        object.__setattr__(self, "faults", tuple(self.faults))

    @property
    def steps(self) -> int:
        return self.readings.shape[0]

    @property
    def sensors(self) -> int:
        return self.readings.shape[1]

    def fault_mask(self) -> np.ndarray:
        """Per-step flag: True inside any fault window"""
        mask = np.zeros(self.steps, dtype=bool)
        for fault in self.faults:
            mask[fault.start : fault.end] = True
        return mask

    def faulty_sensors_at(self, step: int) -> set[int]:
        return {f.sensor for f in self.faults if f.start <= step < f.end}


@dataclass(frozen=True, eq=False)
class VirtualSensorEnsemble:
    """One linear regression per sensor predicting it from all other sensors"""

    coefficients: np.ndarray
    intercepts: np.ndarray
    p: int = 2
    zeta: float = math.inf

    def __post_init__(self):
        coefficients = _frozen_array(self.coefficients, float)
        if not np.all(np.isfinite(coefficients)):
            raise DataValidationError("virtual sensor coefficients must be finite")
        if not self.zeta > 0:
            raise DataValidationError("zeta must be positive")
        object.__setattr__(self, "coefficients", coefficients)
        object.__setattr__(self, "intercepts", _frozen_array(self.intercepts, float))

    @property
    def sensors(self) -> int:
        return self.coefficients.shape[0]


# --------------------------------------------------------------------------- command line


@dataclass(frozen=True)
class CliInvocation:
    """A fully parsed command-line request"""

    subcommand: str
    config_path: Optional[str] = None
    out_dir: str = "."
    overrides: dict = field(default_factory=dict)


@dataclass
class CommandResult:
    """Result of a subcommand execution"""

    success: bool
    message: str = ""
    exit_code: int = 0
    outputs: list[str] = field(default_factory=list)
