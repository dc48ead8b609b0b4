"""Dataset ingestion, synthetic generation, scaling, balancing and fold planning."""

import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .models import DataValidationError, Dataset, DatasetSource, FoldPlan, Standardizer
from .utils import rng_for

logger = logging.getLogger(__name__)

# Purpose keys for rng_for
_KEY_SYNTHETIC = 1
_KEY_UNDERSAMPLE = 2
_KEY_FOLDS = 3

_CONSTANT_TOL = 1e-12


def _binary_code(column: pd.Series, name: str) -> tuple[np.ndarray, dict]:
    """Map a column with at most two distinct values onto {0, 1}"""
    if column.isna().any():
        raise DataValidationError(f"column '{name}' has missing values")
    values = sorted(column.unique().tolist())
    if len(values) > 2:
        raise DataValidationError(f"column '{name}' is not binary: {len(values)} distinct values")
    if set(values) <= {0, 1}:
        return column.to_numpy(dtype=int), {}
    mapping = {str(v): i for i, v in enumerate(values)}
    coded = column.map({v: i for i, v in enumerate(values)}).to_numpy(dtype=int)
    return coded, mapping


def load_csv(path: Path, target_column: str, sensitive_column: Optional[str] = None) -> Dataset:
    """
    Load a numeric CSV file into a Dataset.

    Every column other than the target and sensitive column becomes a feature and must be
    numeric. A target (or sensitive) column with values other than {0, 1} is remapped by
    sorted value order and the mapping is recorded in the provenance.
    """
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"file not found: {path}")

    df = pd.read_csv(path, encoding="utf-8")
    for column in (target_column, sensitive_column):
        if column is not None and column not in df.columns:
            raise DataValidationError(f"missing column '{column}' in {path}")

    feature_columns = [c for c in df.columns if c not in (target_column, sensitive_column)]
    for column in feature_columns:
        if not pd.api.types.is_numeric_dtype(df[column]):
            raise DataValidationError(f"non-numeric column '{column}' in {path}")
        if df[column].isna().any():
            raise DataValidationError(f"column '{column}' has missing values")

    labels, label_mapping = _binary_code(df[target_column], target_column)
    provenance = {"source": "csv", "path": str(path), "target": target_column}
    if label_mapping:
        provenance["label_mapping"] = label_mapping

    sensitive = None
    if sensitive_column is not None:
        sensitive, sensitive_mapping = _binary_code(df[sensitive_column], sensitive_column)
        provenance["sensitive"] = sensitive_column
        if sensitive_mapping:
            provenance["sensitive_mapping"] = sensitive_mapping

    logger.debug("Loaded %d rows x %d features from %s", len(df), len(feature_columns), path)
    return Dataset(
        features=df[feature_columns].to_numpy(dtype=float),
        labels=labels,
        sensitive=sensitive,
        feature_names=tuple(str(c) for c in feature_columns),
        provenance=provenance,
    )


def make_synthetic_gaussians(n: int, d: int, separation: float, seed: int) -> Dataset:
    """Two equal-size unit-variance Gaussian clusters at -/+ separation/2 along the first axis"""
    if n < 4 or n % 2:
        raise DataValidationError(f"n must be an even number >= 4, got {n}")
    if d < 1:
        raise DataValidationError(f"d must be >= 1, got {d}")
    if not separation > 0:
        raise DataValidationError(f"separation must be positive, got {separation}")

    rng = rng_for(seed, _KEY_SYNTHETIC)
    half = n // 2
    features = rng.standard_normal((n, d))
    features[:half, 0] -= separation / 2
    features[half:, 0] += separation / 2
    labels = np.repeat([0, 1], half)
    sensitive = rng.integers(0, 2, size=n)
    return Dataset(
        features,
        labels,
        sensitive,
        provenance={"source": "synthetic", "n": n, "d": d, "separation": separation, "seed": seed},
    )


def undersample_majority(ds: Dataset, seed: int) -> Dataset:
    """Randomly drop majority-class rows until both classes have equal counts"""
    counts = ds.class_counts()
    if min(counts) == 0:
        raise DataValidationError("undersampling needs both classes present")
    if counts[0] == counts[1]:
        return ds

    majority = 0 if counts[0] > counts[1] else 1
    majority_rows = np.flatnonzero(ds.labels == majority)
    minority_rows = np.flatnonzero(ds.labels != majority)
    rng = rng_for(seed, _KEY_UNDERSAMPLE)
    kept = rng.choice(majority_rows, size=len(minority_rows), replace=False)
    rows = np.sort(np.concatenate([minority_rows, kept]))
    logger.debug("Undersampled class %d from %d to %d rows", majority, counts[majority], len(kept))
    return ds.subset(rows)


def fit_standardizer(features: np.ndarray) -> Standardizer:
    """Population mean/scale per feature; constant features get scale 1"""
    features = np.asarray(features, dtype=float)
    if features.shape[0] == 0:
        raise DataValidationError("cannot fit a standardizer on an empty set")
    means = features.mean(axis=0)
    scales = features.std(axis=0)
    constant = scales <= _CONSTANT_TOL
    scales = np.where(constant, 1.0, scales)
    return Standardizer(means, scales, constant)


def standardize(ds: Dataset, fit_indices) -> tuple[Standardizer, Dataset]:
    """Fit a Standardizer on ``fit_indices`` only and transform every row"""
    idx = np.asarray(fit_indices, dtype=int)
    if idx.size == 0:
        raise DataValidationError("standardize needs a non-empty fit set")
    scaler = fit_standardizer(ds.features[idx])
    if scaler.constant.any():
        names = [ds.feature_names[j] for j in np.flatnonzero(scaler.constant)]
        logger.warning("Constant features left unscaled: %s", ", ".join(names))
    return scaler, ds.with_features(scaler.apply(ds.features))


def kfold(ds: Dataset, folds: int, seed: int) -> FoldPlan:
    """
    Stratified fold assignment.

    Rows of each class are shuffled and dealt round-robin; the dealing position carries over
    from class 0 to class 1 so total fold sizes also differ by at most one.
    """
    if folds < 2:
        raise DataValidationError(f"folds must be >= 2, got {folds}")
    if folds > ds.n:
        raise DataValidationError(f"folds ({folds}) exceeds number of rows ({ds.n})")

    rng = rng_for(seed, _KEY_FOLDS)
    assignments = np.empty(ds.n, dtype=int)
    position = 0
    for label in (0, 1):
        rows = rng.permutation(np.flatnonzero(ds.labels == label))
        assignments[rows] = (position + np.arange(len(rows))) % folds
        position = (position + len(rows)) % folds
    return FoldPlan(fold_count=folds, assignments=assignments, seed=seed)


def load_dataset(source: DatasetSource, seed: int) -> Dataset:
    """Build the dataset an experiment config points at (unscaled)"""
    if source.kind == "synthetic":
        ds = make_synthetic_gaussians(source.n, source.d, source.separation, seed)
    else:
        ds = load_csv(Path(source.path), source.target_column, source.sensitive_column)
    if source.balance:
        ds = undersample_majority(ds, seed)
    return ds
