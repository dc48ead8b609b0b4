"""Tests for dataset loading, scaling and fold planning."""

import numpy as np
import pandas as pd
import pytest

from cfpoison.data import (
    fit_standardizer,
    kfold,
    load_csv,
    load_dataset,
    make_synthetic_gaussians,
    standardize,
    undersample_majority,
)
from cfpoison.models import DataValidationError, Dataset, DatasetSource


@pytest.fixture
def csv_file(tmp_path):
    """A small numeric CSV with a string target."""
    path = tmp_path / "credit.csv"
    pd.DataFrame(
        {
            "income": [1.0, 2.0, 3.0, 4.0],
            "debt": [0.5, 0.1, 0.3, 0.9],
            "sex": [0, 1, 1, 0],
            "outcome": ["no", "yes", "yes", "no"],
        }
    ).to_csv(path, index=False)
    return path


class TestLoadCsv:
    """Tests for load_csv."""

    def test_features_and_labels(self, csv_file):
        """Feature columns keep their order; target and sensitive are split off."""
        ds = load_csv(csv_file, "outcome", "sex")
        assert ds.feature_names == ("income", "debt")
        assert ds.features.shape == (4, 2)
        assert ds.sensitive.tolist() == [0, 1, 1, 0]

    def test_string_target_is_remapped(self, csv_file):
        """Non-binary codes are mapped by sorted order and recorded."""
        ds = load_csv(csv_file, "outcome")
        assert ds.labels.tolist() == [0, 1, 1, 0]
        assert ds.provenance["label_mapping"] == {"no": 0, "yes": 1}

    def test_non_numeric_column(self, tmp_path):
        """A non-numeric feature column is rejected by name."""
        path = tmp_path / "bad.csv"
        pd.DataFrame({"a": [1, 2], "city": ["x", "y"], "y": [0, 1]}).to_csv(path, index=False)
        with pytest.raises(DataValidationError, match="city"):
            load_csv(path, "y")

    def test_missing_value(self, tmp_path):
        """Missing values are rejected."""
        path = tmp_path / "gap.csv"
        path.write_text("a,y\n1.0,0\n,1\n")
        with pytest.raises(DataValidationError, match="'a'"):
            load_csv(path, "y")

    def test_missing_target_column(self, csv_file):
        """Unknown target column name."""
        with pytest.raises(DataValidationError, match="label"):
            load_csv(csv_file, "label")

    def test_three_class_target(self, tmp_path):
        """A target with three distinct values is not binary."""
        path = tmp_path / "multi.csv"
        path.write_text("a,y\n1,0\n2,1\n3,2\n")
        with pytest.raises(DataValidationError, match="not binary"):
            load_csv(path, "y")


class TestDataset:
    """Tests for Dataset invariants."""

    def test_rejects_nan(self):
        """Features must be finite."""
        with pytest.raises(DataValidationError):
            Dataset(np.array([[1.0], [np.nan]]), np.array([0, 1]))

    def test_rejects_non_binary_labels(self):
        """Labels must be 0 or 1."""
        with pytest.raises(DataValidationError):
            Dataset(np.zeros((2, 1)), np.array([0, 2]))

    def test_frozen_arrays(self):
        """Stored arrays are read-only."""
        ds = Dataset(np.zeros((2, 1)), np.array([0, 1]))
        with pytest.raises(ValueError):
            ds.features[0, 0] = 1.0

    def test_append_keeps_order(self):
        """Appended rows go to the end."""
        ds = Dataset(np.zeros((2, 2)), np.array([0, 1]))
        merged = ds.append(np.ones((1, 2)), np.array([0]))
        assert merged.n == 3
        assert merged.features[-1].tolist() == [1.0, 1.0]


class TestSynthetic:
    """Tests for make_synthetic_gaussians."""

    def test_balanced_and_deterministic(self):
        """Same seed gives the same data; classes are balanced."""
        a = make_synthetic_gaussians(100, 3, 4.0, seed=5)
        b = make_synthetic_gaussians(100, 3, 4.0, seed=5)
        assert np.array_equal(a.features, b.features)
        assert a.class_counts() == (50, 50)

    def test_separated_along_first_axis(self):
        """Class means differ by about the separation on the first axis."""
        ds = make_synthetic_gaussians(2000, 2, 4.0, seed=1)
        gap = ds.features[ds.labels == 1, 0].mean() - ds.features[ds.labels == 0, 0].mean()
        assert 3.7 < gap < 4.3

    def test_odd_n(self):
        """Odd sizes cannot be split evenly."""
        with pytest.raises(DataValidationError):
            make_synthetic_gaussians(11, 2, 4.0, seed=0)


class TestUndersample:
    """Tests for undersample_majority."""

    def test_equalizes_counts(self):
        """90/10 becomes 10/10."""
        ds = Dataset(np.arange(100.0).reshape(-1, 1), np.r_[np.zeros(90, int), np.ones(10, int)])
        balanced = undersample_majority(ds, seed=0)
        assert balanced.class_counts() == (10, 10)

    def test_balanced_input_unchanged(self):
        """Already balanced data is returned as is."""
        ds = Dataset(np.zeros((4, 1)), np.array([0, 1, 0, 1]))
        assert undersample_majority(ds, seed=0) is ds

    def test_single_class(self):
        """A missing class cannot be balanced."""
        with pytest.raises(DataValidationError):
            undersample_majority(Dataset(np.zeros((3, 1)), np.zeros(3, int)), seed=0)


class TestStandardize:
    """Tests for fit_standardizer and standardize."""

    def test_fit_rows_have_zero_mean_unit_variance(self):
        """Fit rows are centred and scaled."""
        ds = make_synthetic_gaussians(200, 3, 4.0, seed=2)
        fit_rows = np.arange(0, 200, 2)
        _, scaled = standardize(ds, fit_rows)
        assert np.allclose(scaled.features[fit_rows].mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(scaled.features[fit_rows].std(axis=0), 1.0)

    def test_constant_feature_is_centred_only(self):
        """A constant column keeps scale 1."""
        scaler = fit_standardizer(np.array([[3.0, 1.0], [3.0, 2.0], [3.0, 3.0]]))
        assert scaler.constant.tolist() == [True, False]
        assert scaler.scales[0] == 1.0
        assert np.allclose(scaler.apply([[3.0, 2.0]]), [[0.0, 0.0]])

    def test_inverse(self):
        """inverse undoes apply."""
        X = np.array([[1.0, 5.0], [2.0, 7.0], [4.0, 6.0]])
        scaler = fit_standardizer(X)
        assert np.allclose(scaler.inverse(scaler.apply(X)), X)


class TestKfold:
    """Tests for kfold."""

    def test_stratified_sizes(self):
        """Fold sizes and per-class counts differ by at most one."""
        ds = Dataset(np.zeros((23, 1)), np.r_[np.zeros(13, int), np.ones(10, int)])
        plan = kfold(ds, 5, seed=3)
        sizes = plan.fold_sizes()
        assert sum(sizes) == 23
        assert max(sizes) - min(sizes) <= 1
        for label in (0, 1):
            per_fold = [int(np.sum(ds.labels[plan.test_indices(f)] == label)) for f in range(5)]
            assert max(per_fold) - min(per_fold) <= 1

    def test_partition(self):
        """Test folds partition the rows; train is the complement."""
        ds = make_synthetic_gaussians(40, 2, 4.0, seed=0)
        plan = kfold(ds, 4, seed=0)
        tests = np.concatenate([plan.test_indices(f) for f in range(4)])
        assert sorted(tests.tolist()) == list(range(40))
        assert set(plan.train_indices(0)).isdisjoint(plan.test_indices(0))

    def test_too_many_folds(self):
        """More folds than rows."""
        with pytest.raises(DataValidationError):
            kfold(Dataset(np.zeros((3, 1)), np.array([0, 1, 0])), 5, seed=0)


class TestLoadDataset:
    """Tests for load_dataset."""

    def test_synthetic_source(self):
        """Synthetic sources use n, d and separation."""
        ds = load_dataset(DatasetSource(n=60, d=4), seed=0)
        assert ds.features.shape == (60, 4)

    def test_csv_source(self, csv_file):
        """CSV sources are balanced by default."""
        source = DatasetSource(kind="csv", path=str(csv_file), target_column="outcome")
        assert load_dataset(source, seed=0).class_counts() == (2, 2)
