"""Tests for the classifier implementations."""

import numpy as np
import pytest

from cfpoison.classifiers import (
    CLASSIFIERS,
    KnnModel,
    LinearSvmModel,
    MlpModel,
    RandomForestModel,
    fit,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
)
from cfpoison.data import make_synthetic_gaussians
from cfpoison.metrics import f1_score
from cfpoison.models import (
    ClassifierSpec,
    ConfigError,
    DataValidationError,
    Dataset,
    DimensionError,
    UnsupportedGradientError,
)


def leaf(label):
    """A single-leaf tree that always predicts ``label``."""
    return {"left": [-1], "right": [-1], "feature": [-2], "threshold": [-2.0], "label": [label]}


@pytest.fixture
def gaussians():
    return make_synthetic_gaussians(200, 2, 4.0, seed=3)


class TestRegistry:
    """Tests for the classifier registry."""

    def test_all_kinds_registered(self):
        """Every configurable kind has an implementation."""
        assert set(CLASSIFIERS) == {"knn", "linear_svm", "random_forest", "mlp"}

    def test_kind_attribute_matches_key(self):
        """Registry keys agree with the class kind."""
        for kind, cls in CLASSIFIERS.items():
            assert cls.kind == kind

    def test_unknown_kind(self):
        """Unknown kinds are a config error."""
        with pytest.raises(ConfigError):
            ClassifierSpec(kind="xgboost")

    def test_single_class_training_set(self):
        """Training needs both classes."""
        ds = Dataset(np.zeros((3, 1)), [1, 1, 1])
        with pytest.raises(DataValidationError):
            fit(ClassifierSpec("linear_svm"), ds)


class TestKnn:
    """Tests for the k-nearest-neighbor model."""

    @pytest.fixture
    def one_nn(self):
        return KnnModel(ClassifierSpec("knn"), 1, {"k": 1}, np.array([[0.0], [2.0]]), np.array([0, 1]))

    def test_predictions_around_midpoint(self, one_nn):
        """The 1-NN boundary lies halfway between the two rows."""
        assert one_nn.predict([0.9]) == 0
        assert one_nn.predict([1.1]) == 1

    def test_score_is_distance_difference(self, one_nn):
        """k=1 scores by d0 - d1."""
        assert one_nn.decision_score([0.5]) == pytest.approx(0.5 - 1.5)

    def test_tie_predicts_zero(self, one_nn):
        """Exactly on the boundary the score is 0 and the prediction 0."""
        assert one_nn.decision_score([1.0]) == 0.0
        assert one_nn.predict([1.0]) == 0

    def test_no_gradient(self, one_nn):
        """k-NN has no input gradient."""
        assert not one_nn.differentiable
        with pytest.raises(UnsupportedGradientError):
            one_nn.score_gradient([0.0])

    def test_majority_vote(self):
        """k>1 scores by the class-1 share minus one half."""
        model = KnnModel(
            ClassifierSpec("knn"), 1, {"k": 3}, np.array([[0.0], [0.1], [0.2], [5.0]]), np.array([1, 1, 0, 0])
        )
        assert model.decision_score([0.0]) == pytest.approx(2 / 3 - 0.5)

    def test_dimension_mismatch(self, one_nn):
        """Inputs of the wrong width are rejected."""
        with pytest.raises(DimensionError):
            one_nn.predict([0.0, 1.0])


class TestLinearSvm:
    """Tests for the linear SVM."""

    def test_separates_gaussians(self, gaussians):
        """F1 on well separated clusters is high."""
        model = fit(ClassifierSpec("linear_svm"), gaussians)
        assert f1_score(model.predict(gaussians.features), gaussians.labels) >= 0.95

    def test_score_gradient_is_w(self):
        """The score gradient is the weight vector everywhere."""
        model = LinearSvmModel(ClassifierSpec(), 2, {}, np.array([1.5, -2.0]), 0.3)
        assert np.allclose(model.score_gradient([[0.0, 0.0], [4.0, 1.0]]), [[1.5, -2.0], [1.5, -2.0]])

    def test_loss_gradient(self):
        """The loss gradient is (sigmoid(s) - y) * w."""
        model = LinearSvmModel(ClassifierSpec(), 2, {}, np.array([1.0, 2.0]), -1.0)
        x = np.array([0.5, 0.25])
        s = 0.5 + 0.5 - 1.0
        expected = (1 / (1 + np.exp(-s)) - 1) * np.array([1.0, 2.0])
        assert np.allclose(model.loss_gradient(x, 1), expected)

    def test_saturated_loss_gradient(self):
        """A confident correct prediction has a vanishing loss gradient."""
        model = LinearSvmModel(ClassifierSpec(), 1, {}, np.array([10.0]), 0.0)
        assert abs(model.loss_gradient([5.0], 1)[0]) < 1e-12

    def test_deterministic(self, gaussians):
        """Equal specs give bit-identical weights."""
        a = fit(ClassifierSpec("linear_svm", seed=4), gaussians)
        b = fit(ClassifierSpec("linear_svm", seed=4), gaussians)
        assert np.array_equal(a.w, b.w) and a.b == b.b

    def test_invalid_hyperparameters(self, gaussians):
        """Non-positive C is rejected."""
        with pytest.raises(DataValidationError):
            fit(ClassifierSpec("linear_svm", {"C": 0.0}), gaussians)


class TestRandomForest:
    """Tests for the random forest."""

    def test_vote_share_score(self):
        """Votes {1, 1, 0} give a score of 2/3 - 1/2."""
        model = RandomForestModel(ClassifierSpec("random_forest"), 1, {}, [leaf(1), leaf(1), leaf(0)])
        assert model.decision_score([0.0]) == pytest.approx(1 / 6)
        assert model.predict([0.0]) == 1

    def test_even_split_predicts_zero(self):
        """A tied vote predicts 0."""
        model = RandomForestModel(ClassifierSpec("random_forest"), 1, {}, [leaf(1), leaf(0)])
        assert model.predict([0.0]) == 0

    def test_predict_is_vote_majority(self, gaussians):
        """Predictions agree with the majority of per-tree votes."""
        model = fit(ClassifierSpec("random_forest", {"trees": 11}, seed=2), gaussians)
        votes = model.tree_votes(gaussians.features)
        assert votes.shape == (11, gaussians.n)
        assert np.array_equal(model.predict(gaussians.features), (votes.mean(axis=0) > 0.5).astype(int))

    def test_split_routing(self):
        """Rows at or below the threshold go left."""
        tree = {
            "left": [1, -1, -1],
            "right": [2, -1, -1],
            "feature": [0, -2, -2],
            "threshold": [0.5, -2.0, -2.0],
            "label": [0, 0, 1],
        }
        model = RandomForestModel(ClassifierSpec("random_forest"), 1, {}, [tree])
        assert model.predict([[0.5], [0.6]]).tolist() == [0, 1]

    def test_no_gradient(self):
        """Forests have no input gradient."""
        model = RandomForestModel(ClassifierSpec("random_forest"), 1, {}, [leaf(1)])
        with pytest.raises(UnsupportedGradientError):
            model.loss_gradient([0.0], 1)


class TestMlp:
    """Tests for the multi-layer perceptron."""

    @pytest.fixture
    def tiny(self):
        """One hidden unit: logit = 3 * relu(2x - 1) + 0.5."""
        return MlpModel(ClassifierSpec("mlp"), 1, {}, [[[2.0]], [[3.0]]], [[-1.0], [0.5]])

    def test_forward(self, tiny):
        """Hand-computed logits on both sides of the kink."""
        assert tiny.decision_score([1.0]) == pytest.approx(3.5)
        assert tiny.decision_score([0.0]) == pytest.approx(0.5)

    def test_gradient(self, tiny):
        """Gradient is 6 past the kink and 0 before it."""
        assert tiny.score_gradient([1.0])[0] == pytest.approx(6.0)
        assert tiny.score_gradient([0.0])[0] == 0.0

    def test_gradient_matches_finite_differences(self, gaussians):
        """Analytic input gradients agree with central differences."""
        model = fit(ClassifierSpec("mlp", {"hidden": [8, 8], "epochs": 20}, seed=1), gaussians)
        x = gaussians.features[:5]
        h = 1e-6
        numeric = np.stack(
            [
                (model.decision_score(x + h * e) - model.decision_score(x - h * e)) / (2 * h)
                for e in np.eye(2)
            ],
            axis=1,
        )
        assert np.allclose(model.score_gradient(x), numeric, rtol=1e-4, atol=1e-6)

    def test_fits_xor(self):
        """With enough epochs the network fits XOR exactly."""
        ds = Dataset([[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]], [0, 1, 1, 0])
        model = fit(ClassifierSpec("mlp", {"epochs": 2000, "learning_rate": 0.1}, seed=0), ds)
        assert model.predict(ds.features).tolist() == [0, 1, 1, 0]


class TestPersistence:
    """Tests for model serialization."""

    @pytest.mark.parametrize(
        "spec",
        [
            ClassifierSpec("knn"),
            ClassifierSpec("linear_svm", seed=1),
            ClassifierSpec("random_forest", {"trees": 5}, seed=1),
            ClassifierSpec("mlp", {"hidden": [4], "epochs": 5}, seed=1),
        ],
        ids=lambda s: s.kind,
    )
    def test_scores_survive_save_and_load(self, tmp_path, gaussians, spec):
        """A reloaded model scores bit-identically."""
        model = fit(spec, gaussians)
        path = tmp_path / "model.json"
        save_model(model, path)
        restored = load_model(path)
        assert restored.kind == model.kind
        assert np.array_equal(restored.decision_score(gaussians.features), model.decision_score(gaussians.features))

    def test_unknown_kind(self):
        """Documents of an unknown kind are rejected."""
        with pytest.raises(DataValidationError, match="unknown model kind"):
            model_from_dict({"kind": "tree", "schema_version": 1, "d": 1, "params": {}})

    def test_schema_version_checked(self):
        """Documents from another schema version are rejected."""
        doc = model_to_dict(LinearSvmModel(ClassifierSpec(), 1, {}, np.array([1.0]), 0.0))
        doc["schema_version"] = 99
        with pytest.raises(DataValidationError, match="schema"):
            model_from_dict(doc)
