"""Classifier implementations behind one TrainedModel contract."""

import json
import logging
import math
import warnings
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Union

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit
from sklearn.exceptions import ConvergenceWarning
from sklearn.neural_network import MLPClassifier
from sklearn.tree import DecisionTreeClassifier

from .config import classifier_hyperparameters
from .models import (
    SCHEMA_VERSION,
    ClassifierSpec,
    DataValidationError,
    Dataset,
    DimensionError,
    UnsupportedGradientError,
)
from .utils import derive_seed, rng_for, to_jsonable

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, list, float]


class TrainedModel(ABC):
    """Abstract base class for fitted binary classifiers.

    ``decision_score`` is a signed real with the decision boundary at 0 and
    ``predict(x) == 1`` exactly when ``decision_score(x) > 0``. All methods accept a single
    d-vector or an (n, d) batch.
    """

    kind: str
    differentiable: bool = False

    def __init__(self, spec: ClassifierSpec, d: int, hyperparameters: dict):
        self.spec = spec
        self.d = d
        self.hyperparameters = dict(hyperparameters)

    @classmethod
    @abstractmethod
    def train(cls, spec: ClassifierSpec, hp: dict, X: np.ndarray, y: np.ndarray) -> "TrainedModel":
        pass

    @abstractmethod
    def _scores(self, X: np.ndarray) -> np.ndarray:
        """Decision scores of an (n, d) batch"""
        pass

    @abstractmethod
    def params(self) -> dict:
        """Learned parameters as plain arrays"""
        pass

    @classmethod
    @abstractmethod
    def from_params(cls, spec: ClassifierSpec, d: int, hp: dict, params: dict) -> "TrainedModel":
        pass

    def _score_gradient(self, X: np.ndarray) -> np.ndarray:
        raise UnsupportedGradientError(f"{self.kind} has no input gradient")

    def _batch(self, x: ArrayLike) -> tuple[np.ndarray, bool]:
        arr = np.asarray(x, dtype=float)
        single = arr.ndim <= 1
        X = arr.reshape(1, -1) if single else arr
        if X.ndim != 2 or X.shape[1] != self.d:
            raise DimensionError(f"expected {self.d} features, got shape {arr.shape}")
        return X, single

    def decision_score(self, x: ArrayLike):
        X, single = self._batch(x)
        scores = self._scores(X)
        return float(scores[0]) if single else scores

    def predict(self, x: ArrayLike):
        X, single = self._batch(x)
        labels = (self._scores(X) > 0).astype(int)
        return int(labels[0]) if single else labels

    def score_gradient(self, x: ArrayLike) -> np.ndarray:
        """Gradient of the decision score with respect to the input"""
        X, single = self._batch(x)
        grads = self._score_gradient(X)
        return grads[0] if single else grads

    def loss_gradient(self, x: ArrayLike, y_target) -> np.ndarray:
        """Input gradient of binary cross-entropy on sigmoid(decision_score) at ``y_target``"""
        X, single = self._batch(x)
        grads = self._score_gradient(X)
        residual = expit(self._scores(X)) - np.broadcast_to(np.asarray(y_target, dtype=float), len(X))
        out = residual[:, None] * grads
        return out[0] if single else out


class KnnModel(TrainedModel):
    """k-nearest-neighbor vote; k=1 scores by distance difference to the two classes"""

    kind = "knn"

    def __init__(self, spec, d, hp, X: np.ndarray, y: np.ndarray):
        super().__init__(spec, d, hp)
        self.k = int(hp["k"])
        if self.k < 1:
            raise DataValidationError("knn k must be >= 1")
        self.X = np.array(X, dtype=float)
        self.y = np.array(y, dtype=int)

    @classmethod
    def train(cls, spec, hp, X, y):
        return cls(spec, X.shape[1], hp, X, y)

    def _scores(self, X):
        dist = cdist(X, self.X)
        if self.k == 1:
            d0 = dist[:, self.y == 0].min(axis=1)
            d1 = dist[:, self.y == 1].min(axis=1)
            return d0 - d1
        k = min(self.k, len(self.y))
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        return self.y[nearest].mean(axis=1) - 0.5

    def params(self):
        return {"X": self.X, "y": self.y}

    @classmethod
    def from_params(cls, spec, d, hp, params):
        return cls(spec, d, hp, np.array(params["X"], dtype=float).reshape(-1, d), params["y"])


class LinearSvmModel(TrainedModel):
    """Hinge loss + L2 penalty, full-batch subgradient descent with an averaged iterate"""

    kind = "linear_svm"
    differentiable = True

    def __init__(self, spec, d, hp, w: np.ndarray, b: float):
        super().__init__(spec, d, hp)
        self.w = np.array(w, dtype=float).reshape(d)
        self.b = float(b)

    @classmethod
    def train(cls, spec, hp, X, y):
        n, d = X.shape
        C = float(hp["C"])
        epochs = int(hp["epochs"])
        eta0 = float(hp["eta0"])
        if C <= 0 or epochs < 1 or eta0 <= 0:
            raise DataValidationError("linear_svm needs C > 0, epochs >= 1 and eta0 > 0")

        lam = 1.0 / (C * n)
        t = 2.0 * y - 1.0
        w = np.zeros(d)
        b = 0.0
        w_sum = np.zeros(d)
        b_sum = 0.0
        averaged = 0
        start_avg = epochs // 2
        for epoch in range(1, epochs + 1):
            eta = eta0 / math.sqrt(epoch)
            active = t * (X @ w + b) < 1.0
            coef = np.where(active, t, 0.0)
            w = w - eta * (lam * w - (coef @ X) / n)
            b = b + eta * coef.sum() / n
            if epoch > start_avg:
                w_sum += w
                b_sum += b
                averaged += 1
        return cls(spec, d, hp, w_sum / averaged, b_sum / averaged)

    def _scores(self, X):
        return X @ self.w + self.b

    def _score_gradient(self, X):
        return np.broadcast_to(self.w, X.shape).copy()

    def params(self):
        return {"w": self.w, "b": self.b}

    @classmethod
    def from_params(cls, spec, d, hp, params):
        return cls(spec, d, hp, params["w"], params["b"])


class RandomForestModel(TrainedModel):
    """Bagged CART trees; the score is the class-1 vote share minus one half"""

    kind = "random_forest"

    def __init__(self, spec, d, hp, trees: list[dict]):
        super().__init__(spec, d, hp)
        self.trees = [
            {
                "left": np.asarray(t["left"], dtype=int),
                "right": np.asarray(t["right"], dtype=int),
                "feature": np.asarray(t["feature"], dtype=int),
                "threshold": np.asarray(t["threshold"], dtype=float),
                "label": np.asarray(t["label"], dtype=int),
            }
            for t in trees
        ]

    @classmethod
    def train(cls, spec, hp, X, y):
        n, d = X.shape
        count = int(hp["trees"])
        max_features = hp.get("max_features") or max(1, int(math.floor(math.sqrt(d))))
        trees = []
        for index in range(count):
            rng = rng_for(spec.seed, 7, index)
            rows = rng.integers(0, n, size=n)
            tree = DecisionTreeClassifier(
                criterion="gini",
                max_depth=int(hp["max_depth"]),
                min_samples_leaf=int(hp["min_leaf"]),
                max_features=min(int(max_features), d),
                random_state=derive_seed(spec.seed, 7, index) % (2**32),
            )
            tree.fit(X[rows], y[rows])
            structure = tree.tree_
            trees.append(
                {
                    "left": structure.children_left,
                    "right": structure.children_right,
                    "feature": structure.feature,
                    "threshold": structure.threshold,
                    "label": tree.classes_[np.argmax(structure.value[:, 0, :], axis=1)],
                }
            )
        return cls(spec, d, hp, trees)

    @staticmethod
    def _tree_predict(tree: dict, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=int)
        rows = np.arange(len(X))
        while True:
            inner = tree["left"][node] != -1
            if not inner.any():
                return tree["label"][node]
            go_left = X[rows, np.maximum(tree["feature"][node], 0)] <= tree["threshold"][node]
            step = np.where(go_left, tree["left"][node], tree["right"][node])
            node = np.where(inner, step, node)

    def tree_votes(self, x: ArrayLike) -> np.ndarray:
        """Per-tree predictions, shape (trees, n)"""
        X, _ = self._batch(x)
        return np.array([self._tree_predict(t, X) for t in self.trees])

    def _scores(self, X):
        votes = np.array([self._tree_predict(t, X) for t in self.trees])
        return votes.mean(axis=0) - 0.5

    def params(self):
        return {"trees": self.trees}

    @classmethod
    def from_params(cls, spec, d, hp, params):
        return cls(spec, d, hp, params["trees"])


class MlpModel(TrainedModel):
    """ReLU network with a single logit output; the score is the pre-sigmoid logit"""

    kind = "mlp"
    differentiable = True

    def __init__(self, spec, d, hp, weights: list, biases: list):
        super().__init__(spec, d, hp)
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float).reshape(-1) for b in biases]
        self.weights[0] = self.weights[0].reshape(d, -1)

    @classmethod
    def train(cls, spec, hp, X, y):
        n, d = X.shape
        net = MLPClassifier(
            hidden_layer_sizes=tuple(int(h) for h in hp["hidden"]),
            activation="relu",
            solver="sgd",
            learning_rate="constant",
            learning_rate_init=float(hp["learning_rate"]),
            batch_size=min(int(hp["batch_size"]), n),
            momentum=float(hp["momentum"]),
            nesterovs_momentum=False,
            max_iter=int(hp["epochs"]),
            n_iter_no_change=int(hp["epochs"]),
            random_state=derive_seed(spec.seed, 11) % (2**32),
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            net.fit(X, y)
        weights = [np.array(w) for w in net.coefs_]
        biases = [np.array(b) for b in net.intercepts_]
        # sklearn orders classes_ ascending, so the logit already points at class 1
        return cls(spec, d, hp, weights, biases)

    def _forward(self, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        pre_activations = []
        h = X
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ W + b
            pre_activations.append(z)
            h = np.maximum(z, 0.0)
        logit = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        return logit, pre_activations

    def _scores(self, X):
        return self._forward(X)[0]

    def _score_gradient(self, X):
        _, pre_activations = self._forward(X)
        grad = np.broadcast_to(self.weights[-1][:, 0], (len(X), self.weights[-1].shape[0]))
        for W, z in zip(reversed(self.weights[:-1]), reversed(pre_activations)):
            grad = (grad * (z > 0)) @ W.T
        return grad

    def params(self):
        return {"weights": self.weights, "biases": self.biases}

    @classmethod
    def from_params(cls, spec, d, hp, params):
        return cls(spec, d, hp, params["weights"], params["biases"])


# Registry of available classifiers
CLASSIFIERS: dict[str, type[TrainedModel]] = {
    "knn": KnnModel,
    "linear_svm": LinearSvmModel,
    "random_forest": RandomForestModel,
    "mlp": MlpModel,
}


def fit(spec: ClassifierSpec, train: Dataset) -> TrainedModel:
    """Train a classifier of ``spec.kind`` on ``train``; deterministic given the spec"""
    zeros, ones = train.class_counts()
    if zeros == 0 or ones == 0:
        raise DataValidationError("training set must contain both classes")
    hp = classifier_hyperparameters(spec.kind, spec.hyperparameters)
    logger.debug("Fitting %s on %d rows", spec.kind, train.n)
    X = np.array(train.features, dtype=float)
    y = np.array(train.labels, dtype=int)
    return CLASSIFIERS[spec.kind].train(spec, hp, X, y)


def model_to_dict(model: TrainedModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": model.kind,
        "d": model.d,
        "seed": model.spec.seed,
        "hyperparameters": to_jsonable(model.hyperparameters, None),
        "params": to_jsonable(model.params(), None),
    }


def model_from_dict(doc: dict) -> TrainedModel:
    kind = doc.get("kind")
    if kind not in CLASSIFIERS:
        raise DataValidationError(f"unknown model kind '{kind}'")
    if int(doc.get("schema_version", 0)) != SCHEMA_VERSION:
        raise DataValidationError(f"unsupported model schema {doc.get('schema_version')}")
    hp = doc.get("hyperparameters", {})
    spec = ClassifierSpec(kind=kind, hyperparameters=hp, seed=int(doc.get("seed", 0)))
    return CLASSIFIERS[kind].from_params(spec, int(doc["d"]), hp, doc["params"])


def save_model(model: TrainedModel, path: Path):
    """Write a model as a versioned JSON document at full float precision"""
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f, sort_keys=True)


def load_model(path: Path) -> TrainedModel:
    with open(path) as f:
        return model_from_dict(json.load(f))
