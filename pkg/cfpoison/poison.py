"""Recourse poisoning: target sets, the counterfactual-based attack and baselines."""

import dataclasses
import logging
import math
from typing import Callable, Optional

import numpy as np

from .classifiers import TrainedModel, fit
from .models import (
    CfPoisonError,
    ClassifierSpec,
    ConfigError,
    CostSpec,
    Counterfactual,
    DataValidationError,
    Dataset,
    DimensionError,
    EmptyTargetError,
    GenerationError,
    PoisonConfig,
    PoisonProvenance,
    PoisonSet,
    PoisonVerdict,
    PreconditionError,
    RecourseSettings,
    RetrainError,
    TargetSpec,
)
from .recourse import boundary_distances, cost, generate_diverse, generate_gradcf
from .utils import derive_seed, rng_for, to_jsonable

logger = logging.getLogger(__name__)

# Purpose keys for rng_for / derive_seed
_KEY_DRAWS = 41
_KEY_DRAW_SEED = 42
_KEY_RESEED = 43
_KEY_FLIP = 44
_KEY_MARGIN = 45

# (model, x, y_cf, k, seed) -> valid counterfactuals
Explainer = Callable[[TrainedModel, np.ndarray, int, int, int], list[Counterfactual]]


def diverse_explainer(c: CostSpec, settings: Optional[RecourseSettings] = None) -> Explainer:
    """The default explainer of the attack: diverse closest counterfactuals"""

    def explain(model, x, y_cf, k, seed):
        return generate_diverse(model, x, y_cf, c, k, settings, seed)

    return explain


def build_target_set(ds: Dataset, model: TrainedModel, t: TargetSpec) -> np.ndarray:
    """Row indices of ``ds`` the attack targets"""
    if t.level == "local":
        if t.local_index is None:
            raise ConfigError("target.local_index is required for level=local")
        if not 0 <= t.local_index < ds.n:
            raise EmptyTargetError(f"local_index {t.local_index} outside [0, {ds.n})")
        predicted = int(model.predict(ds.features[t.local_index]))
        if predicted != t.y:
            raise PreconditionError(
                f"local_index {t.local_index} is predicted as {predicted}, not target class {t.y}"
            )
        return np.array([t.local_index])

    mask = model.predict(ds.features) == t.y
    if t.level == "subgroup":
        if ds.sensitive is None:
            raise DataValidationError("subgroup targeting needs a sensitive attribute")
        mask &= ds.sensitive == t.subgroup_value
    targets = np.flatnonzero(mask)
    if targets.size == 0:
        raise EmptyTargetError(f"no {t.level} target rows predicted as class {t.y}")
    return targets


def sample_weights(distances) -> np.ndarray:
    """Sampling probabilities proportional to 1/distance; infinite distances get weight 0"""
    distances = np.asarray(distances, dtype=float)
    if np.any(distances <= 0) or np.any(np.isnan(distances)):
        raise GenerationError("boundary distances must be positive or +inf")
    inverse = np.where(np.isinf(distances), 0.0, 1.0 / np.where(np.isinf(distances), 1.0, distances))
    total = inverse.sum()
    if total == 0:
        raise GenerationError("all sampling weights are zero")
    return inverse / total


def _explain_with_reseed(explainer, model, x, y_cf, k, seed, reseed) -> list[Counterfactual]:
    cfs = [cf for cf in explainer(model, x, y_cf, k, seed) if cf.valid]
    if len(cfs) < k:
        retry = [cf for cf in explainer(model, x, y_cf, k, reseed) if cf.valid]
        if len(retry) > len(cfs):
            cfs = retry
    return cfs[:k]


def craft_poison(
    train: Dataset,
    model: TrainedModel,
    targets: np.ndarray,
    y: int,
    cfg: PoisonConfig,
    explainer: Explainer,
    distance_cost: Optional[CostSpec] = None,
    settings: Optional[RecourseSettings] = None,
) -> PoisonSet:
    """
    Build poisonous instances from counterfactuals of target rows.

    ``cfg.n`` source rows are drawn with replacement, either in proportion to the inverse
    distance to the decision boundary or uniformly. For each draw ``cfg.k`` counterfactuals
    towards ``1 - y`` are computed and every direction is scaled by each alpha of the grid;
    the resulting points are labeled ``y``. Failed counterfactuals are counted in instance
    units.
    """
    targets = np.asarray(targets, dtype=int)
    if targets.size == 0:
        raise EmptyTargetError("target set is empty")
    alphas = cfg.alphas()
    y_cf = 1 - int(y)
    X_targets = train.features[targets]

    if cfg.sampling == "boundary_weighted" and targets.size > 1:
        distances = boundary_distances(model, X_targets, distance_cost or CostSpec(p=2), settings, cfg.seed)
        probabilities = sample_weights(distances)
    else:
        probabilities = np.full(targets.size, 1.0 / targets.size)

    picks = rng_for(cfg.seed, _KEY_DRAWS).choice(targets.size, size=cfg.n, replace=True, p=probabilities)
    features, provenance, failures = [], [], 0
    for draw, pick in enumerate(picks):
        x = X_targets[pick]
        cfs = _explain_with_reseed(
            explainer,
            model,
            x,
            y_cf,
            cfg.k,
            derive_seed(cfg.seed, _KEY_DRAW_SEED, draw),
            derive_seed(cfg.seed, _KEY_RESEED, draw),
        )
        failures += (cfg.k - len(cfs)) * len(alphas)
        for index, cf in enumerate(cfs):
            for alpha in alphas:
                features.append(x + alpha * cf.delta)
                provenance.append(PoisonProvenance(int(targets[pick]), index, float(alpha)))

    if not features:
        raise GenerationError("no counterfactual could be computed for any draw")
    if failures:
        logger.info("Poisoning skipped %d instances after failed counterfactuals", failures)
    return PoisonSet(
        features=np.array(features),
        labels=np.full(len(features), int(y)),
        provenance=provenance,
        config=to_jsonable({"poison": dataclasses.asdict(cfg), "y": int(y)}, None),
        failures=failures,
    )


def generate_poison(
    train: Dataset,
    model: TrainedModel,
    t: TargetSpec,
    cfg: PoisonConfig,
    gen: Optional[Explainer] = None,
    c: Optional[CostSpec] = None,
    settings: Optional[RecourseSettings] = None,
) -> PoisonSet:
    """Run the attack against the rows selected by ``t``"""
    targets = build_target_set(train, model, t)
    explainer = gen or diverse_explainer(c or CostSpec(), settings)
    poison = craft_poison(train, model, targets, t.y, cfg, explainer, None, settings)
    poison.config["target"] = to_jsonable(dataclasses.asdict(t))
    return poison


def poison_budget(fraction: float, train_size: int, per_draw: int) -> tuple[int, int]:
    """
    Poison count and number of draws for a budget fraction.

    Returns:
        (count, draws) with count = round(fraction * train_size) and
        draws = ceil(count / per_draw)
    """
    count = int(math.floor(fraction * train_size + 0.5))
    return count, math.ceil(count / per_draw) if count else 0


def generate_poison_budget(
    train: Dataset,
    model: TrainedModel,
    t: TargetSpec,
    cfg: PoisonConfig,
    fraction: float,
    gen: Optional[Explainer] = None,
    c: Optional[CostSpec] = None,
    settings: Optional[RecourseSettings] = None,
) -> PoisonSet:
    """Attack sized to ``fraction`` of the training set; zero budget gives an empty set"""
    count, draws = poison_budget(fraction, train.n, cfg.k * len(cfg.alphas()))
    if count == 0:
        return empty_poison_set(train.d, cfg)
    poison = generate_poison(train, model, t, dataclasses.replace(cfg, n=draws), gen, c, settings)
    return poison.truncate(count)


def empty_poison_set(d: int, cfg: Optional[PoisonConfig] = None) -> PoisonSet:
    config = to_jsonable({"poison": dataclasses.asdict(cfg)}, None) if cfg else {}
    return PoisonSet(np.zeros((0, d)), np.zeros(0, dtype=int), [], config, 0)


def poisoned_training_set(train: Dataset, poison: PoisonSet) -> Dataset:
    """Union of the training set and the poison; poison rows inherit their source's attribute"""
    if len(poison) == 0:
        return train
    if poison.features.shape[1] != train.d:
        raise DimensionError(f"poison has {poison.features.shape[1]} features, training set {train.d}")
    sensitive = None
    if train.sensitive is not None:
        sources = np.array([p.source_row for p in poison.provenance], dtype=int)
        inside = (sources >= 0) & (sources < train.n)
        sensitive = np.where(inside, train.sensitive[np.clip(sources, 0, train.n - 1)], 0)
    return train.append(poison.features, poison.labels, sensitive)


def label_flip_poison(train: Dataset, fraction: float, seed: int) -> Dataset:
    """Toggle the labels of ceil(fraction * n) uniformly chosen rows"""
    if not 0 < fraction < 1:
        raise ConfigError(f"flip fraction must be in (0, 1), got {fraction}")
    count = min(train.n, math.ceil(round(fraction * train.n, 9)))
    rows = np.sort(rng_for(seed, _KEY_FLIP).choice(train.n, size=count, replace=False))
    labels = np.array(train.labels)
    labels[rows] = 1 - labels[rows]
    return train.with_labels(labels, flipped=rows.tolist(), flip_seed=seed)


def _ray_crossing(X: np.ndarray, y: np.ndarray, x: np.ndarray, own: int, u: np.ndarray) -> float:
    """First t > 0 at which x + t*u is strictly closer to an opposite-class row than to own-class rows"""
    A = X[y != own]
    B = X[y == own]
    # |q-a|^2 - |q-b|^2 = c_ab + s_ab * t, linear along the ray
    c = np.sum((x - A) ** 2, axis=1)[:, None] - np.sum((x - B) ** 2, axis=1)[None, :]
    s = 2.0 * ((B @ u)[None, :] - (A @ u)[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        roots = -c / s
    lower = np.where(s < 0, roots, -np.inf).max(axis=1)
    upper = np.where(s > 0, roots, np.inf).min(axis=1)
    blocked = np.any((s == 0) & (c >= 0), axis=1)
    lower = np.maximum(lower, 0.0)
    feasible = (lower < upper) & ~blocked
    return float(lower[feasible].min()) if feasible.any() else math.inf


def _directions(d: int, centre: Optional[np.ndarray], width: float, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions (and their angle parameters) around ``centre`` within ``width``"""
    if d == 2:
        lo = -math.pi if centre is None else centre[0] - width
        hi = math.pi if centre is None else centre[0] + width
        theta = np.linspace(lo, hi, count, endpoint=centre is not None)
        return np.stack([np.cos(theta), np.sin(theta)], axis=1), theta[:, None]
    side = int(math.ceil(math.sqrt(count)))
    if centre is None:
        polar = np.linspace(0.0, math.pi, side)
        azimuth = np.linspace(-math.pi, math.pi, 2 * side, endpoint=False)
    else:
        polar = np.linspace(centre[0] - width, centre[0] + width, side)
        azimuth = np.linspace(centre[1] - width, centre[1] + width, side)
    P, Z = np.meshgrid(polar, azimuth, indexing="ij")
    P, Z = P.ravel(), Z.ravel()
    dirs = np.stack([np.sin(P) * np.cos(Z), np.sin(P) * np.sin(Z), np.cos(P)], axis=1)
    return dirs, np.stack([P, Z], axis=1)


def closest_boundary_point_1nn(train: Dataset, x, grid_resolution: float = 1e-6) -> np.ndarray:
    """
    Brute-force nearest point on the 1-NN decision boundary (d <= 3).

    Along a ray the squared-distance differences to training rows are linear in the step,
    so the first boundary crossing of each ray is exact; directions are refined
    coarse-to-fine until the positional error is below ``grid_resolution``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    d = train.d
    if d > 3:
        raise DimensionError(f"closest_boundary_point_1nn supports d <= 3, got {d}")
    if len(x) != d:
        raise DimensionError(f"expected {d} features, got {len(x)}")
    X, y = train.features, train.labels
    if min(train.class_counts()) == 0:
        raise DataValidationError("1-NN boundary needs both classes")
    dist = np.linalg.norm(X - x, axis=1)
    d0, d1 = dist[y == 0].min(), dist[y == 1].min()
    own = 1 if d0 > d1 else 0

    if d == 1:
        steps = [_ray_crossing(X, y, x, own, np.array([sign])) for sign in (-1.0, 1.0)]
        best = int(np.argmin(steps))
        return x + steps[best] * np.array([(-1.0, 1.0)[best]])

    dirs, params = _directions(d, None, 0.0, 720 if d == 2 else 4000)
    ts = np.array([_ray_crossing(X, y, x, own, u) for u in dirs])
    best = int(np.argmin(ts))
    width = 2 * math.pi / 720 if d == 2 else math.pi / 40
    while math.isfinite(ts[best]) and width * ts[best] > grid_resolution:
        dirs, params = _directions(d, params[best], width, 41 if d == 2 else 441)
        ts = np.array([_ray_crossing(X, y, x, own, u) for u in dirs])
        best = int(np.argmin(ts))
        width /= 10
    if not math.isfinite(ts[best]):
        raise GenerationError("no boundary crossing found")
    return x + ts[best] * dirs[best]


def svm_margin_poison(
    model: TrainedModel, train: Dataset, xi: float, count: int, seed: int = 0
) -> PoisonSet:
    """
    Points inside the negative margin band -w'z - b in [1 - xi, 1], labeled 0.

    Each point is a negative training row moved along w to a uniformly drawn score in
    [-1, -(1 - xi)].
    """
    if model.kind != "linear_svm":
        raise ConfigError("svm_margin_poison needs a linear_svm model")
    if not 0 < xi < 1:
        raise ConfigError(f"xi must be in (0, 1), got {xi}")
    inside = (2 * train.labels - 1) * model.decision_score(train.features) < 1.0
    if np.any(inside):
        raise PreconditionError(
            f"{int(inside.sum())} training rows lie inside the margin or are misclassified"
        )
    negatives = np.flatnonzero(train.labels == 0)
    if negatives.size == 0:
        raise EmptyTargetError("no negative training rows")

    rng = rng_for(seed, _KEY_MARGIN)
    sources = rng.choice(negatives, size=count, replace=True)
    goals = rng.uniform(-1.0, -(1.0 - xi), size=count)
    w, b = model.w, model.b
    shift = (goals - (train.features[sources] @ w + b)) / float(w @ w)
    features = train.features[sources] + shift[:, None] * w
    return PoisonSet(
        features=features,
        labels=np.zeros(count, dtype=int),
        provenance=[PoisonProvenance(int(s), 0, float(a)) for s, a in zip(sources, shift)],
        config={"construction": "svm_margin", "xi": xi, "count": count, "seed": seed},
    )


def verify_poisonous(
    train: Dataset,
    poison: PoisonSet,
    spec: ClassifierSpec,
    targets,
    cf: Optional[Callable[[TrainedModel, np.ndarray, int], Counterfactual]] = None,
    c: Optional[CostSpec] = None,
) -> PoisonVerdict:
    """Retrain on train + poison under the same classifier spec and compare target recourse costs"""
    c = c or CostSpec()
    cf = cf or (lambda model, x, y_cf: generate_gradcf(model, x, y_cf, c))
    targets = np.asarray(targets, dtype=int)
    clean = fit(spec, train)
    try:
        poisoned = fit(spec, poisoned_training_set(train, poison))
    except (CfPoisonError, ValueError) as e:
        raise RetrainError(f"retraining on the poisoned set failed: {e}") from e

    X = train.features[targets]
    y_cf = 1 - clean.predict(X)

    def costs(model):
        out = []
        for x, y in zip(X, y_cf):
            result = cf(model, x, int(y))
            out.append(cost(c, result.delta) if result.valid else math.inf)
        return np.array(out)

    return PoisonVerdict(targets, costs(clean), costs(poisoned))
