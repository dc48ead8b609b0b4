"""Counterfactual generators and recourse cost functions."""

import json
import logging
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .classifiers import TrainedModel
from .models import (
    CfCosts,
    CostSpec,
    Counterfactual,
    Dataset,
    DimensionError,
    GenerationError,
    RecourseSettings,
)
from .utils import rng_for

logger = logging.getLogger(__name__)

# Purpose keys for rng_for
_KEY_SPHERES = 21
_KEY_JITTER = 31


def _weights(c: CostSpec, d: int) -> np.ndarray:
    if c.weights is None:
        return np.ones(d)
    if len(c.weights) != d:
        raise DimensionError(f"cost weights have length {len(c.weights)}, delta has {d}")
    return np.asarray(c.weights, dtype=float)


def cost(c: CostSpec, delta):
    """Weighted p-norm of ``delta`` (last axis for batches)"""
    delta = np.asarray(delta, dtype=float)
    w = _weights(c, delta.shape[-1])
    if c.p == 1:
        value = np.sum(w * np.abs(delta), axis=-1)
    else:
        value = np.sqrt(np.sum(w * delta**2, axis=-1))
    return float(value) if delta.ndim == 1 else value


def cost_sparsity(c: CostSpec, delta):
    """Number of features changed by more than ``sparsity_tol``"""
    delta = np.asarray(delta, dtype=float)
    value = np.sum(np.abs(delta) > c.sparsity_tol, axis=-1)
    return int(value) if delta.ndim == 1 else value


def cost_record(c: CostSpec, delta: np.ndarray) -> CfCosts:
    delta = np.asarray(delta, dtype=float)
    return CfCosts(
        l1=float(np.sum(np.abs(delta))),
        l2=float(np.sqrt(np.sum(delta**2))),
        sparsity=cost_sparsity(c, delta),
    )


def _make_cf(x, delta, y_cf, valid, c, generator, iterations, seed, elapsed) -> Counterfactual:
    x = np.array(x, dtype=float)
    delta = np.array(delta, dtype=float)
    return Counterfactual(
        x_orig=x,
        delta=delta,
        y_cf=int(y_cf),
        valid=bool(valid),
        costs=cost_record(c, delta),
        generator=generator,
        iterations=int(iterations),
        seed=int(seed),
        elapsed=elapsed,
    )


def _shrink_to_boundary(
    model: TrainedModel, X: np.ndarray, delta: np.ndarray, y_cf: np.ndarray, steps: int
) -> np.ndarray:
    """Bisect t in [0, 1] per row for the smallest valid ``X + t * delta``; t=1 must be valid"""
    lo = np.zeros(len(X))
    hi = np.ones(len(X))
    for _ in range(steps):
        mid = (lo + hi) / 2
        ok = model.predict(X + mid[:, None] * delta) == y_cf
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    return hi


def _diversity_gradient(E: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Gradient of the mean pairwise endpoint distance within each group"""
    grad = np.zeros_like(E)
    for g in np.unique(groups):
        rows = np.flatnonzero(groups == g)
        m = len(rows)
        if m < 2:
            continue
        diff = E[rows][:, None, :] - E[rows][None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        unit = np.divide(diff, dist[:, :, None], out=np.zeros_like(diff), where=dist[:, :, None] > 0)
        grad[rows] = unit.sum(axis=1) * 2.0 / (m * (m - 1))
    return grad


def _anneal(
    model: TrainedModel,
    X: np.ndarray,
    y_cf: np.ndarray,
    c: CostSpec,
    settings: RecourseSettings,
    budget: int,
    groups: Optional[np.ndarray] = None,
    init: Optional[np.ndarray] = None,
    div_weight: float = 0.0,
    proto: Optional[np.ndarray] = None,
    proto_weight: float = 0.0,
):
    """
    Validity-first annealing of ``loss + C * cost`` over a batch of rows.

    Rows sharing a group id are optimized jointly (diversity term) and finish together.
    Validity is checked every ``check_every`` steps; a finished group is frozen. At the end
    of every round C is halved for unfinished groups. ``budget`` caps the total number of
    steps, so a smaller budget is a truncation of the same trajectory.

    Returns:
        (delta, valid, C per row, iterations per row)
    """
    r, d = X.shape
    w = _weights(c, d)
    groups = np.arange(r) if groups is None else np.asarray(groups)
    n_groups = int(groups.max()) + 1
    delta = np.zeros((r, d)) if init is None else np.array(init, dtype=float)
    C = np.full(n_groups, float(settings.c_init))
    done = np.zeros(n_groups, dtype=bool)
    iterations = np.zeros(r, dtype=int)
    eta = settings.step
    steps = 0

    for _ in range(settings.max_rounds):
        for s in range(1, settings.round_steps + 1):
            if steps >= budget:
                return delta, done[groups], C[groups], iterations
            rows = np.flatnonzero(~done[groups])
            Ca = C[groups[rows]][:, None]
            Xa = X[rows]
            Da = delta[rows]

            grad = model.loss_gradient(Xa + Da, y_cf[rows])
            if c.p == 2:
                norm = np.sqrt(np.sum(w * Da**2, axis=1))[:, None]
                grad = grad + Ca * np.divide(w * Da, norm, out=np.zeros_like(Da), where=norm > 0)
            if div_weight > 0:
                grad = grad - div_weight * Ca * _diversity_gradient(Xa + Da, groups[rows])
            Da = Da - eta * grad
            if c.p == 1:
                Da = np.sign(Da) * np.maximum(np.abs(Da) - eta * Ca * w, 0.0)
            if proto is not None and proto_weight > 0:
                pull = 2.0 * eta * proto_weight * Ca
                Da = (Xa + Da + pull * proto[rows]) / (1.0 + pull) - Xa

            delta[rows] = Da
            iterations[rows] += 1
            steps += 1

            if s % settings.check_every == 0:
                invalid = model.predict(Xa + Da) != y_cf[rows]
                bad = np.bincount(groups[rows], weights=invalid.astype(float), minlength=n_groups)
                done |= bad == 0
                if done.all():
                    return delta, done[groups], C[groups], iterations
        C[~done] *= 0.5

    return delta, done[groups], C[groups], iterations


def _prototype(model: TrainedModel, reference: Dataset, x: np.ndarray, y_cf: int, neighbors: int):
    candidates = reference.features[model.predict(reference.features) == y_cf]
    if len(candidates) == 0:
        raise GenerationError(f"no reference row is predicted as class {y_cf}")
    order = np.argsort(np.linalg.norm(candidates - x, axis=1), kind="stable")[:neighbors]
    return candidates[order].mean(axis=0)


def _proto_scale(c, x, delta, proto, C, proto_weight, t_boundary) -> float:
    """Best t in [t_boundary, 1] for C * cost(t * delta) + lambda * ||x + t * delta - proto||^2"""
    lam = proto_weight * C
    norm2 = float(delta @ delta)
    if lam <= 0 or norm2 == 0:
        return t_boundary
    t = -(C * cost(c, delta) + 2 * lam * float(delta @ (x - proto))) / (2 * lam * norm2)
    return float(np.clip(t, t_boundary, 1.0))


def growing_spheres(
    model: TrainedModel,
    x,
    y_cf: int,
    c: CostSpec,
    settings: Optional[RecourseSettings] = None,
    seed: int = 0,
) -> Counterfactual:
    """
    Gradient-free search in spherical layers around ``x``.

    The first ball is halved while it still contains flipping samples, then layers of
    growing radius are sampled until one flips. Every flipping sample of that layer is
    bisected to the boundary and the cheapest boundary point is returned.
    """
    settings = settings or RecourseSettings()
    start = time.perf_counter()
    x = np.asarray(x, dtype=float)
    if model.predict(x) == y_cf:
        return _make_cf(x, np.zeros_like(x), y_cf, True, c, "growing_spheres", 0, seed, 0.0)

    rng = rng_for(seed, _KEY_SPHERES)

    def layer(inner: float, outer: float) -> np.ndarray:
        directions = rng.standard_normal((settings.shell_samples, len(x)))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
        radii = rng.uniform(inner, outer, size=(settings.shell_samples, 1))
        candidates = radii * directions / np.where(norms > 0, norms, 1.0)
        return candidates[model.predict(x + candidates) == y_cf]

    outer = settings.initial_radius
    hits = layer(0.0, outer)
    iterations = 1
    while len(hits) and iterations <= settings.max_shells:
        outer /= 2
        hits = layer(0.0, outer)
        iterations += 1

    inner = outer
    while not len(hits) and iterations <= settings.max_shells:
        outer = inner * settings.shell_growth
        hits = layer(inner, outer)
        inner = outer
        iterations += 1

    if not len(hits):
        logger.debug("growing spheres found no counterfactual after %d layers", iterations)
        return _make_cf(
            x, np.zeros_like(x), y_cf, False, c, "growing_spheres", iterations, seed,
            time.perf_counter() - start,
        )

    t = _shrink_to_boundary(
        model, np.repeat(x[None, :], len(hits), axis=0), hits, np.full(len(hits), y_cf), settings.bisect_steps
    )
    deltas = t[:, None] * hits
    best = deltas[int(np.argmin(cost(c, deltas)))]
    return _make_cf(
        x, best, y_cf, True, c, "growing_spheres", iterations, seed, time.perf_counter() - start
    )


def generate_nun(model: TrainedModel, reference: Dataset, x, y_cf: int, c: CostSpec) -> Counterfactual:
    """Nearest unlike neighbor: the cheapest reference row predicted as ``y_cf``"""
    start = time.perf_counter()
    x = np.asarray(x, dtype=float)
    candidates = np.flatnonzero(model.predict(reference.features) == y_cf)
    if candidates.size == 0:
        raise GenerationError(f"no reference row is predicted as class {y_cf}")
    costs = cost(c, reference.features[candidates] - x)
    best = candidates[int(np.argmin(costs))]
    delta = reference.features[best] - x
    return _make_cf(x, delta, y_cf, True, c, "nun", 0, 0, time.perf_counter() - start)


def generate_gradcf_batch(
    model: TrainedModel,
    X,
    y_cf,
    c: CostSpec,
    budget: Optional[int] = None,
    settings: Optional[RecourseSettings] = None,
    seed: int = 0,
) -> list[Counterfactual]:
    """Closest counterfactuals for many rows at once (same per-row result as generate_gradcf)"""
    settings = settings or RecourseSettings()
    budget = settings.budget if budget is None else int(budget)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.broadcast_to(np.asarray(y_cf, dtype=int), len(X)).copy()
    if not model.differentiable:
        return [growing_spheres(model, x, int(t), c, settings, seed) for x, t in zip(X, y)]

    start = time.perf_counter()
    delta = np.zeros_like(X)
    valid = model.predict(X) == y
    iterations = np.zeros(len(X), dtype=int)
    todo = np.flatnonzero(~valid)
    if todo.size:
        D, ok, _, iters = _anneal(model, X[todo], y[todo], c, settings, budget)
        if ok.any():
            rows = np.flatnonzero(ok)
            t = _shrink_to_boundary(model, X[todo][rows], D[rows], y[todo][rows], settings.bisect_steps)
            D[rows] *= t[:, None]
        delta[todo] = D
        valid[todo] = ok
        iterations[todo] = iters
    elapsed = (time.perf_counter() - start) / max(len(X), 1)
    return [
        _make_cf(X[i], delta[i], y[i], valid[i], c, "gradcf", iterations[i], seed, elapsed)
        for i in range(len(X))
    ]


def generate_gradcf(
    model: TrainedModel,
    x,
    y_cf: int,
    c: CostSpec,
    budget: Optional[int] = None,
    settings: Optional[RecourseSettings] = None,
    seed: int = 0,
) -> Counterfactual:
    """
    Closest counterfactual by annealed gradient descent on loss + C * cost.

    Models without an input gradient are delegated to :func:`growing_spheres`. Invalid
    results are returned with ``valid=False``.
    """
    x = np.asarray(x, dtype=float)
    return generate_gradcf_batch(model, x[None, :], y_cf, c, budget, settings, seed)[0]


def generate_diverse_batch(
    model: TrainedModel,
    X,
    y_cf,
    c: CostSpec,
    k: int,
    settings: Optional[RecourseSettings] = None,
    seed: int = 0,
    div_weight: Optional[float] = None,
) -> list[list[Counterfactual]]:
    """Sets of ``k`` diverse counterfactuals per row; invalid entries are dropped"""
    if k < 1:
        raise GenerationError("k must be >= 1")
    settings = settings or RecourseSettings()
    div_weight = settings.div_weight if div_weight is None else float(div_weight)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.broadcast_to(np.asarray(y_cf, dtype=int), len(X)).copy()

    if not model.differentiable:
        results = []
        for i, (x, t) in enumerate(zip(X, y)):
            runs = [growing_spheres(model, x, int(t), c, settings, seed + j) for j in range(k)]
            results.append([cf for cf in runs if cf.valid])
        return results
    if k == 1:
        return [[cf] if cf.valid else [] for cf in generate_gradcf_batch(model, X, y, c, None, settings, seed)]

    start = time.perf_counter()
    results: list[list[Counterfactual]] = [[] for _ in range(len(X))]
    already = model.predict(X) == y
    for i in np.flatnonzero(already):
        zero = np.zeros(X.shape[1])
        results[i] = [_make_cf(X[i], zero, y[i], True, c, "diverse", 0, seed, 0.0) for _ in range(k)]

    todo = np.flatnonzero(~already)
    if todo.size:
        rows_x = np.repeat(X[todo], k, axis=0)
        rows_y = np.repeat(y[todo], k)
        groups = np.repeat(np.arange(todo.size), k)
        init = np.zeros_like(rows_x)
        if div_weight > 0:
            for g, i in enumerate(todo):
                jitter = rng_for(seed, _KEY_JITTER, int(i)).standard_normal((k, X.shape[1]))
                init[g * k : (g + 1) * k] = settings.jitter * jitter
        D, ok, _, iters = _anneal(
            model, rows_x, rows_y, c, settings, settings.budget, groups, init, div_weight
        )
        # a group that never finished may still contain individually valid rows
        ok = ok | (model.predict(rows_x + D) == rows_y)
        if ok.any():
            sel = np.flatnonzero(ok)
            t = _shrink_to_boundary(model, rows_x[sel], D[sel], rows_y[sel], settings.bisect_steps)
            D[sel] *= t[:, None]
        elapsed = (time.perf_counter() - start) / len(rows_x)
        for row in range(len(rows_x)):
            if ok[row]:
                i = todo[groups[row]]
                results[i].append(
                    _make_cf(rows_x[row], D[row], rows_y[row], True, c, "diverse", iters[row], seed, elapsed)
                )

    failures = sum(k - len(r) for r in results)
    if failures:
        logger.debug("diverse generation: %d of %d counterfactuals invalid", failures, k * len(X))
    return results


def generate_diverse(
    model: TrainedModel,
    x,
    y_cf: int,
    c: CostSpec,
    k: int,
    settings: Optional[RecourseSettings] = None,
    seed: int = 0,
    div_weight: Optional[float] = None,
) -> list[Counterfactual]:
    """
    ``k`` counterfactuals minimizing the summed objective minus a diversity reward
    (mean pairwise endpoint distance). The list is shorter than ``k`` when some entries
    end up invalid.
    """
    x = np.asarray(x, dtype=float)
    return generate_diverse_batch(model, x[None, :], y_cf, c, k, settings, seed, div_weight)[0]


def generate_proto_batch(
    model: TrainedModel,
    reference: Dataset,
    X,
    y_cf,
    c: CostSpec,
    settings: Optional[RecourseSettings] = None,
    seed: int = 0,
    proto_weight: Optional[float] = None,
) -> list[Counterfactual]:
    settings = settings or RecourseSettings()
    weight = settings.proto_weight if proto_weight is None else float(proto_weight)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.broadcast_to(np.asarray(y_cf, dtype=int), len(X)).copy()
    protos = np.array(
        [_prototype(model, reference, x, int(t), settings.proto_neighbors) for x, t in zip(X, y)]
    )
    start = time.perf_counter()
    delta = np.zeros_like(X)
    valid = model.predict(X) == y
    iterations = np.zeros(len(X), dtype=int)
    C = np.full(len(X), float(settings.c_init))
    todo = np.flatnonzero(~valid)

    if todo.size and model.differentiable:
        D, ok, C_rows, iters = _anneal(
            model, X[todo], y[todo], c, settings, settings.budget, proto=protos[todo], proto_weight=weight
        )
        delta[todo], valid[todo], C[todo], iterations[todo] = D, ok, C_rows, iters
    elif todo.size:
        # gradient-free: head straight for the prototype, else fall back to sphere search
        for i in todo:
            direct = protos[i] - X[i]
            if model.predict(X[i] + direct) == y[i]:
                delta[i], valid[i] = direct, True
            else:
                cf = growing_spheres(model, X[i], int(y[i]), c, settings, seed)
                delta[i], valid[i], iterations[i] = cf.delta, cf.valid, cf.iterations

    for i in todo:
        if not valid[i]:
            continue
        t_b = _shrink_to_boundary(model, X[i][None], delta[i][None], y[i : i + 1], settings.bisect_steps)[0]
        t = _proto_scale(c, X[i], delta[i], protos[i], C[i], weight, t_b)
        if t != t_b and model.predict(X[i] + t * delta[i]) != y[i]:
            t = t_b
        delta[i] = t * delta[i]

    elapsed = (time.perf_counter() - start) / max(len(X), 1)
    return [
        _make_cf(X[i], delta[i], y[i], valid[i], c, "proto", iterations[i], seed, elapsed)
        for i in range(len(X))
    ]


def generate_proto(
    model: TrainedModel,
    reference: Dataset,
    x,
    y_cf: int,
    c: CostSpec,
    settings: Optional[RecourseSettings] = None,
    seed: int = 0,
    proto_weight: Optional[float] = None,
) -> Counterfactual:
    """
    Counterfactual pulled towards a prototype: the mean of the nearest reference rows
    predicted as ``y_cf``.
    """
    x = np.asarray(x, dtype=float)
    return generate_proto_batch(model, reference, x[None, :], y_cf, c, settings, seed, proto_weight)[0]


def boundary_distances(
    model: TrainedModel,
    X,
    c: CostSpec,
    settings: Optional[RecourseSettings] = None,
    seed: int = 0,
) -> np.ndarray:
    """Recourse cost to the opposite class for every row; +inf where no counterfactual was found"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    opposite = 1 - model.predict(X)
    cfs = generate_gradcf_batch(model, X, opposite, c, None, settings, seed)
    return np.array([cost(c, cf.delta) if cf.valid else np.inf for cf in cfs])


def boundary_distance(
    model: TrainedModel, x, c: CostSpec, settings: Optional[RecourseSettings] = None, seed: int = 0
) -> float:
    x = np.asarray(x, dtype=float)
    return float(boundary_distances(model, x[None, :], c, settings, seed)[0])


# Batch explainers used by experiments: (model, reference, X, y_cf, cost, settings, seed, k)
BatchExplainer = Callable[..., list[Counterfactual]]


def _explain_nun(model, reference, X, y_cf, c, settings, seed, k):
    return [generate_nun(model, reference, x, y_cf, c) for x in X]


def _explain_gradcf(model, reference, X, y_cf, c, settings, seed, k):
    return generate_gradcf_batch(model, X, y_cf, c, None, settings, seed)


def _explain_diverse(model, reference, X, y_cf, c, settings, seed, k):
    """Cheapest member of each diverse set"""
    out = []
    for x, cfs in zip(X, generate_diverse_batch(model, X, y_cf, c, k, settings, seed)):
        if cfs:
            out.append(min(cfs, key=lambda cf: cost(c, cf.delta)))
        else:
            out.append(_make_cf(x, np.zeros_like(x), y_cf, False, c, "diverse", 0, seed, 0.0))
    return out


def _explain_proto(model, reference, X, y_cf, c, settings, seed, k):
    return generate_proto_batch(model, reference, X, y_cf, c, settings, seed)


# Registry of counterfactual generators by experiment method name
GENERATORS: dict[str, BatchExplainer] = {
    "nun": _explain_nun,
    "gradcf": _explain_gradcf,
    "diverse": _explain_diverse,
    "proto": _explain_proto,
}


def explain_batch(
    method: str,
    model: TrainedModel,
    reference: Dataset,
    X,
    y_cf: int,
    c: CostSpec,
    settings: Optional[RecourseSettings] = None,
    seed: int = 0,
    k: int = 3,
) -> list[Counterfactual]:
    """Run a registered generator over rows; rows that cannot be explained come back invalid"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        return []
    try:
        return GENERATORS[method](model, reference, X, y_cf, c, settings or RecourseSettings(), seed, k)
    except GenerationError as e:
        logger.debug("%s generation failed: %s", method, e)
        return [_make_cf(x, np.zeros_like(x), y_cf, False, c, method, 0, seed, 0.0) for x in X]


def write_counterfactuals(path: Path, cfs: list[Counterfactual]):
    """Write counterfactuals as JSON lines"""
    with open(path, "w") as f:
        for cf in cfs:
            f.write(json.dumps(cf.to_dict(), sort_keys=True) + "\n")


def read_counterfactuals(path: Path) -> list[Counterfactual]:
    with open(path) as f:
        return [Counterfactual.from_dict(json.loads(line)) for line in f if line.strip()]
