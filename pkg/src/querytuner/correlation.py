"""Knob-to-node-type relevance discovery from per-node timing data.

Per-node timings gathered during warm start become (node type, configuration,
seconds) triplets.  For each node type a ridge regressor on per-knob linear
and quadratic terms predicts the node time from the configuration; Shapley
values of that surrogate, estimated by permutation sampling with features
marginalized against a background sample set, attribute the prediction to
individual knobs.  A knob and a node type count as correlated when the mean
absolute attribution clears a threshold, by default 1% of the node type's
mean observed time.

The quadratic terms matter because engine effect curves can have interior
optima: a purely linear surrogate provably assigns near-zero weight to a
symmetric effect and would miss the correlation entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import CorrelationMatrix
from .errors import EngineError, UsageError

RIDGE_LAMBDA = 1e-3
DEFAULT_PERMUTATIONS = 2000
DEFAULT_EVAL_POINTS = 16
DEFAULT_BACKGROUND = 128
DEFAULT_EPSILON_FRACTION = 0.01


@dataclass(frozen=True)
class NodeTiming:
    node_type: str
    theta: np.ndarray
    seconds: float


@dataclass
class RidgeModel:
    """Ridge regression on [theta, theta^2] features with an intercept."""

    weights: np.ndarray  # (2n,), linear terms then quadratic terms
    intercept: float
    n_knobs: int

    def predict(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        z = np.hstack([thetas, thetas * thetas])
        return z @ self.weights + self.intercept

    @property
    def linear_coefficients(self) -> np.ndarray:
        return self.weights[:self.n_knobs]


@dataclass
class ImportanceReport:
    node_types: list[str]
    knob_names: list[str]
    importances: np.ndarray    # (node_types x knobs), mean |Shapley value|
    mean_seconds: np.ndarray   # per node type
    insufficient: set[str] = field(default_factory=set)


def collect_timings(engine, query_ids, thetas: np.ndarray) -> list[NodeTiming]:
    """Evaluate every (query, configuration) pair in analyze mode.

    Successful runs yield one triplet per plan node; failed runs yield no
    timings (the engine reports none for partial executions).  An engine
    error aborts with the triplets collected so far attached to the error.
    """
    timings: list[NodeTiming] = []
    space = engine.knob_space
    for query_id in query_ids:
        ops = engine.plan(query_id).node_types()
        for theta in np.atleast_2d(thetas):
            try:
                result, node_seconds = engine.execute_analyze(
                    query_id, space.denormalize(theta))
            except EngineError as exc:
                exc.partial_timings = timings
                raise
            if result.status != 0 or node_seconds is None:
                continue
            for op, seconds in zip(ops, node_seconds):
                timings.append(NodeTiming(op, np.asarray(theta, dtype=np.float64),
                                          float(seconds)))
    return timings


def group_by_type(timings) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    buckets: dict[str, list[NodeTiming]] = {}
    for t in timings:
        buckets.setdefault(t.node_type, []).append(t)
    return {
        nt: (np.vstack([t.theta for t in items]),
             np.array([t.seconds for t in items]))
        for nt, items in buckets.items()
    }


def fit_node_model(thetas: np.ndarray, seconds: np.ndarray,
                   lam: float = RIDGE_LAMBDA) -> RidgeModel:
    """Closed-form ridge fit; the intercept is left unpenalized via centering."""
    thetas = np.atleast_2d(thetas)
    n = thetas.shape[1]
    z = np.hstack([thetas, thetas * thetas])
    z_mean = z.mean(axis=0)
    y_mean = seconds.mean() if seconds.size else 0.0
    zc = z - z_mean
    yc = seconds - y_mean
    gram = zc.T @ zc + lam * np.eye(2 * n)
    weights = np.linalg.solve(gram, zc.T @ yc)
    return RidgeModel(weights=weights, intercept=float(y_mean - z_mean @ weights),
                      n_knobs=n)


def shapley_importance(predict, background: np.ndarray, points: np.ndarray,
                       n_permutations: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Permutation-sampling Shapley values of ``predict`` at each point.

    Features absent from a coalition are marginalized by averaging the model
    over the background rows.  All coalition states of one permutation are
    evaluated in a single batched predict call.  Returns (mean |value| per
    knob, per-point value matrix).
    """
    if n_permutations < 1:
        raise UsageError("need at least one permutation")
    background = np.atleast_2d(background)
    points = np.atleast_2d(points)
    n = points.shape[1]
    b = background.shape[0]
    per_point = np.zeros((points.shape[0], n))
    for pi, x in enumerate(points):
        phi = np.zeros(n)
        for _ in range(n_permutations):
            order = rng.permutation(n)
            # stack the n+1 cumulative coalitions as blocks of background rows
            blocks = np.tile(background, (n + 1, 1))
            for step_i, j in enumerate(order):
                rows = slice((step_i + 1) * b, (n + 1) * b)
                blocks[rows, j] = x[j]
            values = predict(blocks).reshape(n + 1, b).mean(axis=1)
            phi[order] += np.diff(values)
        per_point[pi] = phi / n_permutations
    return np.abs(per_point).mean(axis=0), per_point


def build_matrix(report: ImportanceReport, epsilon) -> CorrelationMatrix:
    """Threshold importances into the binary relevance matrix.

    ``epsilon`` is one absolute threshold or a per-node-type array.  Node
    types flagged as insufficiently sampled are conservatively marked
    correlated with every knob.
    """
    eps = np.broadcast_to(np.asarray(epsilon, dtype=np.float64),
                          (len(report.node_types),))
    matrix = (report.importances > eps[:, None]).astype(np.int64)
    for nt in report.insufficient:
        matrix[report.node_types.index(nt)] = 1
    return CorrelationMatrix(list(report.node_types), list(report.knob_names), matrix)


def identify_correlations(timings, node_types, knob_names,
                          rng: np.random.Generator,
                          n_permutations: int = DEFAULT_PERMUTATIONS,
                          eval_points: int = DEFAULT_EVAL_POINTS,
                          background_size: int = DEFAULT_BACKGROUND,
                          epsilon_fraction: float = DEFAULT_EPSILON_FRACTION
                          ) -> tuple[CorrelationMatrix, ImportanceReport]:
    """Full pipeline from timing triplets to the relevance matrix."""
    n = len(knob_names)
    grouped = group_by_type(timings)
    importances = np.zeros((len(node_types), n))
    mean_seconds = np.zeros(len(node_types))
    insufficient: set[str] = set()
    for ti, nt in enumerate(node_types):
        if nt not in grouped or grouped[nt][0].shape[0] < 2 * n:
            insufficient.add(nt)
            continue
        thetas, seconds = grouped[nt]
        mean_seconds[ti] = seconds.mean()
        model = fit_node_model(thetas, seconds)
        take = min(eval_points, thetas.shape[0])
        pts = thetas[rng.choice(thetas.shape[0], size=take, replace=False)]
        bg = thetas
        if thetas.shape[0] > background_size:
            bg = thetas[rng.choice(thetas.shape[0], size=background_size,
                                   replace=False)]
        importances[ti], _ = shapley_importance(model.predict, bg, pts,
                                                n_permutations, rng)
    report = ImportanceReport(node_types=list(node_types),
                              knob_names=list(knob_names),
                              importances=importances,
                              mean_seconds=mean_seconds,
                              insufficient=insufficient)
    matrix = build_matrix(report, epsilon_fraction * mean_seconds)
    return matrix, report
