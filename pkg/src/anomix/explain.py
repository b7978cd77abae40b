"""Gate geometry and low-dimensional explanation maps.

The mixing gate's slope matrix defines, for each expert, a direction in
covariate space along which only that expert's logit grows.  Projecting a
grid of gate scores back into covariate space through those directions
yields a fictitious dataset on which the model can be evaluated, turning
the fitted gates into a readable map of expert regions, predictive means
and predictive spread.

All geometry is computed from the posterior expectation of the gate
coefficients; per-draw maps are available behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import fused_moments
from .posterior import PosteriorSample

__all__ = [
    "GateGeometry",
    "ExplanationMap",
    "gate_geometry",
    "reduce_svd",
    "reduced_geometry",
    "augment_behavior",
    "default_score_grid",
    "embed_grid",
    "render_map",
]

RANK_RTOL = 1e-8


@dataclass(frozen=True)
class GateGeometry:
    """Posterior-expected gate slopes with their disentangled directions.

    ``a_star[i]`` is the component of slope row ``i`` orthogonal to every
    other row; moving along it changes only expert ``i``'s gate logit.
    ``correction`` is the 2x2 matrix relating the disentangled rows to the
    raw ones when exactly two rows are present.
    """

    slopes: np.ndarray
    intercepts: np.ndarray
    a_star: tuple
    correction: np.ndarray | None = None

    @property
    def n_directions(self) -> int:
        return self.slopes.shape[0]

    @property
    def n_features(self) -> int:
        return self.slopes.shape[1]


@dataclass(frozen=True)
class ExplanationMap:
    """A grid of gate scores embedded back into feature space.

    ``arrows`` holds, per input feature, its direction of effect in the
    grid's score coordinates (one column of the slope matrix).  Outputs
    are filled in by :func:`render_map`.
    """

    grid: np.ndarray
    points: np.ndarray
    arrows: np.ndarray
    activations: np.ndarray | None = None
    predictive_mean: np.ndarray | None = None
    predictive_sd: np.ndarray | None = None


def _orthogonal_directions(slopes: np.ndarray) -> tuple:
    rows = []
    for i in range(len(slopes)):
        others = np.delete(slopes, i, axis=0)
        a = slopes[i]
        if len(others):
            # Component of a orthogonal to the span of the other rows.
            coef, *_ = np.linalg.lstsq(others.T, a, rcond=None)
            a = a - others.T @ coef
        rows.append(a)
    return tuple(rows)


def gate_geometry(sample: PosteriorSample) -> GateGeometry:
    """Disentangled gate directions from the posterior-expected gate matrix.

    Requires the expected slope matrix (frozen reference row dropped) to
    have full row rank; degenerate gates are reported with the achieved
    rank so the caller can fall back to the SVD reduction.
    """
    mats = np.stack([d.mixing.matrix for d in sample.draws])
    expected = mats.mean(axis=0)[:-1]
    if expected.shape[0] == 0:
        raise ValueError("a single-expert gate has no directions to explain")
    intercepts = expected[:, 0]
    slopes = expected[:, 1:]
    rank = np.linalg.matrix_rank(slopes, tol=RANK_RTOL * np.linalg.norm(slopes, 2))
    if rank < slopes.shape[0]:
        raise ValueError(
            f"expected gate matrix has rank {rank} < {slopes.shape[0]}; "
            "use the SVD reduction instead"
        )
    a_star = _orthogonal_directions(slopes)
    correction = None
    if slopes.shape[0] == 2:
        a1, a2 = slopes
        correction = np.array(
            [
                [1.0, -(a1 @ a2) / (a2 @ a2)],
                [-(a1 @ a2) / (a1 @ a1), 1.0],
            ]
        )
    return GateGeometry(slopes, intercepts, a_star, correction)


def reduce_svd(slopes: np.ndarray) -> np.ndarray:
    """Rank-2 reduction of a slope matrix with more than two rows.

    Rows of the result are the two leading right-singular directions
    scaled by their singular values, spanning the best two-dimensional
    approximation of the gate's row space.
    """
    slopes = np.asarray(slopes, dtype=float)
    if slopes.shape[0] <= 2:
        raise ValueError("SVD reduction applies only to more than two gate rows")
    _, sv, vt = np.linalg.svd(slopes, full_matrices=False)
    if len(sv) < 2 or sv[1] <= RANK_RTOL * sv[0]:
        raise ValueError("fewer than two significant singular values; no 2D reduction exists")
    return sv[:2, None] * vt[:2]


def reduced_geometry(sample: PosteriorSample) -> GateGeometry:
    """Two-dimensional geometry for many-expert gates via SVD.

    Grid coordinates are the two principal score directions (centered, so
    intercepts are zero); they no longer correspond to single experts.
    """
    mats = np.stack([d.mixing.matrix for d in sample.draws])
    slopes = mats.mean(axis=0)[:-1, 1:]
    reduced = reduce_svd(slopes)
    return GateGeometry(reduced, np.zeros(2), tuple(reduced), None)


def augment_behavior(geometry: GateGeometry, behavior_coeffs) -> GateGeometry:
    """Append the behavior gate as a second direction (two-expert case).

    Enables a 2D map when the mixing gate alone contributes one row; the
    augmented matrix must still have full row rank.
    """
    coeffs = np.asarray(behavior_coeffs, dtype=float)
    if geometry.n_directions != 1:
        raise ValueError("behavior augmentation applies to a single-direction geometry")
    slopes = np.vstack([geometry.slopes, coeffs[1:]])
    intercepts = np.concatenate([geometry.intercepts, [coeffs[0]]])
    rank = np.linalg.matrix_rank(slopes, tol=RANK_RTOL * np.linalg.norm(slopes, 2))
    if rank < 2:
        raise ValueError("behavior row is collinear with the gate row; augmented rank < 2")
    a1, a2 = slopes
    correction = np.array(
        [
            [1.0, -(a1 @ a2) / (a2 @ a2)],
            [-(a1 @ a2) / (a1 @ a1), 1.0],
        ]
    )
    return GateGeometry(slopes, intercepts, _orthogonal_directions(slopes), correction)


def default_score_grid(n_directions: int, extent: float = 4.0, points_per_axis: int = 41) -> np.ndarray:
    """Regular grid over gate scores, wide enough to reach near-saturation."""
    axis = np.linspace(-extent, extent, points_per_axis)
    if n_directions == 1:
        return axis[:, None]
    grids = np.meshgrid(*([axis] * n_directions), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def embed_grid(geometry: GateGeometry, score_grid, feature_means=None) -> ExplanationMap:
    """Lift a grid of gate scores to fictitious covariate points.

    Each point is the minimum-norm solution of ``slopes @ x = v - b``
    offset by the feature means, so the gate recovers the requested scores
    exactly while features outside the gated subspace stay at their
    training means.
    """
    grid = np.asarray(score_grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    if grid.shape[1] != geometry.n_directions:
        raise ValueError(
            f"grid dimension {grid.shape[1]} does not match {geometry.n_directions} directions"
        )
    means = (
        np.zeros(geometry.n_features)
        if feature_means is None
        else np.asarray(feature_means, dtype=float)
    )
    pinv = np.linalg.pinv(geometry.slopes)
    residual = grid - geometry.intercepts - means @ geometry.slopes.T
    points = means + residual @ pinv.T
    arrows = geometry.slopes.T
    return ExplanationMap(grid=grid, points=points, arrows=arrows)


def render_map(skeleton: ExplanationMap, sample: PosteriorSample, per_draw: bool = False):
    """Evaluate the model over the embedded grid.

    Fills in posterior-mean expert activations, the predictive mean and the
    predictive standard deviation at every grid point.  With ``per_draw``
    the per-draw activation stack is returned alongside the map.
    """
    points = skeleton.points
    n_grid = len(points)
    n_experts = sample.draws[0].n_experts
    act = np.zeros((n_grid, n_experts))
    mean_acc = np.zeros(n_grid)
    second_moment = np.zeros(n_grid)
    stack = np.empty((sample.n_draws, n_grid, n_experts)) if per_draw else None
    for s, draw in enumerate(sample.draws):
        alpha, means, sds = fused_moments(draw, points)
        act += alpha
        m = (alpha * means).sum(axis=1)
        v = (alpha * (sds**2 + means**2)).sum(axis=1) - m**2
        mean_acc += m
        second_moment += v + m**2
        if per_draw:
            stack[s] = alpha
    n_draws = sample.n_draws
    predictive_mean = mean_acc / n_draws
    predictive_var = np.maximum(second_moment / n_draws - predictive_mean**2, 0.0)
    rendered = replace(
        skeleton,
        activations=act / n_draws,
        predictive_mean=predictive_mean,
        predictive_sd=np.sqrt(predictive_var),
    )
    if per_draw:
        return rendered, stack
    return rendered
