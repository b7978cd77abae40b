"""Fused mixture-of-experts conditional density model.

Affine Gaussian experts are combined through two gates: a softmax mixing
gate that allocates covariate regions to experts, and a logistic behavior
gate whose output ``beta`` interpolates between a competitive mixture of
the experts (``beta -> 1``) and a single collaborative blend of all of
them (``beta -> 0``).

Everything in this module is a pure, deterministic function of parameters
and covariates; the sampling, scoring and explanation layers build on top
of it.  Mixture log-densities go through log-sum-exp so that the extreme
tail values visited by the anomaly score stay finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp, ndtr

__all__ = [
    "ExpertParams",
    "MixingGateParams",
    "BehaviorGateParams",
    "ModelParams",
    "PriorSpec",
    "Dataset",
    "embed",
    "mixing_weights",
    "behavior_beta",
    "fuse_experts",
    "fuse",
    "fused_moments",
    "conditional_pdf",
    "conditional_logpdf",
    "conditional_cdf",
    "conditional_logpdf_rows",
    "conditional_cdf_rows",
    "log_likelihood",
    "log_prior",
    "sample_conditional",
]

LOG_2PI = math.log(2.0 * math.pi)


def _as_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpertParams:
    """One affine Gaussian expert: mean ``intercept + x @ slopes``, sd ``noise_sd``."""

    intercept: float
    slopes: np.ndarray
    noise_sd: float

    def __post_init__(self):
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "slopes", _as_vector(self.slopes, "slopes"))
        object.__setattr__(self, "noise_sd", float(self.noise_sd))
        if not (math.isfinite(self.intercept) and np.isfinite(self.slopes).all()):
            raise ValueError("expert mean coefficients must be finite")
        if not (math.isfinite(self.noise_sd) and self.noise_sd > 0.0):
            raise ValueError(f"noise_sd must be positive and finite, got {self.noise_sd}")

    @property
    def n(self) -> int:
        return self.slopes.shape[0]

    def mean_coeffs(self) -> np.ndarray:
        """Intercept and slopes as a single vector of length n + 1."""
        return np.concatenate(([self.intercept], self.slopes))


@dataclass(frozen=True)
class MixingGateParams:
    """Softmax gate coefficients, one row per expert.

    The last row is identically zero so that the final expert acts as the
    reference level of the softmax; without this constraint the gate is
    only identified up to a common shift of all rows.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2:
            raise ValueError(f"gate matrix must be two-dimensional, got shape {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("gate matrix entries must be finite")
        if not np.all(m[-1] == 0.0):
            raise ValueError("last gate row must be identically zero")
        object.__setattr__(self, "matrix", m)

    @property
    def n_experts(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_embedded(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class BehaviorGateParams:
    """Logistic gate producing the mixing-vs-blending trade-off ``beta``."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = _as_vector(self.coeffs, "coeffs")
        if not np.isfinite(c).all():
            raise ValueError("behavior gate coefficients must be finite")
        object.__setattr__(self, "coeffs", c)


@dataclass(frozen=True)
class ModelParams:
    """One complete parameter point: experts plus both gates."""

    experts: tuple
    mixing: MixingGateParams
    behavior: BehaviorGateParams

    def __post_init__(self):
        experts = tuple(self.experts)
        if not experts:
            raise ValueError("at least one expert is required")
        n = experts[0].n
        if any(e.n != n for e in experts):
            raise ValueError("all experts must share the covariate dimension")
        if self.mixing.matrix.shape != (len(experts), n + 1):
            raise ValueError(
                f"gate matrix shape {self.mixing.matrix.shape} does not match "
                f"{len(experts)} experts with {n} covariates"
            )
        if self.behavior.coeffs.shape != (n + 1,):
            raise ValueError("behavior gate dimension must equal n + 1")
        object.__setattr__(self, "experts", experts)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def n_covariates(self) -> int:
        return self.experts[0].n


@dataclass(frozen=True)
class PriorSpec:
    """Laplace priors on mean and gate coefficients, log-normal on noise sds."""

    mean_coeff_location: float = 0.0
    mean_coeff_scale: float = 1.0
    gate_coeff_location: float = 0.0
    gate_coeff_scale: float = 1.0
    noise_log_location: float = 0.0
    noise_log_scale: float = 1.0

    def __post_init__(self):
        for name in ("mean_coeff_scale", "gate_coeff_scale", "noise_log_scale"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Dataset:
    """Aligned covariate rows, responses and non-decreasing timestamps."""

    covariates: np.ndarray
    responses: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=float)
        y = _as_vector(self.responses, "responses")
        ts = np.asarray(self.timestamps)
        if x.ndim != 2:
            raise ValueError(f"covariates must be a matrix, got shape {x.shape}")
        if not (len(x) == len(y) == len(ts)):
            raise ValueError("covariates, responses and timestamps must align")
        if len(ts) > 1 and np.any(ts[1:] < ts[:-1]):
            raise ValueError("timestamps must be non-decreasing")
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "timestamps", ts)

    def __len__(self) -> int:
        return self.responses.shape[0]

    @property
    def n(self) -> int:
        return self.covariates.shape[1]

    def select(self, idx) -> "Dataset":
        """Row subset; ``idx`` must preserve chronological order."""
        return Dataset(self.covariates[idx], self.responses[idx], self.timestamps[idx])


# ---------------------------------------------------------------------------
# Gates and fusion
# ---------------------------------------------------------------------------


def embed(x) -> np.ndarray:
    """Affine embedding ``[1, x1, ..., xn]`` shared by both gates."""
    x = _as_vector(x, "x")
    return np.concatenate(([1.0], x))


def _embed_rows(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(len(X)), X])


def mixing_weights(params: MixingGateParams, x, embed_fn=embed) -> np.ndarray:
    """Softmax allocation probabilities over experts at covariate ``x``.

    ``embed_fn`` is a hook for alternative shaping functions; only the
    affine embedding ships, and the fitted model family assumes it.
    """
    logits = params.matrix @ embed_fn(x)
    if not np.isfinite(logits).all():
        raise ValueError("non-finite gate logits")
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def behavior_beta(params: BehaviorGateParams, x, embed_fn=embed) -> float:
    """Logistic output in (0, 1): 1 is pure mixing, 0 is pure blending."""
    return float(expit(params.coeffs @ embed_fn(x)))


def fuse_experts(experts, alpha, beta: float) -> list:
    """Interpolate each expert toward the allocation-weighted blend.

    Mean coefficients combine linearly with weight ``beta`` on the expert's
    own values; variances combine the same way under the square root.
    ``beta == 1`` is the identity and is returned without re-rounding.
    """
    experts = list(experts)
    alpha = _as_vector(alpha, "alpha")
    if len(alpha) != len(experts):
        raise ValueError("one mixing weight per expert is required")
    if beta == 1.0:
        return experts
    coeffs = np.stack([e.mean_coeffs() for e in experts])
    variances = np.array([e.noise_sd**2 for e in experts])
    blend_coeffs = alpha @ coeffs
    blend_var = float(alpha @ variances)
    fused = []
    for c, v in zip(coeffs, variances):
        fc = beta * c + (1.0 - beta) * blend_coeffs
        fsd = math.sqrt(beta * v + (1.0 - beta) * blend_var)
        fused.append(ExpertParams(fc[0], fc[1:], fsd))
    return fused


def fuse(params: ModelParams, x) -> list:
    """Fused experts at covariate ``x`` using the model's own gates."""
    alpha = mixing_weights(params.mixing, x)
    beta = behavior_beta(params.behavior, x)
    return fuse_experts(params.experts, alpha, beta)


def _stacked_experts(params: ModelParams):
    coeffs = np.stack([e.mean_coeffs() for e in params.experts])
    sds = np.array([e.noise_sd for e in params.experts])
    return coeffs, sds


def _moments_arrays(coeffs, sds, gate_matrix, behavior_coeffs, phi):
    """Batch gate weights and fused Gaussian moments from raw arrays.

    ``phi`` holds embedded covariate rows.  Returns ``(alpha, means, sds)``
    with one row per data point and one column per expert.
    """
    logits = phi @ gate_matrix.T
    if not np.isfinite(logits).all():
        raise ValueError("non-finite gate logits")
    logits -= logits.max(axis=1, keepdims=True)
    alpha = np.exp(logits)
    alpha /= alpha.sum(axis=1, keepdims=True)
    beta = expit(phi @ behavior_coeffs)[:, None]

    base_means = phi @ coeffs.T
    variances = sds**2
    blend_mean = (alpha * base_means).sum(axis=1, keepdims=True)
    blend_var = (alpha @ variances)[:, None]
    means = beta * base_means + (1.0 - beta) * blend_mean
    fused_var = beta * variances[None, :] + (1.0 - beta) * blend_var
    return alpha, means, np.sqrt(fused_var)


def fused_moments(params: ModelParams, X):
    """Mixing weights and fused per-expert moments at every row of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"X must be a matrix, got shape {X.shape}")
    coeffs, sds = _stacked_experts(params)
    return _moments_arrays(
        coeffs, sds, params.mixing.matrix, params.behavior.coeffs, _embed_rows(X)
    )


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


def _logpdf_from_moments(alpha, means, sds, y):
    z = (y[:, None] - means) / sds
    comp = -0.5 * z * z - np.log(sds) - 0.5 * LOG_2PI
    with np.errstate(divide="ignore"):
        return logsumexp(comp + np.log(alpha), axis=1)


def conditional_logpdf_rows(params: ModelParams, X, y) -> np.ndarray:
    """Log density of each response given the matching covariate row."""
    y = _as_vector(y, "y")
    alpha, means, sds = fused_moments(params, X)
    return _logpdf_from_moments(alpha, means, sds, y)


def conditional_cdf_rows(params: ModelParams, X, y) -> np.ndarray:
    """Mixture CDF of each response given the matching covariate row."""
    y = _as_vector(y, "y")
    alpha, means, sds = fused_moments(params, X)
    return (alpha * ndtr((y[:, None] - means) / sds)).sum(axis=1)


def conditional_logpdf(params: ModelParams, x, y: float) -> float:
    x = _as_vector(x, "x")
    if not math.isfinite(y):
        raise ValueError("y must be finite")
    return float(conditional_logpdf_rows(params, x[None, :], [y])[0])


def conditional_pdf(params: ModelParams, x, y: float) -> float:
    return math.exp(conditional_logpdf(params, x, y))


def conditional_cdf(params: ModelParams, x, y: float) -> float:
    x = _as_vector(x, "x")
    return float(conditional_cdf_rows(params, x[None, :], [y])[0])


def log_likelihood(params: ModelParams, data: Dataset) -> float:
    """Sum of conditional log densities; responses are conditionally independent."""
    if len(data) == 0:
        return 0.0
    return float(conditional_logpdf_rows(params, data.covariates, data.responses).sum())


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


def _laplace_logpdf(values, loc: float, scale: float):
    values = np.asarray(values, dtype=float)
    return -np.log(2.0 * scale) - np.abs(values - loc) / scale


def _lognormal_logpdf(sd, log_loc: float, log_scale: float):
    sd = np.asarray(sd, dtype=float)
    z = (np.log(sd) - log_loc) / log_scale
    return -np.log(sd) - np.log(log_scale) - 0.5 * LOG_2PI - 0.5 * z * z


def log_prior(params: ModelParams, spec: PriorSpec) -> float:
    """Joint log prior density of all free parameters.

    The frozen last gate row carries no prior term; it is a constant of the
    parameterization, not a random quantity.
    """
    total = 0.0
    for e in params.experts:
        if e.noise_sd <= 0.0:
            raise ValueError("noise_sd must be positive")
        total += _laplace_logpdf(
            e.mean_coeffs(), spec.mean_coeff_location, spec.mean_coeff_scale
        ).sum()
        total += float(_lognormal_logpdf(e.noise_sd, spec.noise_log_location, spec.noise_log_scale))
    free_rows = params.mixing.matrix[:-1]
    total += _laplace_logpdf(free_rows, spec.gate_coeff_location, spec.gate_coeff_scale).sum()
    total += _laplace_logpdf(
        params.behavior.coeffs, spec.gate_coeff_location, spec.gate_coeff_scale
    ).sum()
    return float(total)


# ---------------------------------------------------------------------------
# Sampling from the conditional law
# ---------------------------------------------------------------------------


def sample_conditional(params: ModelParams, X, rng: np.random.Generator, return_experts: bool = False):
    """Draw one response per covariate row from the model's conditional law.

    Allocation is sampled from the mixing gate, then the response from the
    sampled expert's fused Gaussian.  With ``return_experts`` the sampled
    allocation indices are returned alongside the responses.
    """
    X = np.asarray(X, dtype=float)
    alpha, means, sds = fused_moments(params, X)
    cum = np.cumsum(alpha, axis=1)
    cum[:, -1] = 1.0  # rounding must not leave a draw above the last bin
    z = (rng.random((len(X), 1)) < cum).argmax(axis=1)
    rows = np.arange(len(X))
    y = rng.normal(means[rows, z], sds[rows, z])
    if return_experts:
        return y, z
    return y
