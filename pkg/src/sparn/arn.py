"""A single sparse autoregressive network.

The joint density factors into per-dimension conditionals under a fixed
variable order: logistic regressions for binary data, Gaussians with a
constant conditional standard deviation for continuous data.  Each
conditional is fitted independently, so training parallelizes perfectly
across dimensions.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Dataset, EncodingMeta
from .solvers import (
    ConvergenceWarning,
    SolverConfig,
    SparseWeights,
    _fit_linear_core,
    _fit_logistic_core,
)

SIGMA_FLOOR = 1e-3

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LogisticConditional:
    """P(x_d = +1 | x_{1:d-1}) = sigmoid(intercept + weights . x)."""

    weights: SparseWeights


@dataclass(frozen=True)
class GaussianConditional:
    """x_d | x_{1:d-1} ~ Normal(weights . x, sigma^2); sigma floored at 1e-3."""

    weights: SparseWeights
    sigma: float

    def __post_init__(self):
        if self.sigma < SIGMA_FLOOR:
            raise ValueError(f"sigma must be >= {SIGMA_FLOOR}")


@dataclass(frozen=True)
class AutoregressiveNet:
    kind: str
    conditionals: tuple
    meta: EncodingMeta | None = None

    def __post_init__(self):
        object.__setattr__(self, "conditionals", tuple(self.conditionals))
        if self.kind not in ("binary", "continuous"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if not self.conditionals:
            raise ValueError("a network needs at least one dimension")
        for d, cond in enumerate(self.conditionals):
            if cond.weights.n_predictors != d:
                raise ValueError(f"conditional {d} must have exactly {d} predictors")

    @property
    def d(self) -> int:
        return len(self.conditionals)


def binary_logmass(y: np.ndarray, score) -> np.ndarray:
    """log P(y | score) for y in {-1,+1} under a logistic conditional."""
    return -np.logaddexp(0.0, -y * score)


def gaussian_logdensity(y: np.ndarray, mean, sigma: float) -> np.ndarray:
    return -0.5 * (LOG2PI + 2.0 * math.log(sigma)) - (y - mean) ** 2 / (2.0 * sigma * sigma)


def residual_sigma(y: np.ndarray, mean: np.ndarray, w: np.ndarray) -> float:
    """Weighted RMS residual, floored; no degrees-of-freedom correction."""
    wsum = float(w.sum())
    if wsum <= 0:
        return SIGMA_FLOOR
    ms = float(w @ (y - mean) ** 2) / wsum
    return max(math.sqrt(ms), SIGMA_FLOOR)


def _fit_dimension(XT, y, d, kind, cfg, w, unit_sq, warm=None):
    """Fit conditional d on predictors 0..d-1.  Returns (conditional, status)."""
    wc = warm.dense() if warm is not None else None
    wi = warm.intercept if warm is not None else 0.0
    if kind == "binary":
        coef, icpt, _, _, status = _fit_logistic_core(
            XT[:d], y, w, cfg, wc, wi, fit_icpt=True, unit_sq=unit_sq)
        return LogisticConditional(SparseWeights.from_dense(coef, icpt)), status
    coef, icpt, status = _fit_linear_core(XT[:d], y, w, cfg, wc, fit_icpt=False)
    sw = SparseWeights.from_dense(coef, icpt)
    mean = icpt + coef @ XT[:d] if d else np.zeros(y.shape[0])
    sigma = residual_sigma(y, mean, w)
    return GaussianConditional(sw, sigma), status


def fit_arn(train: Dataset, cfg: SolverConfig, n_workers: int = 1,
            sample_weights: np.ndarray | None = None,
            warm: AutoregressiveNet | None = None) -> AutoregressiveNet:
    """Fit all D conditionals independently, in parallel across dimensions.

    Results are assembled by dimension index, so the model is identical for
    any worker count.  Solver warnings are re-raised with the dimension
    attached.  ``warm`` seeds each conditional from a previous fit, the cheap
    way to walk a descending penalty path.
    """
    values = train.values
    n, d_total = values.shape
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    xt = np.ascontiguousarray(values.T)
    unit_sq = train.kind == "binary"

    def fit_one(d):
        start = warm.conditionals[d].weights if warm is not None else None
        return _fit_dimension(xt, values[:, d], d, train.kind, cfg, w, unit_sq,
                              warm=start)

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(fit_one, range(d_total)))
    else:
        results = [fit_one(d) for d in range(d_total)]

    conds = []
    for d, (cond, status) in enumerate(results):
        conds.append(cond)
        if status.message:
            warnings.warn(f"dimension {d}: {status.message}", ConvergenceWarning,
                          stacklevel=2)
    return AutoregressiveNet(kind=train.kind, conditionals=tuple(conds), meta=train.meta)


def loglik_arn(model: AutoregressiveNet, x: np.ndarray):
    """Per-sample log-likelihood in nats; accepts one sample or an (N, D) matrix.

    Continuous values are scored in standardized space; add the Jacobian
    correction sum(log std_j) from the encoding metadata to recover raw-space
    values.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.d:
        raise ValueError(f"model has {model.d} dimensions, data has {X.shape[1]}")
    total = np.zeros(X.shape[0])
    for d, cond in enumerate(model.conditionals):
        score = cond.weights.scores(X)
        if model.kind == "binary":
            total += binary_logmass(X[:, d], score)
        else:
            total += gaussian_logdensity(X[:, d], score, cond.sigma)
    return float(total[0]) if single else total


def sample_arn(model: AutoregressiveNet, rng, n_samples: int = 1) -> np.ndarray:
    """Ancestral sampling: dimensions drawn in order given earlier draws.

    ``rng`` is a seed or a numpy Generator; a fixed seed yields identical
    samples.  Returns an (n_samples, D) matrix in encoded space.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    out = np.empty((n_samples, model.d))
    for i in range(n_samples):
        x = out[i]
        for d, cond in enumerate(model.conditionals):
            score = cond.weights.score_one(x[:d])
            if model.kind == "binary":
                x[d] = 1.0 if rng.random() < expit(score) else -1.0
            else:
                x[d] = score + cond.sigma * rng.standard_normal()
    return out
