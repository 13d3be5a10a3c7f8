"""Stage-1 robust per-class estimation (MRCD) and prior elicitation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .core import Dataset, Hyperparams, NIWParams, cholesky_spd, mahalanobis_sq, niw_from_moments

logger = logging.getLogger(__name__)


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class MRCDConfig:
    h_frac: float = 0.75
    rho: float = 0.1
    n_starts: int = 50
    n_keep: int = 10
    pre_steps: int = 2
    max_csteps: int = 100

    def __post_init__(self):
        if not 0.5 < self.h_frac <= 1.0:
            raise ValueError(f"h_frac must lie in (0.5, 1], got {self.h_frac}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")


@dataclass
class RobustEstimate:
    class_id: int
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    h_subset: np.ndarray
    objective: float = float("nan")


def consistency_factor(h: int, n: int, p: int) -> float:
    """Chi-square correction making the h-subset covariance consistent at the normal."""
    frac = h / n
    if frac >= 1.0:
        return 1.0
    quantile = stats.chi2.ppf(frac, p)
    return frac / stats.chi2.cdf(quantile, p + 2)


def _regularized(x, subset, rho, target, cfactor):
    sub = x[subset]
    mu = sub.mean(axis=0)
    cov = np.cov(sub, rowvar=False, bias=True).reshape(x.shape[1], x.shape[1])
    return mu, rho * target + (1.0 - rho) * cfactor * cov


def mrcd_objective(x, subset, rho, target, cfactor: float = 1.0) -> float:
    """Log-determinant of the regularized covariance of ``x[subset]``."""
    _, sigma = _regularized(x, np.asarray(subset), rho, target, cfactor)
    return 2.0 * float(np.sum(np.log(np.diag(cholesky_spd(sigma, "regularized covariance")))))


def c_step(x, current_subset, rho, target, cfactor: float = 1.0) -> np.ndarray:
    """One concentration step: keep the h points closest under the current fit."""
    current_subset = np.asarray(current_subset)
    h = len(current_subset)
    n = len(x)
    if h >= n:
        return np.arange(n)
    mu, sigma = _regularized(x, current_subset, rho, target, cfactor)
    dist = mahalanobis_sq(x, mu, cholesky_spd(sigma, "regularized covariance"))
    return np.sort(np.argsort(dist, kind="stable")[:h])


def _concentrate(x, subset, rho, target, cfactor, max_steps):
    obj = mrcd_objective(x, subset, rho, target, cfactor)
    for _ in range(max_steps):
        new = c_step(x, subset, rho, target, cfactor)
        if np.array_equal(new, subset):
            break
        new_obj = mrcd_objective(x, new, rho, target, cfactor)
        subset, obj = new, new_obj
    return subset, obj


def mrcd_estimate(x, h_frac: float = 0.75, rho: float = 0.1, target=None,
                  config: Optional[MRCDConfig] = None, rng=None,
                  class_id: int = 0) -> RobustEstimate:
    """Minimum regularized covariance determinant location and scatter.

    Elemental starts of size p + 1 are concentrated for a couple of steps, the
    best few are iterated to a fixed point, and the lowest objective wins
    (ties broken by start index).
    """
    x = np.asarray(x, dtype=float)
    if config is None:
        config = MRCDConfig(h_frac=h_frac, rho=rho)
    n, p = x.shape
    if n < 2:
        raise InsufficientDataError(f"class {class_id}: MRCD needs at least 2 observations, got {n}")
    target = np.eye(p) if target is None else np.asarray(target, dtype=float)
    cholesky_spd(target, "MRCD target")
    rng = np.random.default_rng(rng)
    h = min(n, math.ceil(config.h_frac * n))
    cfactor = consistency_factor(h, n, p)
    rho = config.rho

    if h == n:
        subset = np.arange(n)
        candidates = [(mrcd_objective(x, subset, rho, target, cfactor), 0, subset)]
    else:
        size = min(p + 1, n)
        candidates = []
        for start in range(config.n_starts):
            elemental = np.sort(rng.choice(n, size=size, replace=False))
            mu, sigma = _regularized(x, elemental, rho, target, cfactor)
            dist = mahalanobis_sq(x, mu, cholesky_spd(sigma, "regularized covariance"))
            subset = np.sort(np.argsort(dist, kind="stable")[:h])
            subset, obj = _concentrate(x, subset, rho, target, cfactor, config.pre_steps)
            candidates.append((obj, start, subset))
        candidates.sort(key=lambda c: (c[0], c[1]))
        refined = []
        for obj, start, subset in candidates[:config.n_keep]:
            subset, obj = _concentrate(x, subset, rho, target, cfactor, config.max_csteps)
            refined.append((obj, start, subset))
        refined.sort(key=lambda c: (c[0], c[1]))
        candidates = refined

    obj, _, subset = candidates[0]
    mu, sigma = _regularized(x, subset, rho, target, cfactor)
    return RobustEstimate(class_id=class_id, mu_hat=mu, sigma_hat=0.5 * (sigma + sigma.T),
                          h_subset=subset, objective=obj)


def robust_class_estimates(train: Dataset, config: Optional[MRCDConfig] = None,
                           seed: int = 0) -> list:
    """MRCD estimate per training class; small classes fall back to a regularized full-sample fit."""
    config = config or MRCDConfig()
    p = train.dim
    target = np.eye(p)
    out = []
    for j in range(1, train.n_classes + 1):
        block = train.class_block(j)
        rng = np.random.default_rng([seed, j])
        if len(block) < p + 2:
            logger.warning("class %d has %d < p + 2 observations; using the regularized "
                           "full-sample estimate", j, len(block))
            mu = block.mean(axis=0)
            cov = np.cov(block, rowvar=False, bias=True).reshape(p, p) if len(block) > 1 else np.zeros((p, p))
            sigma = config.rho * target + (1.0 - config.rho) * cov
            out.append(RobustEstimate(j, mu, sigma, np.arange(len(block))))
        else:
            out.append(mrcd_estimate(block, config=config, target=target, rng=rng, class_id=j))
    return out


def elicit_known_priors(train: Dataset, lambda_obs: float = 200.0, dof_offset: int = 200,
                        estimates: Optional[list] = None, config: Optional[MRCDConfig] = None,
                        seed: int = 0) -> list:
    """One NIW prior per known class centred on its robust estimate.

    The scale matrix is set so the implied E[Sigma] equals the robust scatter.
    """
    if estimates is None:
        estimates = robust_class_estimates(train, config=config, seed=seed)
    p = train.dim
    dof = p + 1 + dof_offset
    return [niw_from_moments(est.mu_hat, est.sigma_hat, lambda_obs, dof) for est in estimates]


NOVELTY_SCALE_SOURCES = ("overall", "within")


def novelty_prior(train: Dataset, precision_scale: float = 0.1, dof: Optional[float] = None,
                  scale_factor: Optional[float] = None, scale_source: str = "overall") -> NIWParams:
    """Vague novelty prior centred at the training grand mean.

    The scale is ``scale_factor`` (default p + 1) times a training covariance:
    the overall sample covariance (``"overall"``) or the pooled within-class
    covariance (``"within"``). The latter leaves out the between-class spread,
    so novelty clusters are expected to be about as wide as the known ones.
    """
    if scale_source not in NOVELTY_SCALE_SOURCES:
        raise ValueError(f"scale_source must be one of {NOVELTY_SCALE_SOURCES}, got {scale_source!r}")
    p = train.dim
    dof = p + 2 if dof is None else dof
    scale_factor = p + 1 if scale_factor is None else scale_factor
    if scale_source == "overall":
        cov = np.cov(train.train_x, rowvar=False).reshape(p, p)
    else:
        n, J = len(train.train_x), train.n_classes
        if n <= J:
            raise InsufficientDataError("pooled within-class covariance needs more rows than classes")
        scatter = np.zeros((p, p))
        for j in range(1, J + 1):
            block = train.class_block(j)
            centred = block - block.mean(axis=0)
            scatter += centred.T @ centred
        cov = scatter / (n - J)
    return NIWParams(mean=train.train_x.mean(axis=0), precision_scale=precision_scale,
                     dof=dof, scale=scale_factor * cov)


def default_hyperparams(train: Dataset, truncation: int = 10, gamma: float = 5.0,
                        alpha: float = 0.1, lambda_nov: float = 0.1,
                        dof_nov: Optional[float] = None, nov_scale_factor: Optional[float] = None,
                        lambda_obs: float = 200.0, dof_offset: int = 200,
                        mrcd: Optional[MRCDConfig] = None, seed: int = 0,
                        nov_scale_source: str = "overall") -> Hyperparams:
    """All priors of the model, derived from a labeled training set."""
    known = elicit_known_priors(train, lambda_obs=lambda_obs, dof_offset=dof_offset,
                                config=mrcd, seed=seed)
    return Hyperparams(
        alpha=np.full(train.n_classes + 1, float(alpha)),
        gamma=gamma,
        known_priors=known,
        novelty_prior=novelty_prior(train, lambda_nov, dof_nov, nov_scale_factor, nov_scale_source),
        truncation=truncation,
    )
