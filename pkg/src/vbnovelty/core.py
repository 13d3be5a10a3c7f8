"""Model types and closed-form expectations for the NIW / Dirichlet / Beta pieces.

Parameterization used throughout: ``Sigma ~ IW(scale, dof)`` and
``mu | Sigma ~ N(mean, Sigma / precision_scale)``, so that
``Sigma^{-1} ~ Wishart(scale^{-1}, dof)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, multigammaln

LOG_2PI = np.log(2.0 * np.pi)
LOG_2 = np.log(2.0)


class FactorizationError(ValueError):
    """Raised when a matrix that must be SPD has no Cholesky factor."""


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------

def cholesky_spd(a, role: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise FactorizationError(f"{role} must be square, got shape {a.shape}")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"{role} is not symmetric positive definite") from exc


def logdet_spd(a, role: str = "matrix") -> float:
    """Log-determinant of an SPD matrix via its Cholesky factor."""
    chol = cholesky_spd(a, role)
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


# Bernoulli-number coefficients B_2k / (2k) for the asymptotic expansion.
_DIGAMMA_COEFFS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
_DIGAMMA_SHIFT = 6.0


def digamma(x):
    """Digamma function for positive arguments.

    Shifts the argument to ``x >= 6`` with the recurrence
    ``psi(x) = psi(x + 1) - 1/x`` and then sums the asymptotic series.
    Accepts scalars or arrays; returns the same shape (a float for scalars).
    """
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("digamma is only defined here for x > 0")
    z = arr.copy()
    acc = np.zeros_like(z)
    while True:
        small = z < _DIGAMMA_SHIFT
        if not np.any(small):
            break
        acc = acc - np.where(small, 1.0 / z, 0.0)
        z = np.where(small, z + 1.0, z)
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for coeff in reversed(_DIGAMMA_COEFFS):
        series = (series + coeff) * inv2
    out = np.log(z) - 0.5 / z - series + acc
    if out.ndim == 0:
        return float(out)
    return out


def _multi_digamma(dof: float, p: int) -> float:
    # sum_{l=1}^p psi((dof - l + 1) / 2)
    return float(np.sum(digamma((dof - np.arange(p)) / 2.0)))


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NIWParams:
    """Normal-Inverse-Wishart parameters (mean, precision_scale, dof, scale)."""

    mean: np.ndarray
    precision_scale: float
    dof: float
    scale: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        scale = np.array(self.scale, dtype=float)
        p = mean.shape[0]
        if scale.shape != (p, p):
            raise ValueError(f"scale must be {p}x{p}, got {scale.shape}")
        if not self.precision_scale > 0:
            raise ValueError("precision_scale must be positive")
        if not self.dof > p - 1:
            raise ValueError(f"dof must exceed p - 1 = {p - 1}, got {self.dof}")
        if not np.allclose(scale, scale.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(scale).max())):
            raise ValueError("scale must be symmetric")
        scale = 0.5 * (scale + scale.T)
        mean.flags.writeable = False
        scale.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "precision_scale", float(self.precision_scale))
        object.__setattr__(self, "dof", float(self.dof))
        # fail early on non-SPD scale
        _ = self.chol

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @cached_property
    def chol(self) -> np.ndarray:
        return cholesky_spd(self.scale, "NIW scale matrix")

    @cached_property
    def logdet_scale(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @cached_property
    def scale_inv(self) -> np.ndarray:
        inv_chol = solve_triangular(self.chol, np.eye(self.dim), lower=True)
        return inv_chol.T @ inv_chol

    def expected_covariance(self) -> np.ndarray:
        if self.dof <= self.dim + 1:
            raise ValueError("E[Sigma] is finite only for dof > p + 1")
        return self.scale / (self.dof - self.dim - 1)

    def replace(self, **changes) -> "NIWParams":
        fields = dict(mean=self.mean, precision_scale=self.precision_scale,
                      dof=self.dof, scale=self.scale)
        fields.update(changes)
        return NIWParams(**fields)

    def __repr__(self):
        return (f"NIWParams(p={self.dim}, precision_scale={self.precision_scale:.6g}, "
                f"dof={self.dof:.6g})")


@dataclass
class Hyperparams:
    """Prior hyperparameters of the two-stage mixture.

    ``alpha[0]`` is the Dirichlet weight of the novelty term, ``alpha[1:]``
    the known classes.
    """

    alpha: np.ndarray
    gamma: float
    known_priors: list
    novelty_prior: NIWParams
    truncation: int = 10

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        self.known_priors = list(self.known_priors)
        if np.any(self.alpha <= 0):
            raise ValueError("all alpha entries must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if int(self.truncation) != self.truncation or self.truncation < 1:
            raise ValueError("truncation must be a positive integer")
        self.truncation = int(self.truncation)
        if len(self.alpha) != len(self.known_priors) + 1:
            raise ValueError("alpha must have J + 1 entries for J known priors")
        dims = {prior.dim for prior in self.known_priors} | {self.novelty_prior.dim}
        if len(dims) != 1:
            raise ValueError("all NIW priors must share the same dimension")

    @property
    def n_known(self) -> int:
        return len(self.known_priors)

    @property
    def n_components(self) -> int:
        return self.n_known + self.truncation

    @property
    def dim(self) -> int:
        return self.novelty_prior.dim

    def prior_for(self, k: int) -> NIWParams:
        """Prior of component ``k`` (0-based: ``k < J`` known, else novelty)."""
        return self.known_priors[k] if k < self.n_known else self.novelty_prior


@dataclass
class VariationalState:
    eta: np.ndarray
    stick_a: np.ndarray
    stick_b: np.ndarray
    obs_niw: list
    nov_niw: list
    resp: np.ndarray

    @property
    def niws(self) -> list:
        return list(self.obs_niw) + list(self.nov_niw)

    def copy(self) -> "VariationalState":
        return VariationalState(
            eta=self.eta.copy(), stick_a=self.stick_a.copy(), stick_b=self.stick_b.copy(),
            obs_niw=list(self.obs_niw), nov_niw=list(self.nov_niw), resp=self.resp.copy(),
        )


@dataclass
class Dataset:
    """Labeled training block plus unlabeled test block.

    Class ids are 1-based. ``test_labels`` (evaluation only) use the training
    ids for known classes and ids above J for classes absent from training.
    """

    train_x: np.ndarray
    train_labels: np.ndarray
    test_x: np.ndarray
    test_labels: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_x = np.atleast_2d(np.asarray(self.train_x, dtype=float))
        self.test_x = np.atleast_2d(np.asarray(self.test_x, dtype=float))
        self.train_labels = np.asarray(self.train_labels).astype(int).reshape(-1)
        if self.test_labels is not None:
            self.test_labels = np.asarray(self.test_labels).astype(int).reshape(-1)
            if len(self.test_labels) != len(self.test_x):
                raise ValueError("test_labels length differs from test_x rows")
        n, p = self.train_x.shape
        if n < 1 or len(self.test_x) < 1 or p < 1:
            raise ValueError("train and test blocks must be non-empty")
        if self.test_x.shape[1] != p:
            raise ValueError("train and test blocks differ in dimension")
        if len(self.train_labels) != n:
            raise ValueError("train_labels length differs from train_x rows")
        present = set(np.unique(self.train_labels).tolist())
        expected = set(range(1, max(present) + 1))
        if present != expected:
            raise ValueError(f"training class ids must be exactly 1..J, got {sorted(present)}")

    @property
    def n_classes(self) -> int:
        return int(self.train_labels.max())

    @property
    def dim(self) -> int:
        return self.train_x.shape[1]

    def class_block(self, j: int) -> np.ndarray:
        return self.train_x[self.train_labels == j]


# ---------------------------------------------------------------------------
# expectations under the variational factors
# ---------------------------------------------------------------------------

def expected_log_dirichlet(eta) -> np.ndarray:
    """E[log pi_k] for every component of a Dirichlet(eta)."""
    eta = np.asarray(eta, dtype=float)
    if np.any(eta <= 0):
        raise ValueError("Dirichlet parameters must be positive")
    return digamma(eta) - digamma(eta.sum())


def expected_log_dirichlet_component(eta, k: int) -> float:
    eta = np.asarray(eta, dtype=float)
    if not 0 <= k < len(eta):
        raise IndexError(f"component {k} out of range for {len(eta)} Dirichlet parameters")
    return float(expected_log_dirichlet(eta)[k])


def expected_log_stick(a, b):
    """(E[log v], E[log(1 - v)]) for v ~ Beta(a, b); vectorized."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("Beta parameters must be positive")
    total = digamma(a + b)
    return digamma(a) - total, digamma(b) - total


def expected_log_stick_weights(stick_a, stick_b) -> np.ndarray:
    """E[log w_k], k = 1..T, for truncated stick-breaking with v_T = 1.

    ``w_k = v_k prod_{l<k} (1 - v_l)``; the T-1 free sticks are Beta(a, b).
    """
    stick_a = np.asarray(stick_a, dtype=float).reshape(-1)
    stick_b = np.asarray(stick_b, dtype=float).reshape(-1)
    if len(stick_a) == 0:
        return np.zeros(1)
    e_log_v, e_log_1mv = expected_log_stick(stick_a, stick_b)
    out = np.zeros(len(stick_a) + 1)
    out[:-1] = e_log_v
    out[1:] += np.cumsum(e_log_1mv)
    return out


def expected_logdet_precision(niw: NIWParams) -> float:
    """E[log |Sigma^{-1}|] with Sigma^{-1} ~ Wishart(scale^{-1}, dof)."""
    p = niw.dim
    return _multi_digamma(niw.dof, p) + p * LOG_2 - niw.logdet_scale


def mahalanobis_sq(y, mean, chol) -> np.ndarray:
    """Rows of ``(y - mean)^T (L L^T)^{-1} (y - mean)`` for lower factor ``chol``."""
    y = np.atleast_2d(y)
    z = solve_triangular(chol, (y - mean).T, lower=True, check_finite=False)
    return np.einsum("ij,ij->j", z, z)


def expected_gaussian_loglik(y, niw: NIWParams):
    """E_q[log N(y | mu, Sigma)] for (mu, Sigma) ~ NIW; vectorized over rows of ``y``."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    p = niw.dim
    if y.shape[-1] != p:
        raise ValueError(f"observation dimension {y.shape[-1]} differs from NIW dimension {p}")
    quad = mahalanobis_sq(y, niw.mean, niw.chol)
    out = 0.5 * (-p * LOG_2PI + expected_logdet_precision(niw)) \
        - 0.5 * (p / niw.precision_scale + niw.dof * quad)
    return float(out[0]) if single else out


def expected_log_niw_prior(post: NIWParams, prior: NIWParams) -> float:
    """E_post[log NIW(mu, Sigma | prior)], including every normalizing constant."""
    p = post.dim
    if prior.dim != p:
        raise ValueError(f"dimension mismatch: {p} vs {prior.dim}")
    e_logdet = expected_logdet_precision(post)
    diff = post.mean - prior.mean
    quad = float(mahalanobis_sq(diff[None, :], np.zeros(p), post.chol)[0])
    trace = float(np.sum(prior.scale * post.scale_inv))
    log_normal = 0.5 * (p * np.log(prior.precision_scale / (2.0 * np.pi)) + e_logdet
                        - p * prior.precision_scale / post.precision_scale
                        - prior.precision_scale * post.dof * quad)
    log_iw = (0.5 * prior.dof * prior.logdet_scale - 0.5 * prior.dof * p * LOG_2
              - multigammaln(0.5 * prior.dof, p)
              + 0.5 * (prior.dof + p + 1) * e_logdet
              - 0.5 * post.dof * trace)
    return log_normal + log_iw


def niw_variational_self_term(post: NIWParams) -> float:
    """E_post[log NIW(mu, Sigma | post)], i.e. the negative NIW entropy."""
    p = post.dim
    e_logdet = expected_logdet_precision(post)
    return (0.5 * p * np.log(post.precision_scale / (2.0 * np.pi)) - 0.5 * p
            + 0.5 * post.dof * post.logdet_scale - 0.5 * post.dof * p * LOG_2
            - multigammaln(0.5 * post.dof, p)
            + 0.5 * (post.dof + p + 2) * e_logdet
            - 0.5 * post.dof * p)


def log_dirichlet_normalizer(alpha) -> float:
    alpha = np.asarray(alpha, dtype=float)
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum())


def log_beta_normalizer(a, b):
    return gammaln(np.asarray(a) + np.asarray(b)) - gammaln(a) - gammaln(b)


def weighted_niw_update(prior: NIWParams, y: np.ndarray, weights: np.ndarray) -> NIWParams:
    """Conjugate NIW update with soft (or hard 0/1) observation weights.

    An empty component (total weight 0) returns ``prior`` unchanged.
    """
    weights = np.asarray(weights, dtype=float)
    n_k = float(weights.sum())
    if n_k <= 0.0:
        return prior
    lam = prior.precision_scale
    ybar = weights @ y / n_k
    centered = y - ybar
    scatter = (centered * weights[:, None]).T @ centered
    dev = ybar - prior.mean
    scale = prior.scale + scatter + (lam * n_k / (lam + n_k)) * np.outer(dev, dev)
    mean = (lam * prior.mean + weights @ y) / (lam + n_k)
    return NIWParams(mean=mean, precision_scale=lam + n_k, dof=prior.dof + n_k, scale=scale)


def niw_from_moments(mean, covariance, precision_scale: float, dof: float) -> NIWParams:
    """NIW whose inverse-Wishart part has expectation ``covariance``."""
    covariance = np.asarray(covariance, dtype=float)
    p = covariance.shape[0]
    if dof <= p + 1:
        raise ValueError("dof must exceed p + 1 for a finite expected covariance")
    return NIWParams(mean=mean, precision_scale=precision_scale, dof=dof,
                     scale=(dof - p - 1) * covariance)


def stack_component_loglik(y: np.ndarray, niws: Sequence[NIWParams]) -> np.ndarray:
    """M x K matrix of expected Gaussian log-likelihoods."""
    return np.column_stack([expected_gaussian_loglik(y, niw) for niw in niws])
