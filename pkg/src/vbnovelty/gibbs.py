"""Truncated blocked Gibbs sampler for the known-plus-novelty mixture.

Desk-scale oracle for the variational fit. The novelty stick-breaking prior is
truncated at ``T'`` components with the last stick fixed to one. Labels are
1-based: ``1..J`` known, ``J+1..J+T'`` novelty.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from .core import Hyperparams, NIWParams

LOG_2PI = np.log(2.0 * np.pi)


class GibbsDegeneracyError(RuntimeError):
    pass


@dataclass
class GibbsState:
    labels: np.ndarray        # M, values in 1..J+T'
    pi: np.ndarray            # J+1, pi[0] is the novelty weight
    sticks: np.ndarray        # T'-1
    means: np.ndarray         # (J+T') x p
    covs: np.ndarray          # (J+T') x p x p
    log_pi: Optional[np.ndarray] = None
    log_sticks: Optional[np.ndarray] = None
    log_1m_sticks: Optional[np.ndarray] = None

    def log_weights(self, n_known: int) -> np.ndarray:
        """log of the J known weights followed by the T' novelty weights."""
        log_pi = np.log(self.pi) if self.log_pi is None else self.log_pi
        log_v = np.log(self.sticks) if self.log_sticks is None else self.log_sticks
        log_1mv = np.log1p(-self.sticks) if self.log_1m_sticks is None else self.log_1m_sticks
        nov = np.zeros(len(log_v) + 1)
        nov[:-1] = log_v
        nov[1:] += np.cumsum(log_1mv)
        return np.concatenate([log_pi[1:], log_pi[0] + nov])


@dataclass
class GibbsResult:
    coclustering: np.ndarray
    occupancy: np.ndarray         # kept iterations x (J+T') counts
    label_frequency: np.ndarray   # M x (J+T')
    point_labels: np.ndarray      # modal label per observation, 1-based
    posterior_means: np.ndarray   # (J+T') x p, averaged over kept iterations
    matched_means: Optional[dict]  # reference cluster -> mean of its plurality atom, averaged
    n_kept: int
    seconds: float
    final_state: GibbsState


# ---------------------------------------------------------------------------
# random variates
# ---------------------------------------------------------------------------

def _log_gamma_variates(rng, shape):
    # log G for G ~ Gamma(shape, 1); stable for tiny shapes via G = G' U^{1/shape}
    shape = np.asarray(shape, dtype=float)
    small = shape < 1.0
    g = rng.standard_gamma(np.where(small, shape + 1.0, shape))
    out = np.log(g)
    if np.any(small):
        u = rng.uniform(size=shape.shape)
        out = np.where(small, out + np.log(u) / np.where(small, shape, 1.0), out)
    return out


def log_dirichlet_draw(rng, alpha) -> np.ndarray:
    log_g = _log_gamma_variates(rng, alpha)
    top = log_g.max()
    return log_g - (top + np.log(np.exp(log_g - top).sum()))


def log_beta_draw(rng, a, b):
    """(log v, log(1 - v)) for v ~ Beta(a, b), elementwise."""
    la = _log_gamma_variates(rng, a)
    lb = _log_gamma_variates(rng, b)
    top = np.maximum(la, lb)
    norm = top + np.log(np.exp(la - top) + np.exp(lb - top))
    return la - norm, lb - norm


def sample_niw(niw: NIWParams, rng) -> tuple:
    """One (mean, covariance) draw, Bartlett decomposition for the inverse-Wishart."""
    p = niw.dim
    bartlett = np.tril(rng.standard_normal((p, p)), -1)
    bartlett[np.diag_indices(p)] = np.sqrt(rng.chisquare(niw.dof - np.arange(p)))
    # Sigma = L A^{-T} A^{-1} L^T with scale = L L^T
    x = solve_triangular(bartlett, niw.chol.T, lower=True)
    cov = x.T @ x
    cov = 0.5 * (cov + cov.T)
    mean = niw.mean + np.linalg.cholesky(cov / niw.precision_scale) @ rng.standard_normal(p)
    return mean, cov


def hard_niw_posterior(prior: NIWParams, y: np.ndarray) -> NIWParams:
    """Conjugate posterior from hard-assigned rows (raw-moment form)."""
    n = len(y)
    if n == 0:
        return prior
    lam0, mu0 = prior.precision_scale, prior.mean
    total = y.sum(axis=0)
    lam_n = lam0 + n
    mu_n = (lam0 * mu0 + total) / lam_n
    # Psi_n = Psi_0 + sum y y^T + lam0 mu0 mu0^T - lam_n mu_n mu_n^T
    scale = prior.scale + y.T @ y + lam0 * np.outer(mu0, mu0) - lam_n * np.outer(mu_n, mu_n)
    return NIWParams(mean=mu_n, precision_scale=lam_n, dof=prior.dof + n, scale=0.5 * (scale + scale.T))


# ---------------------------------------------------------------------------
# conditional updates
# ---------------------------------------------------------------------------

def gaussian_logpdf_matrix(y, means, covs) -> np.ndarray:
    """M x K matrix of log N(y_m | mean_k, cov_k)."""
    M, p = y.shape
    out = np.empty((M, len(means)))
    for k, (mu, cov) in enumerate(zip(means, covs)):
        chol = np.linalg.cholesky(cov)
        z = solve_triangular(chol, (y - mu).T, lower=True, check_finite=False)
        out[:, k] = -0.5 * (p * LOG_2PI + np.einsum("ij,ij->j", z, z)) - np.sum(np.log(np.diag(chol)))
    return out


def label_log_probs(state: GibbsState, y, hyper: Hyperparams) -> np.ndarray:
    """Normalized log P[label_m = k | rest], M x (J+T')."""
    logits = gaussian_logpdf_matrix(y, state.means, state.covs) + state.log_weights(hyper.n_known)
    top = logits.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        m = int(np.flatnonzero(~np.isfinite(top[:, 0]))[0])
        raise GibbsDegeneracyError(f"observation {m}: every label has zero mass")
    return logits - (top + np.log(np.exp(logits - top).sum(axis=1, keepdims=True)))


def sample_labels(state: GibbsState, y, hyper: Hyperparams, rng) -> np.ndarray:
    prob = np.exp(label_log_probs(state, y, hyper))
    cdf = np.cumsum(prob, axis=1)
    u = rng.uniform(size=(len(y), 1)) * cdf[:, -1:]
    return np.minimum((u > cdf).sum(axis=1), prob.shape[1] - 1) + 1


def _counts(labels, n_comp):
    return np.bincount(labels - 1, minlength=n_comp)


def sample_weights(state: GibbsState, hyper: Hyperparams, rng, truncation: int):
    """Draw (pi, sticks) given the labels; returns log-scale draws as well."""
    J = hyper.n_known
    counts = _counts(state.labels, J + truncation)
    nov = counts[J:]
    dir_counts = np.concatenate([[nov.sum()], counts[:J]])
    log_pi = log_dirichlet_draw(rng, hyper.alpha + dir_counts)
    tail = np.cumsum(nov[::-1])[::-1]
    log_v, log_1mv = log_beta_draw(rng, nov[:-1] + 1.0, hyper.gamma + tail[1:])
    return log_pi, log_v, log_1mv


def sample_atoms(state: GibbsState, y, hyper: Hyperparams, rng, truncation: int):
    J = hyper.n_known
    means = np.empty((J + truncation, y.shape[1]))
    covs = np.empty((J + truncation, y.shape[1], y.shape[1]))
    for k in range(J + truncation):
        post = hard_niw_posterior(hyper.prior_for(k), y[state.labels == k + 1])
        means[k], covs[k] = sample_niw(post, rng)
    return means, covs


def initial_state(y, hyper: Hyperparams, truncation: int, rng) -> GibbsState:
    """Known atoms at their prior centres, novelty atoms at k-means centres."""
    from sklearn.cluster import KMeans

    J = hyper.n_known
    p = y.shape[1]
    k = min(truncation, len(y))
    centers = KMeans(n_clusters=k, n_init=3, random_state=int(rng.integers(2**31))).fit(y).cluster_centers_
    nov_cov = np.cov(y, rowvar=False).reshape(p, p) + 1e-6 * np.eye(p)
    means = [prior.mean for prior in hyper.known_priors]
    covs = [prior.scale / max(prior.dof - p - 1, 1.0) for prior in hyper.known_priors]
    for t in range(truncation):
        means.append(centers[t % k])
        covs.append(nov_cov)
    pi = np.full(J + 1, 1.0 / (J + 1))
    sticks = np.full(truncation - 1, 1.0 / (1.0 + hyper.gamma))
    state = GibbsState(labels=np.ones(len(y), dtype=int), pi=pi, sticks=sticks,
                       means=np.asarray(means), covs=np.asarray(covs))
    state.labels = sample_labels(state, y, hyper, rng)
    return state


def gibbs_step(state: GibbsState, y, hyper: Hyperparams, rng, truncation: int) -> GibbsState:
    state.labels = sample_labels(state, y, hyper, rng)
    state.log_pi, state.log_sticks, state.log_1m_sticks = sample_weights(state, hyper, rng, truncation)
    state.pi, state.sticks = np.exp(state.log_pi), np.exp(state.log_sticks)
    state.means, state.covs = sample_atoms(state, y, hyper, rng, truncation)
    return state


def run_gibbs(y, hyper: Hyperparams, iters: int = 20000, burn_in: int = 10000, rng=None,
              truncation: Optional[int] = None, thin: int = 1,
              state: Optional[GibbsState] = None, reference_labels=None) -> GibbsResult:
    """Run one chain and summarize the kept draws.

    ``truncation`` defaults to ``hyper.truncation + 5``. With
    ``reference_labels`` (a partition of the rows, e.g. a variational MAP
    fit), each kept draw maps every reference cluster to the atom holding
    most of its rows and averages that atom's mean. Matching per draw keeps
    the summary immune to label switching among novelty atoms.
    """
    if iters <= burn_in:
        raise ValueError("iters must exceed burn_in")
    y = np.atleast_2d(np.asarray(y, dtype=float))
    rng = np.random.default_rng(rng)
    truncation = hyper.truncation + 5 if truncation is None else truncation
    if truncation < 1:
        raise ValueError("truncation must be positive")
    J = hyper.n_known
    K = J + truncation
    M = len(y)
    started = time.perf_counter()
    if state is None:
        state = initial_state(y, hyper, truncation, rng)

    cocluster = np.zeros((M, M))
    freq = np.zeros((M, K))
    mean_sum = np.zeros((K, y.shape[1]))
    if reference_labels is not None:
        reference_labels = np.asarray(reference_labels)
        if reference_labels.shape != (M,):
            raise ValueError("reference_labels must have one entry per row")
        groups = {int(c): np.flatnonzero(reference_labels == c) for c in np.unique(reference_labels)}
        matched_sum = {c: np.zeros(y.shape[1]) for c in groups}
    occupancy = []
    kept = 0
    for it in range(1, iters + 1):
        try:
            gibbs_step(state, y, hyper, rng, truncation)
        except (np.linalg.LinAlgError, ValueError, GibbsDegeneracyError) as exc:
            raise GibbsDegeneracyError(f"iteration {it}: {exc}") from exc
        if it <= burn_in or (it - burn_in) % thin:
            continue
        kept += 1
        lab = state.labels
        cocluster += lab[:, None] == lab[None, :]
        freq[np.arange(M), lab - 1] += 1
        mean_sum += state.means
        if reference_labels is not None:
            for c, rows in groups.items():
                atom = np.argmax(np.bincount(lab[rows] - 1, minlength=K))
                matched_sum[c] += state.means[atom]
        occupancy.append(_counts(lab, K))
    matched = None
    if reference_labels is not None:
        matched = {c: v / kept for c, v in matched_sum.items()}
    return GibbsResult(
        coclustering=cocluster / kept,
        occupancy=np.asarray(occupancy),
        label_frequency=freq / kept,
        point_labels=np.argmax(freq, axis=1) + 1,
        posterior_means=mean_sum / kept,
        matched_means=matched,
        n_kept=kept,
        seconds=time.perf_counter() - started,
        final_state=state,
    )

