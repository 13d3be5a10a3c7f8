"""Independent reference computations used by the test-suite.

Nothing here calls into the closed-form expectation code; Monte-Carlo draws
come from scipy and densities are evaluated directly at the draws.
"""

import itertools
import math

import numpy as np
from scipy.special import gammaln, multigammaln
from scipy.stats import invwishart

N_MC = 10**6


def draw_niw(niw, n, rng):
    """(mu, Sigma) draws: Sigma ~ IW(scale, dof), mu | Sigma ~ N(mean, Sigma / lambda)."""
    p = niw.dim
    sigma = invwishart.rvs(df=niw.dof, scale=niw.scale, size=n, random_state=rng)
    sigma = np.asarray(sigma).reshape(n, p, p)
    chol = np.linalg.cholesky(sigma / niw.precision_scale)
    mu = niw.mean + np.einsum("nij,nj->ni", chol, rng.standard_normal((n, p)))
    return mu, sigma


def gaussian_logpdf_batch(y, mu, sigma):
    """log N(y_n | mu_n, sigma_n) for batches."""
    p = mu.shape[1]
    _, logdet = np.linalg.slogdet(sigma)
    diff = y - mu
    sol = np.linalg.solve(sigma, diff[..., None])[..., 0]
    return -0.5 * (p * math.log(2 * math.pi) + logdet + np.einsum("ni,ni->n", diff, sol))


def niw_logpdf_batch(mu, sigma, niw):
    """log NIW(mu_n, sigma_n | niw) written out from the density definition."""
    p = niw.dim
    nu, psi = niw.dof, niw.scale
    _, logdet_sigma = np.linalg.slogdet(sigma)
    _, logdet_psi = np.linalg.slogdet(psi)
    sigma_inv = np.linalg.inv(sigma)
    log_iw = (0.5 * nu * logdet_psi - 0.5 * nu * p * math.log(2) - multigammaln(0.5 * nu, p)
              - 0.5 * (nu + p + 1) * logdet_sigma
              - 0.5 * np.einsum("ij,nji->n", psi, sigma_inv))
    log_mean = gaussian_logpdf_batch(mu, np.broadcast_to(niw.mean, mu.shape), sigma / niw.precision_scale)
    return log_iw + log_mean


def mc_check(samples, analytic, n_se=3.0):
    """(passed, z-score) for a Monte-Carlo mean versus the analytic value."""
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / math.sqrt(len(samples))
    z = (samples.mean() - analytic) / se if se > 0 else 0.0
    return abs(z) <= n_se, z


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------

def pair_counts(a, b):
    """(both same, same in a only, same in b only, both different) over all pairs."""
    ss = sa = sb = dd = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        in_a = a[i] == a[j]
        in_b = b[i] == b[j]
        if in_a and in_b:
            ss += 1
        elif in_a:
            sa += 1
        elif in_b:
            sb += 1
        else:
            dd += 1
    return ss, sa, sb, dd


def ari_pairs(a, b):
    ss, sa, sb, dd = pair_counts(a, b)
    total = ss + sa + sb + dd
    expected = (ss + sa) * (ss + sb) / total
    max_index = 0.5 * ((ss + sa) + (ss + sb))
    if max_index == expected:
        return 1.0
    return (ss - expected) / (max_index - expected)


def fmi_pairs(a, b):
    ss, sa, sb, _ = pair_counts(a, b)
    if ss == 0:
        return 0.0
    return ss / math.sqrt((ss + sa) * (ss + sb))


# ---------------------------------------------------------------------------
# exact evidence of the truncated model by enumerating label configurations
# ---------------------------------------------------------------------------

def niw_log_marginal(y, niw):
    """log of the NIW-Gaussian marginal likelihood of the rows of ``y``."""
    n, p = y.shape
    if n == 0:
        return 0.0
    lam0, nu0, mu0, psi0 = niw.precision_scale, niw.dof, niw.mean, niw.scale
    ybar = y.mean(axis=0)
    scatter = (y - ybar).T @ (y - ybar)
    lam_n, nu_n = lam0 + n, nu0 + n
    psi_n = psi0 + scatter + lam0 * n / lam_n * np.outer(ybar - mu0, ybar - mu0)
    return (-0.5 * n * p * math.log(math.pi) + multigammaln(0.5 * nu_n, p) - multigammaln(0.5 * nu0, p)
            + 0.5 * nu0 * np.linalg.slogdet(psi0)[1] - 0.5 * nu_n * np.linalg.slogdet(psi_n)[1]
            + 0.5 * p * (math.log(lam0) - math.log(lam_n)))


def log_evidence_enumerated(y, hyper):
    """log p(y) of the truncated model, summing over every label configuration."""
    J, T = hyper.n_known, hyper.truncation
    K = J + T
    alpha, gamma = hyper.alpha, hyper.gamma
    terms = []
    for labels in itertools.product(range(K), repeat=len(y)):
        labels = np.asarray(labels)
        counts = np.bincount(labels, minlength=K)
        # E[prod pi^n] under Dirichlet(alpha) with n_0 = novelty count
        dir_n = np.concatenate([[counts[J:].sum()], counts[:J]])
        log_p = (gammaln(alpha.sum()) - gammaln(alpha.sum() + dir_n.sum())
                 + np.sum(gammaln(alpha + dir_n) - gammaln(alpha)))
        nov = counts[J:]
        for k in range(T - 1):
            a_n = nov[k]
            b_n = nov[k + 1:].sum()
            # E[v^a (1-v)^b] under Beta(1, gamma)
            log_p += (gammaln(1 + a_n) + gammaln(gamma + b_n) - gammaln(1 + gamma + a_n + b_n)
                      - (gammaln(1) + gammaln(gamma) - gammaln(1 + gamma)))
        for k in range(K):
            log_p += niw_log_marginal(y[labels == k], hyper.prior_for(k))
        terms.append(log_p)
    terms = np.asarray(terms)
    top = terms.max()
    return float(top + np.log(np.exp(terms - top).sum()))
