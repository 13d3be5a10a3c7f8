"""Coordinate-ascent variational inference for the known-plus-novelty mixture.

Component indices are 0-based inside this module: columns ``0..J-1`` of the
responsibility matrix are the known classes and ``J..J+T-1`` the truncated
stick-breaking novelty components. Reported MAP labels are 1-based.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy.stats import qmc

from .core import (
    Dataset,
    Hyperparams,
    NIWParams,
    VariationalState,
    expected_log_dirichlet,
    expected_log_niw_prior,
    expected_log_stick,
    expected_log_stick_weights,
    log_beta_normalizer,
    log_dirichlet_normalizer,
    niw_variational_self_term,
    stack_component_loglik,
    weighted_niw_update,
)

logger = logging.getLogger(__name__)

REL_TOL = 1e-12


class InitStrategy(str, Enum):
    KMEANS_PLUS_LHS = "kmeans_plus_lhs"
    RANDOM = "random"


class ConfigError(ValueError):
    pass


class DivergedError(RuntimeError):
    def __init__(self, iteration: int, message: str = "ELBO is not finite"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


class DegenerateResponsibilityError(RuntimeError):
    pass


class AllRunsDivergedError(RuntimeError):
    def __init__(self, errors):
        super().__init__(f"all {len(errors)} CAVI runs diverged: "
                         + "; ".join(str(e) for e in errors[:5]))
        self.errors = errors


@dataclass(frozen=True)
class CaviConfig:
    tol: float = 1e-9
    max_iter: int = 500
    n_starts: int = 1
    seed: int = 0
    init_strategy: InitStrategy = InitStrategy.KMEANS_PLUS_LHS
    eta_range: tuple = (0.1, 1.0)
    niw_multiplier_range: tuple = (1.0, 10.0)

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")
        if self.n_starts < 1:
            raise ConfigError("n_starts must be at least 1")
        object.__setattr__(self, "init_strategy", InitStrategy(self.init_strategy))


@dataclass
class FitResult:
    state: VariationalState
    elbo_trace: np.ndarray
    converged: bool
    iterations: int
    map_labels: np.ndarray
    run_index: int = 0
    seconds: float = 0.0
    start_traces: Optional[dict] = field(default=None, repr=False)

    @property
    def elbo(self) -> float:
        return float(self.elbo_trace[-1])


def _test_matrix(data) -> np.ndarray:
    if isinstance(data, Dataset):
        return data.test_x
    return np.atleast_2d(np.asarray(data, dtype=float))


# ---------------------------------------------------------------------------
# update families
# ---------------------------------------------------------------------------

def update_eta(state: VariationalState, hyper: Hyperparams) -> np.ndarray:
    """Dirichlet parameters: prior weights plus summed responsibilities."""
    J = hyper.n_known
    mass = state.resp.sum(axis=0)
    eta = np.empty(J + 1)
    eta[0] = hyper.alpha[0] + mass[J:].sum()
    eta[1:] = hyper.alpha[1:] + mass[:J]
    return eta


def update_stick_betas(state: VariationalState, hyper: Hyperparams):
    """Beta parameters of the T-1 free sticks."""
    J, T = hyper.n_known, hyper.truncation
    mass = state.resp[:, J:].sum(axis=0)
    # tail[k] = sum_{l > k} mass[l]
    tail = np.cumsum(mass[::-1])[::-1]
    a = 1.0 + mass[:T - 1]
    b = hyper.gamma + tail[1:]
    return a, b


def update_niw(state: VariationalState, hyper: Hyperparams, data, k: int) -> NIWParams:
    y = _test_matrix(data)
    return weighted_niw_update(hyper.prior_for(k), y, state.resp[:, k])


def expected_log_weights(state: VariationalState, hyper: Hyperparams) -> np.ndarray:
    """E[log pi_k] for known k and E[log pi_0 + log w_{k-J}] for novelty k."""
    e_log_pi = expected_log_dirichlet(state.eta)
    nov = e_log_pi[0] + expected_log_stick_weights(state.stick_a, state.stick_b)
    return np.concatenate([e_log_pi[1:], nov])


def component_scores(state: VariationalState, hyper: Hyperparams, data) -> np.ndarray:
    """Unnormalized log responsibilities, M x (J + T)."""
    y = _test_matrix(data)
    return stack_component_loglik(y, state.niws) + expected_log_weights(state, hyper)


def normalize_log_scores(scores: np.ndarray) -> np.ndarray:
    row_max = scores.max(axis=1, keepdims=True)
    bad = ~np.isfinite(row_max[:, 0])
    if np.any(bad):
        raise DegenerateResponsibilityError(
            f"observation {int(np.flatnonzero(bad)[0])} has no finite component score")
    log_norm = row_max + np.log(np.exp(scores - row_max).sum(axis=1, keepdims=True))
    return np.exp(scores - log_norm)


def update_responsibilities(state: VariationalState, hyper: Hyperparams, data) -> np.ndarray:
    return normalize_log_scores(component_scores(state, hyper, data))


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------

def _xlogx(x):
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos])
    return out


def elbo_terms(state: VariationalState, hyper: Hyperparams, data) -> dict:
    """Named ELBO pieces; ``compute_elbo`` is sum(f_*) - sum(h_*).

    Keys ``f_*`` are E_q[log p] pieces, keys ``h_*`` are E_q[log q] pieces.
    All normalizing constants are kept.
    """
    y = _test_matrix(data)
    J, T = hyper.n_known, hyper.truncation
    resp = state.resp
    loglik = stack_component_loglik(y, state.niws)
    e_log_pi = expected_log_dirichlet(state.eta)
    log_w = expected_log_weights(state, hyper)
    e_log_v, e_log_1mv = expected_log_stick(state.stick_a, state.stick_b)

    terms = {
        "f_loglik_known": float(np.sum(resp[:, :J] * loglik[:, :J])),
        "f_loglik_novelty": float(np.sum(resp[:, J:] * loglik[:, J:])),
        "f_niw_known": float(sum(expected_log_niw_prior(q, p)
                                 for q, p in zip(state.obs_niw, hyper.known_priors))),
        "f_niw_novelty": float(sum(expected_log_niw_prior(q, hyper.novelty_prior)
                                   for q in state.nov_niw)),
        "f_weights_known": float(np.sum(resp[:, :J] * log_w[:J])),
        "f_weights_novelty": float(np.sum(resp[:, J:] * log_w[J:])),
        "f_dirichlet_prior": log_dirichlet_normalizer(hyper.alpha)
        + float(np.sum((hyper.alpha - 1.0) * e_log_pi)),
        "f_stick_prior": float(np.sum(np.log(hyper.gamma) + (hyper.gamma - 1.0) * e_log_1mv)),
        "h_resp": float(np.sum(_xlogx(resp))),
        "h_dirichlet": log_dirichlet_normalizer(state.eta)
        + float(np.sum((state.eta - 1.0) * e_log_pi)),
        "h_sticks": float(np.sum(log_beta_normalizer(state.stick_a, state.stick_b)
                                 + (state.stick_a - 1.0) * e_log_v
                                 + (state.stick_b - 1.0) * e_log_1mv)),
        "h_niw_known": float(sum(niw_variational_self_term(q) for q in state.obs_niw)),
        "h_niw_novelty": float(sum(niw_variational_self_term(q) for q in state.nov_niw)),
    }
    assert T == len(state.nov_niw)
    return terms


def compute_elbo(state: VariationalState, hyper: Hyperparams, data) -> float:
    terms = elbo_terms(state, hyper, data)
    return (sum(v for k, v in terms.items() if k.startswith("f_"))
            - sum(v for k, v in terms.items() if k.startswith("h_")))


# ---------------------------------------------------------------------------
# initialization and the main loop
# ---------------------------------------------------------------------------

def lhs_design(n_starts: int, seed: int, dim: int = 3) -> np.ndarray:
    """Latin-hypercube design on [0, 1)^dim, one row per start."""
    return qmc.LatinHypercube(d=dim, seed=np.random.default_rng([seed, 0x1A5])).random(n_starts)


def run_seed(seed: int, run_index: int) -> int:
    return int(np.random.SeedSequence([seed, run_index]).generate_state(1)[0])


def kmeans_centers(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    from sklearn.cluster import KMeans

    km = KMeans(n_clusters=k, init="k-means++", n_init=10, max_iter=25, random_state=seed)
    return km.fit(y).cluster_centers_


def initialize(data, hyper: Hyperparams, config: CaviConfig, run_index: int = 0) -> VariationalState:
    """Starting state for run ``run_index``.

    Novelty means come from k-means on the test set; the initial Dirichlet
    parameter and the novelty (dof, precision) multipliers are jittered per
    run, by a Latin-hypercube design for ``kmeans_plus_lhs``. Responsibilities
    are then set optimally for these blocks, so the returned state has a
    well-defined ELBO.
    """
    y = _test_matrix(data)
    M = len(y)
    J, T = hyper.n_known, hyper.truncation
    if T > M:
        raise ConfigError(f"truncation T={T} exceeds the number of test observations M={M}")
    if y.shape[1] != hyper.dim:
        raise ConfigError("test data dimension does not match the priors")
    seed = run_seed(config.seed, run_index)
    if config.init_strategy is InitStrategy.KMEANS_PLUS_LHS:
        if not 0 <= run_index < config.n_starts:
            raise ConfigError(f"run_index {run_index} outside 0..{config.n_starts - 1}")
        u = lhs_design(config.n_starts, config.seed)[run_index]
        centers = kmeans_centers(y, T, seed)
    else:
        rng = np.random.default_rng(seed)
        u = rng.uniform(size=3)
        centers = y[rng.choice(M, size=T, replace=False)]

    lo, hi = config.eta_range
    eta0 = lo + (hi - lo) * u[0]
    lo, hi = config.niw_multiplier_range
    dof_mult = lo + (hi - lo) * u[1]
    lam_mult = lo + (hi - lo) * u[2]

    prior = hyper.novelty_prior
    # scale moves with dof so the expected precision dof * scale^{-1} is unchanged
    nov = [prior.replace(mean=c, dof=prior.dof * dof_mult, scale=prior.scale * dof_mult,
                         precision_scale=prior.precision_scale * lam_mult) for c in centers]
    state = VariationalState(
        eta=np.full(J + 1, eta0),
        stick_a=np.ones(T - 1),
        stick_b=np.full(T - 1, float(hyper.gamma)),
        obs_niw=list(hyper.known_priors),
        nov_niw=nov,
        resp=np.zeros((M, J + T)),
    )
    state.resp = update_responsibilities(state, hyper, y)
    return state


def cavi_sweep(state: VariationalState, hyper: Hyperparams, y: np.ndarray) -> VariationalState:
    """One pass: responsibilities, eta, sticks, then every NIW block."""
    J = hyper.n_known
    state.resp = update_responsibilities(state, hyper, y)
    state.eta = update_eta(state, hyper)
    state.stick_a, state.stick_b = update_stick_betas(state, hyper)
    niws = [update_niw(state, hyper, y, k) for k in range(hyper.n_components)]
    state.obs_niw, state.nov_niw = niws[:J], niws[J:]
    return state


def map_labels(resp: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. lowest-index tie-break
    return np.argmax(resp, axis=1) + 1


def run_cavi(data, hyper: Hyperparams, config: CaviConfig, run_index: int = 0,
             state: Optional[VariationalState] = None) -> FitResult:
    """Iterate CAVI sweeps until the ELBO change drops below ``config.tol``."""
    y = _test_matrix(data)
    started = time.perf_counter()
    if state is None:
        state = initialize(y, hyper, config, run_index)
    else:
        state = state.copy()
    trace = [compute_elbo(state, hyper, y)]
    if not np.isfinite(trace[0]):
        raise DivergedError(0)
    converged = False
    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        cavi_sweep(state, hyper, y)
        elbo = compute_elbo(state, hyper, y)
        if not np.isfinite(elbo):
            raise DivergedError(iteration)
        delta = abs(elbo - trace[-1])
        trace.append(elbo)
        if delta < config.tol or delta < REL_TOL * abs(elbo):
            converged = True
            break
    return FitResult(state=state, elbo_trace=np.asarray(trace), converged=converged,
                     iterations=iteration, map_labels=map_labels(state.resp),
                     run_index=run_index, seconds=time.perf_counter() - started)


def _run_one(args):
    y, hyper, config, run_index = args
    try:
        return run_cavi(y, hyper, config, run_index)
    except ConfigError:
        raise
    except (DivergedError, DegenerateResponsibilityError, FloatingPointError, ValueError) as exc:
        return exc


def multi_start(data, hyper: Hyperparams, config: CaviConfig, n_jobs: int = 1) -> FitResult:
    """Run ``config.n_starts`` independent fits and keep the highest final ELBO.

    Ties go to the lowest run index. Results do not depend on ``n_jobs``.
    """
    y = _test_matrix(data)
    jobs = [(y, hyper, config, r) for r in range(config.n_starts)]
    if n_jobs > 1 and config.n_starts > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            outcomes = list(pool.map(_run_one, jobs))
    else:
        outcomes = [_run_one(job) for job in jobs]

    errors = []
    best = None
    traces = {}
    for r, outcome in enumerate(outcomes):
        if isinstance(outcome, Exception):
            logger.warning("run %d failed: %s", r, outcome)
            errors.append(outcome)
            continue
        traces[r] = outcome.elbo_trace
        if best is None or outcome.elbo > best.elbo:
            best = outcome
    if best is None:
        raise AllRunsDivergedError(errors)
    return replace(best, start_traces=traces)
