"""Binomial GLM backend with logit, complementary log-log and probit links.

Covariates are centered and scaled by the training data before entering the
design matrix, and every coefficient (intercept included) has an independent
Normal(0, prior_sd^2) prior. A fitted model carries its Laplace evidence and a
set of weighted success-probability atoms at the prediction point; these
atoms are either Metropolis draws (equal weights) or Gauss-Hermite nodes of
the Laplace approximation.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import expit, gammaln, log_expit, log_ndtr, ndtr

from .hierarchy import Backend, Dataset, PredictiveMoments

P_CLAMP = 1e-15
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class Link(str, enum.Enum):
    LOGIT = "logit"
    CLOGLOG = "cloglog"
    PROBIT = "probit"

    @property
    def code(self) -> str:
        return {"logit": "L", "cloglog": "C", "probit": "P"}[self.value]

    @classmethod
    def parse(cls, text: str) -> "Link":
        codes = {"L": cls.LOGIT, "C": cls.CLOGLOG, "P": cls.PROBIT}
        if text in codes:
            return codes[text]
        return cls(text.lower())


class ConvergenceError(RuntimeError):
    def __init__(self, grad_norm: float, iterations: int):
        super().__init__(f"Newton iteration did not converge: |grad| = {grad_norm:.3e} after {iterations} steps")
        self.grad_norm = grad_norm


class SaddlePointError(RuntimeError):
    """Negative Hessian at the mode is not positive definite."""


class RankDeficientDesignError(ValueError):
    pass


@dataclass(frozen=True)
class GlmModelSpec:
    link: Link
    covariate_subset: tuple[str, ...] = ()
    trials: int = 6
    prior_sd: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "link", Link.parse(self.link) if isinstance(self.link, str) else self.link)
        object.__setattr__(self, "covariate_subset", tuple(self.covariate_subset))
        if len(set(self.covariate_subset)) != len(self.covariate_subset):
            raise ValueError("covariate subset has duplicates")
        if not (self.prior_sd > 0 and math.isfinite(self.prior_sd)):
            raise ValueError("prior standard deviation must be positive")
        if int(self.trials) != self.trials or self.trials < 1:
            raise ValueError("trials must be a positive integer")

    @property
    def dim(self) -> int:
        return len(self.covariate_subset) + 1

    @property
    def label(self) -> str:
        subset = ",".join(self.covariate_subset) or "none"
        return f"{self.link.code}:{subset}"


@dataclass(frozen=True)
class Design:
    """Intercept plus standardized covariate columns."""

    names: tuple[str, ...]
    center: np.ndarray
    scale: np.ndarray
    X: np.ndarray

    def row(self, x_new: Mapping[str, float]) -> np.ndarray:
        missing = [n for n in self.names if n not in x_new]
        if missing:
            raise KeyError(f"x_new is missing covariate(s) {', '.join(missing)}")
        raw = np.array([float(x_new[n]) for n in self.names])
        return np.concatenate([[1.0], (raw - self.center) / self.scale])


def build_design(spec: GlmModelSpec, data: Dataset) -> Design:
    names = spec.covariate_subset
    cols = [data.column(n) for n in names]
    raw = np.column_stack(cols) if cols else np.zeros((data.n, 0))
    center = raw.mean(axis=0) if cols else np.zeros(0)
    scale = raw.std(axis=0) if cols else np.ones(0)
    if np.any(scale <= 0):
        raise RankDeficientDesignError(f"constant covariate in subset {names}")
    X = np.column_stack([np.ones(data.n), (raw - center) / scale])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientDesignError(f"design for subset {names} is rank deficient")
    return Design(names, center, scale, X)


def inverse_link(link: Link | str, eta):
    """Success probability, clamped to [1e-15, 1 - 1e-15]."""
    link = Link.parse(link) if isinstance(link, str) else link
    eta = np.asarray(eta, dtype=float)
    if link is Link.LOGIT:
        p = expit(eta)
    elif link is Link.PROBIT:
        p = ndtr(eta)
    else:
        with np.errstate(over="ignore"):
            p = -np.expm1(-np.exp(eta))
    p = np.clip(p, P_CLAMP, 1 - P_CLAMP)
    return float(p) if p.ndim == 0 else p


def _link_terms(link: Link, eta: np.ndarray):
    """log p, log(1-p), and the score pieces r1 = F'/F, r0 = F'/(1-F) with derivatives."""
    if link is Link.LOGIT:
        p = expit(eta)
        log_p, log_q = log_expit(eta), log_expit(-eta)
        r1, r0 = 1 - p, p
        d = p * (1 - p)
        return log_p, log_q, r1, r0, -d, d
    if link is Link.PROBIT:
        log_p, log_q = log_ndtr(eta), log_ndtr(-eta)
        log_phi = -0.5 * eta * eta - _LOG_SQRT_2PI
        r1 = np.exp(log_phi - log_p)  # inverse Mills ratio
        r0 = np.exp(log_phi - log_q)
        return log_p, log_q, r1, r0, -r1 * (eta + r1), r0 * (r0 - eta)
    u = np.exp(eta)
    log_q = -u
    log_p = np.log(-np.expm1(-u))
    em1 = -np.expm1(-u)  # 1 - exp(-u)
    r1 = np.where(u > 0, u * np.exp(-u) / np.where(u > 0, em1, 1.0), 1.0)
    small = u < 1e-3
    us = np.where(small, u, 0.0)
    # d/du [u / (e^u - 1)], with a series branch where cancellation bites
    fprime = np.where(
        small,
        -0.5 + us / 6 - us**3 / 180,
        np.exp(-u) * (em1 - u) / np.where(small, 1.0, em1) ** 2,
    )
    return log_p, log_q, r1, u, u * fprime, u


def _log_choose(n: np.ndarray, y: np.ndarray) -> np.ndarray:
    return gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)


def _check_counts(spec: GlmModelSpec, data: Dataset) -> np.ndarray:
    y = data.responses
    if np.any(y < 0) or np.any(y > spec.trials) or np.any(y != np.round(y)):
        raise ValueError(f"responses must be integer counts in 0..{spec.trials}")
    return y


def log_posterior(spec: GlmModelSpec, data: Dataset, beta, design: Design | None = None):
    """Unnormalized log posterior with its analytic gradient and Hessian."""
    design = design if design is not None else build_design(spec, data)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (design.X.shape[1],):
        raise ValueError(f"beta has shape {beta.shape}, expected ({design.X.shape[1]},)")
    y = _check_counts(spec, data)
    n = float(spec.trials)
    X = design.X
    eta = X @ beta
    log_p, log_q, r1, r0, dr1, dr0 = _link_terms(spec.link, eta)
    s2 = spec.prior_sd**2
    value = float(np.sum(_log_choose(n, y) + y * log_p + (n - y) * log_q))
    value += float(-0.5 * beta.size * math.log(2 * math.pi * s2) - beta @ beta / (2 * s2))
    score = y * r1 - (n - y) * r0
    grad = X.T @ score - beta / s2
    curv = y * dr1 - (n - y) * dr0
    hess = (X * curv[:, None]).T @ X - np.eye(beta.size) / s2
    return value, grad, hess


def _log_post_value(link: Link, X, y, n, s2, const, beta) -> float:
    eta = X @ beta
    log_p, log_q = _log_probs(link, eta)
    return float(const + np.sum(y * log_p + (n - y) * log_q) - beta @ beta / (2 * s2))


def _log_probs(link: Link, eta):
    if link is Link.LOGIT:
        return log_expit(eta), log_expit(-eta)
    if link is Link.PROBIT:
        return log_ndtr(eta), log_ndtr(-eta)
    u = np.exp(eta)
    return np.log(-np.expm1(-u)), -u


@dataclass(frozen=True)
class LaplaceFit:
    spec: GlmModelSpec
    design: Design
    mode: np.ndarray
    neg_hessian: np.ndarray
    log_marginal: float
    log_post_at_mode: float
    iterations: int

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.neg_hessian)


def fit_laplace(spec: GlmModelSpec, data: Dataset, max_iter: int = 100, tol: float = 1e-8) -> LaplaceFit:
    """Newton ascent from zero with step halving, then a Laplace evidence estimate."""
    design = build_design(spec, data)
    beta = np.zeros(design.X.shape[1])
    value, grad, hess = log_posterior(spec, data, beta, design)
    it = 0
    while np.linalg.norm(grad) >= tol:
        if it >= max_iter:
            raise ConvergenceError(float(np.linalg.norm(grad)), it)
        it += 1
        step = np.linalg.solve(-hess, grad)
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            new = log_posterior(spec, data, cand, design)
            if np.isfinite(new[0]) and new[0] >= value - 1e-12 * abs(value):
                break
            t *= 0.5
        else:
            raise ConvergenceError(float(np.linalg.norm(grad)), it)
        beta = cand
        value, grad, hess = new
    neg_h = -hess
    try:
        chol = np.linalg.cholesky(neg_h)
    except np.linalg.LinAlgError:
        raise SaddlePointError("negative Hessian at the mode is not positive definite") from None
    d = beta.size
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    log_m = value + 0.5 * d * math.log(2 * math.pi) - 0.5 * log_det
    return LaplaceFit(spec, design, beta, neg_h, log_m, value, it)


def laplace_log_marginal(spec: GlmModelSpec, data: Dataset) -> float:
    return fit_laplace(spec, data).log_marginal


@dataclass(frozen=True)
class PosteriorDraws:
    draws: np.ndarray
    acceptance_rate: float
    seed: int
    design: Design
    spec: GlmModelSpec
    warning: str | None = None


def rw_metropolis(
    spec: GlmModelSpec,
    data: Dataset,
    chain_length: int,
    burn_in: int,
    step_scale: float,
    seed: int,
    fit: LaplaceFit | None = None,
) -> PosteriorDraws:
    """Gaussian random-walk Metropolis started at the Laplace mode.

    Proposal covariance is step_scale^2 times the Laplace covariance.
    """
    if not step_scale > 0:
        raise ValueError("step_scale must be positive")
    if chain_length < 1 or burn_in < 0:
        raise ValueError("chain_length must be positive and burn_in nonnegative")
    fit = fit if fit is not None else fit_laplace(spec, data)
    X = fit.design.X
    y = _check_counts(spec, data)
    n = float(spec.trials)
    s2 = spec.prior_sd**2
    const = float(np.sum(_log_choose(n, y))) - 0.5 * X.shape[1] * math.log(2 * math.pi * s2)
    rng = np.random.default_rng(seed)
    total = chain_length + burn_in
    L = np.linalg.cholesky(fit.covariance) * step_scale
    steps = rng.standard_normal((total, X.shape[1])) @ L.T
    log_u = np.log(rng.random(total))
    cur = fit.mode.copy()
    cur_val = _log_post_value(spec.link, X, y, n, s2, const, cur)
    out = np.empty((chain_length, cur.size))
    accepted = 0
    for i in range(total):
        prop = cur + steps[i]
        val = _log_post_value(spec.link, X, y, n, s2, const, prop)
        if log_u[i] < val - cur_val:
            cur, cur_val = prop, val
            accepted += 1
        if i >= burn_in:
            out[i - burn_in] = cur
    rate = accepted / total
    warn = None
    if not 0.05 <= rate <= 0.95:
        warn = f"acceptance rate {rate:.3f} outside [0.05, 0.95]"
        warnings.warn(f"{spec.label}: {warn}", RuntimeWarning, stacklevel=2)
    return PosteriorDraws(out, rate, int(seed), fit.design, spec, warn)


TARGETS = ("probability", "count")


@dataclass(frozen=True)
class ProbabilityAtoms:
    """Weighted success probabilities at the prediction point."""

    p: np.ndarray
    w: np.ndarray

    def moments(self, target: str, trials: int) -> PredictiveMoments:
        if target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        mean_p = float(self.w @ self.p)
        var_p = float(self.w @ (self.p - mean_p) ** 2)
        if target == "probability":
            return PredictiveMoments(mean_p, var_p)
        m = trials
        within = float(self.w @ (m * self.p * (1 - self.p)))
        return PredictiveMoments(m * mean_p, within + m * m * var_p)


def draw_atoms(draws: PosteriorDraws, x_new: Mapping[str, float]) -> ProbabilityAtoms:
    row = draws.design.row(x_new)
    p = np.atleast_1d(inverse_link(draws.spec.link, draws.draws @ row))
    return ProbabilityAtoms(p, np.full(p.shape, 1.0 / p.size))


def laplace_atoms(fit: LaplaceFit, x_new: Mapping[str, float], nodes: int = 40) -> ProbabilityAtoms:
    """Gauss-Hermite nodes of the linear predictor under the Laplace Gaussian."""
    row = fit.design.row(x_new)
    mu = float(row @ fit.mode)
    sd = math.sqrt(max(float(row @ fit.covariance @ row), 0.0))
    t, w = np.polynomial.hermite.hermgauss(nodes)
    p = np.atleast_1d(inverse_link(fit.spec.link, mu + math.sqrt(2) * sd * t))
    return ProbabilityAtoms(p, w / w.sum())


def predictive_moments_at(
    spec: GlmModelSpec, draws: PosteriorDraws, x_new: Mapping[str, float], target: str = "probability"
) -> PredictiveMoments:
    """Moments of g^{-1}(x'beta) or of a Binomial(trials, .) count over the draws."""
    return draw_atoms(draws, x_new).moments(target, spec.trials)


class GlmBackend(Backend):
    """A fitted GLM bound to its training data.

    ``log_marginal`` and ``moments`` ignore the ``data`` argument: the fit
    was made once, and the draw-based moments are fixed inputs thereafter.
    The parameter layer is the success probability at the prediction point.
    """

    has_parameter = True

    def __init__(self, spec: GlmModelSpec, fit: LaplaceFit, atoms: ProbabilityAtoms,
                 target: str = "probability", draws: PosteriorDraws | None = None):
        if target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        self.spec = spec
        self.fit = fit
        self.atoms = atoms
        self.target = target
        self.draws = draws

    def log_marginal(self, data):
        return self.fit.log_marginal

    def moments(self, data):
        return self.atoms.moments(self.target, self.spec.trials)

    def parameter_split(self, data):
        m = self.moments(data)
        if self.target == "probability":
            return 0.0, m.variance
        p, w = self.atoms.p, self.atoms.w
        within = float(w @ (self.spec.trials * p * (1 - p)))
        return within, m.variance - within

    def draw_parameters(self, data, rng, size):
        return self.atoms.p[rng.choice(self.atoms.p.size, size=size, p=self.atoms.w)]

    def parameter_moments(self, data, params):
        p = np.asarray(params, dtype=float)
        if self.target == "probability":
            return p, np.zeros_like(p)
        m = self.spec.trials
        return m * p, m * p * (1 - p)

    def sample_given_parameters(self, data, params, rng):
        p = np.asarray(params, dtype=float)
        if self.target == "probability":
            return p.copy()
        return rng.binomial(self.spec.trials, p).astype(float)

    def sample(self, data, rng, size):
        return self.sample_given_parameters(data, self.draw_parameters(data, rng, size), rng)


@dataclass(frozen=True)
class McmcSettings:
    chain_length: int = 20000
    burn_in: int = 2000
    step_scale: float | None = None  # default 2.38 / sqrt(d)


def fit_component(
    spec: GlmModelSpec,
    data: Dataset,
    x_new: Mapping[str, float],
    target: str = "probability",
    method: str = "mcmc",
    seed: int = 0,
    mcmc: McmcSettings = McmcSettings(),
) -> GlmBackend:
    fit = fit_laplace(spec, data)
    if method == "laplace":
        return GlmBackend(spec, fit, laplace_atoms(fit, x_new), target)
    if method != "mcmc":
        raise ValueError(f"unknown fitting method {method!r}")
    scale = mcmc.step_scale if mcmc.step_scale is not None else 2.38 / math.sqrt(spec.dim)
    draws = rw_metropolis(spec, data, mcmc.chain_length, mcmc.burn_in, scale, seed, fit)
    return GlmBackend(spec, fit, draw_atoms(draws, x_new), target, draws)
