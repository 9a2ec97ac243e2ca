"""Closed-form conjugate backends.

Normal mean with known variance, Normal with Normal-InvGamma prior, and
Beta-Binomial. Each exposes its marginal likelihood, posterior predictive
moments, and the split of the predictive variance over its own parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import betaln, gammaln

from .hierarchy import Backend, Dataset, PredictiveMoments


@dataclass(frozen=True)
class NormalKnownVarSpec:
    sigma: float
    theta0: float = 0.0
    tau0: float = 1.0

    def __post_init__(self):
        for name in ("sigma", "tau0"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v!r}")
        if not math.isfinite(self.theta0):
            raise ValueError("theta0 must be finite")


@dataclass(frozen=True)
class NormalInvGammaSpec:
    """Y ~ N(mu, s2), mu | s2 ~ N(mu0, s2 / kappa0), s2 ~ InvGamma(alpha, beta)."""

    alpha: float
    beta: float
    mu0: float = 0.0
    kappa0: float = 1.0

    def __post_init__(self):
        if not self.alpha > 2:
            raise ValueError(f"alpha must exceed 2 for a finite predictive variance, got {self.alpha!r}")
        if not (self.beta > 0 and self.kappa0 > 0):
            raise ValueError("beta and kappa0 must be positive")


@dataclass(frozen=True)
class BetaBinomialSpec:
    m: int
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"trials m must be a positive integer, got {self.m!r}")
        if not (math.isfinite(self.a) and math.isfinite(self.b) and self.a > 0 and self.b > 0):
            raise ValueError("Beta shapes must be finite and positive")


class VarianceSplit(NamedTuple):
    e_var: float
    var_e: float

    @property
    def total(self) -> float:
        return self.e_var + self.var_e

    @property
    def var_e_dominates(self) -> bool:
        return self.var_e > self.e_var


def nn_posterior_params(spec: NormalKnownVarSpec, data: Dataset) -> tuple[float, float]:
    """Posterior mean and variance of theta.

    Precision-weighted: tau_n2 = (n/sigma^2 + 1/tau0^2)^-1 and
    theta_n = tau_n2 * (n*ybar/sigma^2 + theta0/tau0^2).
    """
    n = data.n
    s2, t2 = spec.sigma**2, spec.tau0**2
    tau_n2 = 1.0 / (n / s2 + 1.0 / t2)
    total = float(data.responses.sum()) if n else 0.0
    theta_n = tau_n2 * (total / s2 + spec.theta0 / t2)
    return theta_n, tau_n2


def nn_decomposition(spec: NormalKnownVarSpec, data: Dataset) -> VarianceSplit:
    _, tau_n2 = nn_posterior_params(spec, data)
    return VarianceSplit(spec.sigma**2, tau_n2)


def nn_log_marginal(spec: NormalKnownVarSpec, data: Dataset) -> float:
    y = data.responses
    n = data.n
    if n == 0:
        return 0.0
    s2, t2 = spec.sigma**2, spec.tau0**2
    theta_n, tau_n2 = nn_posterior_params(spec, data)
    quad = float(np.dot(y, y)) / s2 + spec.theta0**2 / t2 - theta_n**2 / tau_n2
    return -0.5 * n * math.log(2 * math.pi * s2) + 0.5 * math.log(tau_n2 / t2) - 0.5 * quad


class NormalKnownVarBackend(Backend):
    """Y_i ~ N(theta, sigma^2), theta ~ N(theta0, tau0^2); parameter layer is theta."""

    has_parameter = True

    def __init__(self, spec: NormalKnownVarSpec):
        self.spec = spec

    def log_marginal(self, data):
        return nn_log_marginal(self.spec, data)

    def moments(self, data):
        theta_n, tau_n2 = nn_posterior_params(self.spec, data)
        return PredictiveMoments(theta_n, self.spec.sigma**2 + tau_n2)

    def sample(self, data, rng, size):
        theta_n, tau_n2 = nn_posterior_params(self.spec, data)
        return rng.normal(theta_n, math.sqrt(self.spec.sigma**2 + tau_n2), size)

    def parameter_split(self, data):
        return tuple(nn_decomposition(self.spec, data))

    def draw_parameters(self, data, rng, size):
        theta_n, tau_n2 = nn_posterior_params(self.spec, data)
        return rng.normal(theta_n, math.sqrt(tau_n2), size)

    def parameter_moments(self, data, params):
        params = np.asarray(params, dtype=float)
        return params, np.full(params.shape, self.spec.sigma**2)

    def sample_given_parameters(self, data, params, rng):
        return rng.normal(params, self.spec.sigma)


def nig_posterior_params(spec: NormalInvGammaSpec, data: Dataset) -> tuple[float, float, float, float]:
    """Updated (mu_n, kappa_n, alpha_n, beta_n)."""
    y = data.responses
    n = data.n
    if n == 0:
        return spec.mu0, spec.kappa0, spec.alpha, spec.beta
    ybar = float(y.mean())
    ss = float(((y - ybar) ** 2).sum())
    kappa_n = spec.kappa0 + n
    mu_n = (spec.kappa0 * spec.mu0 + n * ybar) / kappa_n
    alpha_n = spec.alpha + n / 2
    beta_n = spec.beta + 0.5 * ss + spec.kappa0 * n * (ybar - spec.mu0) ** 2 / (2 * kappa_n)
    return mu_n, kappa_n, alpha_n, beta_n


def nig_predictive_moments(spec: NormalInvGammaSpec, data: Dataset) -> PredictiveMoments:
    """Moments of the Student-t posterior predictive."""
    mu_n, kappa_n, alpha_n, beta_n = nig_posterior_params(spec, data)
    # alpha > 2 makes alpha_n > 2; guard anyway since the variance needs it
    if not alpha_n > 2:
        raise ValueError(f"posterior shape {alpha_n!r} leaves the predictive variance infinite")
    return PredictiveMoments(mu_n, beta_n * (kappa_n + 1) / (kappa_n * (alpha_n - 1)))


def nig_decomposition(spec: NormalInvGammaSpec, data: Dataset) -> VarianceSplit:
    _, kappa_n, alpha_n, beta_n = nig_posterior_params(spec, data)
    e_s2 = beta_n / (alpha_n - 1)
    return VarianceSplit(e_s2, e_s2 / kappa_n)


def nig_log_marginal(spec: NormalInvGammaSpec, data: Dataset) -> float:
    n = data.n
    if n == 0:
        return 0.0
    _, kappa_n, alpha_n, beta_n = nig_posterior_params(spec, data)
    return (
        gammaln(alpha_n)
        - gammaln(spec.alpha)
        + spec.alpha * math.log(spec.beta)
        - alpha_n * math.log(beta_n)
        + 0.5 * math.log(spec.kappa0 / kappa_n)
        - 0.5 * n * math.log(2 * math.pi)
    )


class NormalInvGammaBackend(Backend):
    """Parameter layer is the pair (mu, sigma^2), stored as rows of a (size, 2) array."""

    has_parameter = True

    def __init__(self, spec: NormalInvGammaSpec):
        self.spec = spec

    def log_marginal(self, data):
        return nig_log_marginal(self.spec, data)

    def moments(self, data):
        return nig_predictive_moments(self.spec, data)

    def sample(self, data, rng, size):
        theta = self.draw_parameters(data, rng, size)
        return self.sample_given_parameters(data, theta, rng)

    def parameter_split(self, data):
        return tuple(nig_decomposition(self.spec, data))

    def draw_parameters(self, data, rng, size):
        mu_n, kappa_n, alpha_n, beta_n = nig_posterior_params(self.spec, data)
        s2 = beta_n / rng.gamma(alpha_n, 1.0, size)
        mu = rng.normal(mu_n, np.sqrt(s2 / kappa_n))
        return np.column_stack([mu, s2])

    def parameter_moments(self, data, params):
        params = np.asarray(params, dtype=float).reshape(-1, 2)
        return params[:, 0], params[:, 1]

    def sample_given_parameters(self, data, params, rng):
        params = np.asarray(params, dtype=float).reshape(-1, 2)
        return rng.normal(params[:, 0], np.sqrt(params[:, 1]))


def _beta_posterior(spec: BetaBinomialSpec, data: Dataset | None) -> tuple[float, float]:
    if data is None or data.n == 0:
        return spec.a, spec.b
    y = data.responses
    if np.any(y < 0) or np.any(y > spec.m) or np.any(y != np.round(y)):
        raise ValueError(f"Beta-Binomial responses must be integers in 0..{spec.m}")
    return spec.a + float(y.sum()), spec.b + float((spec.m - y).sum())


def beta_binomial_decomposition(spec: BetaBinomialSpec, data: Dataset | None = None) -> VarianceSplit:
    """Split of the Beta-Binomial predictive variance over p.

    e_var = m E[p(1-p)] and var_e = m^2 Var(p), under the prior when ``data``
    is None or empty and under the Beta posterior otherwise.
    """
    a, b = _beta_posterior(spec, data)
    m = spec.m
    s = a + b
    e_var = m * a * b / (s * (s + 1))
    var_e = m * m * a * b / (s * s * (s + 1))
    return VarianceSplit(e_var, var_e)


def beta_binomial_variance(spec: BetaBinomialSpec, data: Dataset | None = None) -> float:
    """Marginal variance m pbar (1 - pbar) (1 + (m - 1)/(a + b + 1))."""
    a, b = _beta_posterior(spec, data)
    p = a / (a + b)
    return spec.m * p * (1 - p) * (1 + (spec.m - 1) / (a + b + 1))


class BetaBinomialBackend(Backend):
    """Y ~ Binomial(m, p), p ~ Beta(a, b); parameter layer is p."""

    has_parameter = True

    def __init__(self, spec: BetaBinomialSpec):
        self.spec = spec

    def log_marginal(self, data):
        if data.n == 0:
            return 0.0
        a, b = _beta_posterior(self.spec, data)
        y = data.responses
        m = self.spec.m
        log_choose = float((gammaln(m + 1) - gammaln(y + 1) - gammaln(m - y + 1)).sum())
        return log_choose + float(betaln(a, b) - betaln(self.spec.a, self.spec.b))

    def moments(self, data):
        a, b = _beta_posterior(self.spec, data)
        return PredictiveMoments(self.spec.m * a / (a + b), beta_binomial_variance(self.spec, data))

    def sample(self, data, rng, size):
        return self.sample_given_parameters(data, self.draw_parameters(data, rng, size), rng)

    def parameter_split(self, data):
        return tuple(beta_binomial_decomposition(self.spec, data))

    def draw_parameters(self, data, rng, size):
        a, b = _beta_posterior(self.spec, data)
        return rng.beta(a, b, size)

    def parameter_moments(self, data, params):
        p = np.asarray(params, dtype=float)
        m = self.spec.m
        return m * p, m * p * (1 - p)

    def sample_given_parameters(self, data, params, rng):
        return rng.binomial(self.spec.m, np.asarray(params, dtype=float)).astype(float)


class BernoulliFixedBackend(Backend):
    """Y ~ Bernoulli(p) with p known; no parameter layer."""

    def __init__(self, p: float):
        if not 0 <= p <= 1:
            raise ValueError(f"p must lie in [0, 1], got {p!r}")
        self.p = float(p)

    def log_marginal(self, data):
        y = data.responses
        if data.n == 0:
            return 0.0
        if np.any((y != 0) & (y != 1)):
            raise ValueError("Bernoulli responses must be 0 or 1")
        k = float(y.sum())
        n = data.n
        if self.p in (0.0, 1.0):
            consistent = k == n * self.p
            return 0.0 if consistent else -math.inf
        return k * math.log(self.p) + (n - k) * math.log1p(-self.p)

    def moments(self, data):
        return PredictiveMoments(self.p, self.p * (1 - self.p))

    def sample(self, data, rng, size):
        return (rng.random(size) < self.p).astype(float)


class DiscreteBackend(Backend):
    """Fixed finite-support predictive with a given log marginal likelihood.

    Useful for building exactly solvable test models.
    """

    def __init__(self, support, probs, log_marginal: float = 0.0):
        self.support = np.asarray(support, dtype=float)
        self.probs = np.asarray(probs, dtype=float)
        if self.support.shape != self.probs.shape or np.any(self.probs < 0):
            raise ValueError("support and probs must align and probs be nonnegative")
        if abs(self.probs.sum() - 1) > 1e-12:
            raise ValueError("probs must sum to 1")
        self._log_marginal = float(log_marginal)

    def log_marginal(self, data):
        return self._log_marginal

    def moments(self, data):
        mean = float(self.probs @ self.support)
        return PredictiveMoments(mean, float(self.probs @ (self.support - mean) ** 2))

    def sample(self, data, rng, size):
        return rng.choice(self.support, size=size, p=self.probs)
