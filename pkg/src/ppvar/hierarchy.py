"""Hierarchical factor structures, joint posteriors and mixture predictive moments.

A model is a grid of discrete factors V_1..V_K (link function, covariate
subset, model index, ...) with a chain of conditional priors, and one
predictive backend per full assignment of the factors. A backend may
additionally expose a continuous *parameter layer* (e.g. the mean of a
Normal model); that layer then counts as the innermost factor V_{K}.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

WEIGHT_TOL = 1e-12
NORMALIZATION_TOL = 1e-10


class DegeneratePosteriorError(ValueError):
    """All unnormalized posterior weights are zero."""


class NullEventError(ValueError):
    """Conditioning on an assignment with zero posterior mass."""


class BackendError(RuntimeError):
    """A component backend failed for a specific factor assignment."""

    def __init__(self, levels: tuple[str, ...], cause: Exception):
        super().__init__(f"backend failed for assignment {levels!r}: {cause}")
        self.levels = levels
        self.cause = cause


@dataclass(frozen=True)
class PredictiveMoments:
    mean: float
    variance: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.variance)):
            raise ValueError(f"non-finite moments: {self.mean}, {self.variance}")
        if self.variance < 0:
            raise ValueError(f"negative variance {self.variance}")


@dataclass(frozen=True)
class Dataset:
    """Observed responses with optional named covariate columns."""

    responses: np.ndarray
    covariates: Mapping[str, np.ndarray] | None = None

    def __post_init__(self):
        y = np.asarray(self.responses, dtype=float).reshape(-1)
        object.__setattr__(self, "responses", y)
        if self.covariates is not None:
            cols = {k: np.asarray(v, dtype=float).reshape(-1) for k, v in self.covariates.items()}
            for name, col in cols.items():
                if col.shape[0] != y.shape[0]:
                    raise ValueError(
                        f"covariate {name!r} has {col.shape[0]} rows, expected {y.shape[0]}"
                    )
            object.__setattr__(self, "covariates", cols)

    @property
    def n(self) -> int:
        return int(self.responses.shape[0])

    def column(self, name: str) -> np.ndarray:
        if not self.covariates or name not in self.covariates:
            raise KeyError(f"dataset has no covariate {name!r}")
        return self.covariates[name]

    def with_column(self, name: str, values) -> "Dataset":
        cols = dict(self.covariates or {})
        cols[name] = values
        return Dataset(self.responses, cols)

    @classmethod
    def empty(cls) -> "Dataset":
        return cls(np.zeros(0))


@dataclass(frozen=True)
class FactorSpec:
    """A discrete modeling choice with a conditional prior over its levels.

    ``prior`` maps a tuple of earlier factors' level labels to a weight vector
    over ``levels``. The empty tuple acts as a default row for any parent
    assignment that has no row of its own.
    """

    name: str
    levels: tuple[str, ...]
    prior: Mapping[tuple[str, ...], tuple[float, ...]]

    def __post_init__(self):
        levels = tuple(str(v) for v in self.levels)
        if not levels:
            raise ValueError(f"factor {self.name!r} has no levels")
        if len(set(levels)) != len(levels):
            raise ValueError(f"factor {self.name!r} has duplicate level labels")
        object.__setattr__(self, "levels", levels)
        rows = {}
        for key, row in self.prior.items():
            w = tuple(float(x) for x in row)
            if len(w) != len(levels):
                raise ValueError(
                    f"factor {self.name!r}: prior row {key!r} has {len(w)} weights, "
                    f"expected {len(levels)}"
                )
            if any(x < 0 or not math.isfinite(x) for x in w):
                raise ValueError(f"factor {self.name!r}: prior row {key!r} has a negative weight")
            if abs(sum(w) - 1.0) > WEIGHT_TOL:
                raise ValueError(
                    f"factor {self.name!r}: prior row {key!r} sums to {sum(w)!r}, not 1"
                )
            rows[tuple(key)] = w
        object.__setattr__(self, "prior", rows)

    @classmethod
    def uniform(cls, name: str, levels: Sequence[str]) -> "FactorSpec":
        m = len(levels)
        return cls(name, tuple(levels), {(): tuple([1.0 / m] * m)})

    def weights_given(self, parents: tuple[str, ...]) -> tuple[float, ...]:
        if parents in self.prior:
            return self.prior[parents]
        if () in self.prior:
            return self.prior[()]
        raise KeyError(f"factor {self.name!r} has no prior row for parents {parents!r}")

    def index(self, level: str) -> int:
        try:
            return self.levels.index(level)
        except ValueError:
            raise KeyError(f"factor {self.name!r} has no level {level!r}") from None


@dataclass(frozen=True)
class FactorAssignment:
    """Levels bound to a subset of factors; keys are 1-based factor indices."""

    bindings: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "bindings", dict(sorted(self.bindings.items())))

    @property
    def scope(self) -> frozenset[int]:
        return frozenset(self.bindings)

    def __hash__(self):
        return hash(tuple(self.bindings.items()))

    def __eq__(self, other):
        return isinstance(other, FactorAssignment) and self.bindings == other.bindings

    def __repr__(self):
        inner = ", ".join(f"V{k}={v}" for k, v in self.bindings.items())
        return f"FactorAssignment({inner})"


class Backend:
    """Per-assignment predictive model.

    Subclasses must provide ``log_marginal``, ``moments`` and ``sample``.
    Backends with a parameter layer also implement the ``*_parameter*``
    methods and set ``has_parameter = True``.
    """

    has_parameter = False

    def log_marginal(self, data: Dataset) -> float:
        raise NotImplementedError

    def moments(self, data: Dataset) -> PredictiveMoments:
        raise NotImplementedError

    def sample(self, data: Dataset, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draws from the posterior predictive of Y_{n+1}."""
        raise NotImplementedError

    def parameter_split(self, data: Dataset) -> tuple[float, float]:
        """(E Var(Y | param), Var E(Y | param)) under the parameter posterior."""
        raise NotImplementedError

    def draw_parameters(self, data: Dataset, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def parameter_moments(self, data: Dataset, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Conditional mean and variance of Y_{n+1} at each parameter draw."""
        raise NotImplementedError

    def sample_given_parameters(
        self, data: Dataset, params: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        """One Y draw per parameter value."""
        raise NotImplementedError


@dataclass(frozen=True)
class HierarchicalModel:
    factors: tuple[FactorSpec, ...]
    components: Mapping[tuple[str, ...], Backend]
    parameter: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if self.K < 1:
            raise ValueError("a hierarchical model needs at least one factor")
        grid = list(self.assignments())
        missing = [lv for lv in grid if lv not in self.components]
        if missing:
            raise ValueError(f"no backend for assignments {missing[:3]!r}")
        if len(self.components) != len(grid):
            raise ValueError("components contain assignments outside the factor grid")
        if self.parameter is not None:
            bad = [lv for lv in grid if not self.components[lv].has_parameter]
            if bad:
                raise ValueError(f"backends for {bad[:3]!r} have no parameter layer")

    @classmethod
    def build(
        cls,
        factors: Sequence[FactorSpec],
        backend: Callable[[tuple[str, ...]], Backend],
        parameter: str | None = None,
    ) -> "HierarchicalModel":
        factors = tuple(factors)
        grid = itertools.product(*(f.levels for f in factors))
        return cls(factors, {lv: backend(lv) for lv in grid}, parameter)

    @property
    def n_discrete(self) -> int:
        return len(self.factors)

    @property
    def K(self) -> int:
        return len(self.factors) + (self.parameter is not None)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(f.levels) for f in self.factors)

    @property
    def parameter_index(self) -> int | None:
        return self.K if self.parameter is not None else None

    def factor_names(self) -> list[str]:
        names = [f.name for f in self.factors]
        if self.parameter is not None:
            names.append(self.parameter)
        return names

    def assignments(self) -> Iterator[tuple[str, ...]]:
        return itertools.product(*(f.levels for f in self.factors))

    def log_prior(self) -> np.ndarray:
        """Chain-product prior over the discrete grid, in log space."""
        out = np.empty(self.shape)
        for idx in itertools.product(*(range(m) for m in self.shape)):
            levels = tuple(f.levels[i] for f, i in zip(self.factors, idx))
            total = 0.0
            for k, f in enumerate(self.factors):
                w = f.weights_given(levels[:k])[idx[k]]
                total += math.log(w) if w > 0 else -math.inf
            out[idx] = total
        return out

    def component(self, idx: tuple[int, ...]) -> Backend:
        return self.components[tuple(f.levels[i] for f, i in zip(self.factors, idx))]

    def validate_assignment(self, partial: FactorAssignment) -> None:
        for k, level in partial.bindings.items():
            if not 1 <= k <= self.n_discrete:
                raise ValueError(f"assignment binds undeclared discrete factor V{k}")
            self.factors[k - 1].index(level)


@dataclass(frozen=True)
class PosteriorTable:
    """Normalized posterior weights W(v | D) over the full discrete grid."""

    factors: tuple[FactorSpec, ...]
    weights: np.ndarray
    log_evidence: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != tuple(len(f.levels) for f in self.factors):
            raise ValueError("weight array does not match factor grid")
        if np.any(w < 0) or abs(w.sum() - 1.0) > NORMALIZATION_TOL:
            raise ValueError("posterior weights must be nonnegative and sum to 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def entries(self) -> Iterator[tuple[FactorAssignment, float]]:
        for idx in itertools.product(*(range(len(f.levels)) for f in self.factors)):
            a = FactorAssignment({k + 1: f.levels[i] for k, (f, i) in enumerate(zip(self.factors, idx))})
            yield a, float(self.weights[idx])

    def weight(self, assignment: FactorAssignment) -> float:
        if assignment.scope != frozenset(range(1, len(self.factors) + 1)):
            raise ValueError("weight() needs a full assignment")
        idx = tuple(self.factors[k - 1].index(v) for k, v in assignment.bindings.items())
        return float(self.weights[idx])


def joint_posterior(model: HierarchicalModel, data: Dataset) -> PosteriorTable:
    """Posterior over the factor grid: prior(v) * m_v(D), normalized in log space."""
    log_w = model.log_prior()
    for idx in np.ndindex(*model.shape):
        if log_w[idx] == -math.inf:
            continue
        comp = model.component(idx)
        try:
            lm = float(comp.log_marginal(data))
        except Exception as exc:
            raise BackendError(tuple(f.levels[i] for f, i in zip(model.factors, idx)), exc) from exc
        if not math.isfinite(lm):
            levels = tuple(f.levels[i] for f, i in zip(model.factors, idx))
            raise BackendError(levels, ValueError(f"log marginal likelihood is {lm}"))
        log_w[idx] += lm
    log_z = float(logsumexp(log_w))
    if not math.isfinite(log_z):
        raise DegeneratePosteriorError("all unnormalized posterior weights are zero")
    w = np.exp(log_w - log_z)
    w /= w.sum()
    return PosteriorTable(model.factors, w, log_z)


def marginalize(posterior: PosteriorTable, keep: Sequence[int] | frozenset[int]) -> dict[tuple[str, ...], float]:
    """Posterior weights over assignments of the 1-based factor indices in ``keep``.

    Keys are level tuples ordered by increasing factor index.
    """
    keep = sorted(set(keep))
    if not keep:
        raise ValueError("keep must be a nonempty set of factor indices")
    K = len(posterior.factors)
    if keep[0] < 1 or keep[-1] > K:
        raise ValueError(f"keep {keep} outside 1..{K}")
    drop = tuple(k for k in range(K) if k + 1 not in keep)
    table = posterior.weights.sum(axis=drop) if drop else posterior.weights
    out = {}
    for idx in np.ndindex(*table.shape):
        levels = tuple(posterior.factors[k - 1].levels[i] for k, i in zip(keep, idx))
        out[levels] = float(table[idx])
    return out


@dataclass(frozen=True)
class MomentGrid:
    """Posterior weights and per-assignment predictive moments as aligned arrays."""

    weights: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    # parameter-layer split; None when the model has no parameter layer
    e_var: np.ndarray | None = None
    var_e: np.ndarray | None = None


def moment_grid(model: HierarchicalModel, data: Dataset, posterior: PosteriorTable) -> MomentGrid:
    shape = model.shape
    mean = np.zeros(shape)
    var = np.zeros(shape)
    e_var = np.zeros(shape) if model.parameter is not None else None
    var_e = np.zeros(shape) if model.parameter is not None else None
    for idx in np.ndindex(*shape):
        comp = model.component(idx)
        m = comp.moments(data)
        mean[idx], var[idx] = m.mean, m.variance
        if e_var is not None:
            e_var[idx], var_e[idx] = comp.parameter_split(data)
    return MomentGrid(posterior.weights, mean, var, e_var, var_e)


def mixture_moments(grid: MomentGrid, keep: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mix out every axis not in ``keep`` (0-based).

    Returns (mass, mean, variance) with kept axes retained and mixed axes of
    length one, so results broadcast against the full grid. Cells with zero
    mass have NaN moments.
    """
    axes = tuple(a for a in range(grid.weights.ndim) if a not in keep)
    w = grid.weights
    mass = w.sum(axis=axes, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = (w * grid.mean).sum(axis=axes, keepdims=True) / mass
        spread = grid.variance + (grid.mean - mean) ** 2
        var = (w * spread).sum(axis=axes, keepdims=True) / mass
    null = mass <= 0
    mean = np.where(null, np.nan, mean)
    var = np.where(null, np.nan, var)
    return mass, mean, var


def conditional_moments(
    model: HierarchicalModel,
    data: Dataset,
    posterior: PosteriorTable,
    partial: FactorAssignment,
) -> PredictiveMoments:
    """Predictive moments of Y_{n+1} given the bound factors, latent ones mixed out.

    Only discrete factors may be bound; the parameter layer, if any, is always
    integrated by the backend here.
    """
    model.validate_assignment(partial)
    grid = moment_grid(model, data, posterior)
    keep = tuple(k - 1 for k in partial.bindings)
    mass, mean, var = mixture_moments(grid, keep)
    idx = tuple(
        model.factors[a].index(partial.bindings[a + 1]) if a in keep else 0
        for a in range(model.n_discrete)
    )
    if mass[idx] <= 0:
        raise NullEventError(f"conditioning on {partial!r}, which has zero posterior mass")
    if len(keep) == model.n_discrete:
        return model.component(idx).moments(data)
    return PredictiveMoments(float(mean[idx]), max(float(var[idx]), 0.0))
