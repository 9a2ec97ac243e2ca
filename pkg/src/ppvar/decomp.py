"""Exact and Monte Carlo evaluation of decomposition plans.

Terms are returned in label order: the leading E..E Var term first, then the
Var-E terms for blocks m down to 1. The total is computed once from the
posterior and does not depend on the plan.
"""

from __future__ import annotations

import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cscope import DecompositionPlan, PlanError, TermLabel, term_labels
from .hierarchy import (
    Dataset,
    HierarchicalModel,
    MomentGrid,
    PosteriorTable,
    PredictiveMoments,
    mixture_moments,
    moment_grid,
)

EXACT_TOL = 1e-10
DEFAULT_SEED = 20240607
MC_BLOCK = 64


class ConservationError(RuntimeError):
    """Terms of a decomposition fail to add up to the total variance."""


@dataclass(frozen=True)
class TermEstimate:
    label: TermLabel
    value: float
    std_error: float = 0.0
    engine: str = "exact"


@dataclass(frozen=True)
class DecompositionResult:
    plan: DecompositionPlan
    terms: tuple[TermEstimate, ...]
    total: float
    engine: str = "exact"
    seed: int | None = None
    factor_names: tuple[str, ...] = ()

    @property
    def term_sum(self) -> float:
        return float(np.sum([t.value for t in self.terms]))

    @property
    def residual(self) -> float:
        return self.total - self.term_sum

    @property
    def residual_se(self) -> float:
        return math.sqrt(sum(t.std_error**2 for t in self.terms))

    @property
    def proportions(self) -> tuple[float, ...]:
        if self.total == 0:
            return tuple(0.0 for _ in self.terms)
        return tuple(t.value / self.total for t in self.terms)

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(t.value for t in self.terms)

    def conserved(self, n_se: float = 3.0) -> bool:
        if self.engine == "exact":
            return abs(self.residual) <= EXACT_TOL * max(1.0, abs(self.total))
        return abs(self.residual) <= n_se * self.residual_se

    def check(self) -> "DecompositionResult":
        if not self.conserved():
            raise ConservationError(
                f"plan {self.plan.text()}: terms sum to {self.term_sum!r}, total is {self.total!r}"
            )
        return self

    def term(self, pattern: str) -> TermEstimate:
        for t in self.terms:
            if t.label.pattern == pattern:
                return t
        raise KeyError(pattern)


def _check_plan(model: HierarchicalModel, plan: DecompositionPlan) -> None:
    if plan.K != model.K:
        raise PlanError(f"plan is for K={plan.K} but the model has K={model.K} factors")
    p = model.parameter_index
    if p is None or p not in plan.manifest:
        return
    # the parameter layer is nested in the discrete factors: it can be
    # conditioned on only once every discrete factor is bound
    if p not in plan.blocks[-1] or plan.latent:
        raise PlanError(
            f"factor V{p} ({model.parameter}) is a backend parameter; it must sit in the "
            "last block with no discrete factor latent"
        )


def _discrete_axes(model: HierarchicalModel, blocks) -> tuple[int, ...]:
    return tuple(k - 1 for b in blocks for k in b if k <= model.n_discrete)


def total_variance(model: HierarchicalModel, data: Dataset, posterior: PosteriorTable,
                   grid: MomentGrid | None = None) -> PredictiveMoments:
    """Var(Y_{n+1} | D): the mixture over every factor."""
    grid = grid if grid is not None else moment_grid(model, data, posterior)
    _, mean, var = mixture_moments(grid, ())
    return PredictiveMoments(float(mean.item()), max(float(var.item()), 0.0))


def _weighted(mass: np.ndarray, values: np.ndarray) -> float:
    keep = mass > 0
    return float(np.sum(np.where(keep, mass * np.where(keep, values, 0.0), 0.0)))


def decompose_exact(
    model: HierarchicalModel,
    data: Dataset,
    posterior: PosteriorTable,
    plan: DecompositionPlan,
    grid: MomentGrid | None = None,
) -> DecompositionResult:
    """Every term of ``plan`` by nested weighted sums over the factor grid."""
    _check_plan(model, plan)
    grid = grid if grid is not None else moment_grid(model, data, posterior)
    total = total_variance(model, data, posterior, grid).variance
    p = model.parameter_index
    param_bound = p is not None and p in plan.manifest
    labels = term_labels(plan)
    values = []
    for label in labels:
        if label.block == 0:
            C = _discrete_axes(model, plan.blocks)
            if param_bound:
                values.append(float(np.sum(grid.weights * grid.e_var)))
            else:
                mass, _, var = mixture_moments(grid, C)
                values.append(_weighted(mass, var))
            continue
        j = label.block
        A = _discrete_axes(model, plan.blocks[: j - 1])
        AB = _discrete_axes(model, plan.blocks[:j])
        _, mean_a, _ = mixture_moments(grid, A)
        mass_ab, mean_ab, _ = mixture_moments(grid, AB)
        value = _weighted(mass_ab, (mean_ab - mean_a) ** 2)
        if param_bound and p in plan.blocks[j - 1]:
            value += float(np.sum(grid.weights * grid.var_e))
        values.append(value)
    terms = tuple(TermEstimate(lbl, v, 0.0, "exact") for lbl, v in zip(labels, values))
    return DecompositionResult(plan, terms, total, "exact", None, tuple(model.factor_names()))


class _Layout:
    """Discrete grid reordered as (first axes, second axes, remaining axes) and flattened."""

    def __init__(self, grid: MomentGrid, first: tuple[int, ...], second: tuple[int, ...]):
        shape = grid.weights.shape
        rest = tuple(a for a in range(len(shape)) if a not in first + second)
        self.order = first + second + rest
        self.dims = tuple(shape[a] for a in self.order)
        n1 = int(np.prod([shape[a] for a in first], dtype=int))
        n2 = int(np.prod([shape[a] for a in second], dtype=int))
        n3 = int(np.prod([shape[a] for a in rest], dtype=int))
        w = np.transpose(grid.weights, self.order).reshape(n1, n2, n3)
        mu = np.transpose(grid.mean, self.order).reshape(n1, n2, n3)
        self.w = w
        self.mu = mu
        self.mass12 = w.sum(axis=2)
        self.mass1 = self.mass12.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.mean12 = np.where(self.mass12 > 0, (w * mu).sum(axis=2) / self.mass12, 0.0)
        self.n = (n1, n2, n3)

    def original_index(self, i1: int, i2: int, i3: int) -> tuple[int, ...]:
        flat = (i1 * self.n[1] + i2) * self.n[2] + i3
        idx_ordered = np.unravel_index(flat, self.dims) if self.dims else ()
        out = [0] * len(self.order)
        for pos, axis in enumerate(self.order):
            out[axis] = int(idx_ordered[pos])
        return tuple(out)


def _sample_var(x: np.ndarray) -> float:
    return float(np.var(x, ddof=1))


def _choice(rng: np.random.Generator, probs: np.ndarray, size=None):
    probs = probs / probs.sum()
    return rng.choice(probs.shape[0], size=size, p=probs)


def _thread_count(threads: int | None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("PPV_THREADS")
    return max(1, int(env)) if env else 1


def _term_key(seed: int, plan: DecompositionPlan, term_index: int) -> np.ndarray:
    plan_id = zlib.crc32(plan.text().encode())
    ss = np.random.SeedSequence([int(seed), plan_id, term_index])
    return ss.generate_state(2, np.uint64)


def _block_rng(key: np.ndarray, block: int) -> np.random.Generator:
    # counter-based stream: the block index occupies the top counter word
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, block]))


def decompose_mc(
    model: HierarchicalModel,
    data: Dataset,
    posterior: PosteriorTable,
    plan: DecompositionPlan,
    budget: tuple[int, int] = (4096, 1024),
    seed: int = DEFAULT_SEED,
    threads: int | None = None,
) -> DecompositionResult:
    """Nested Monte Carlo estimate of every term of ``plan``.

    Each term is an average over ``outer`` independent draws of an unbiased
    (n - 1 divisor) sample variance computed from ``inner`` draws:

    * leading term: outer draws of the manifest factors (and the parameter
      layer if manifest); inner predictive draws of Y from the backend, with
      latent factors sampled per draw.
    * block j: outer draws of blocks 1..j-1; inner draws of block j, each
      mapped to its conditional predictive mean.

    Standard errors are batch means over the outer draws. Results depend only
    on (seed, budget, plan), not on ``threads`` or scheduling.
    """
    outer, inner = (int(x) for x in budget)
    if inner < 2:
        raise ValueError("inner budget must be at least 2 draws for a variance estimate")
    if outer < 2:
        raise ValueError("outer budget must be at least 2 for a standard error")
    _check_plan(model, plan)
    grid = moment_grid(model, data, posterior)
    total = total_variance(model, data, posterior, grid).variance
    p = model.parameter_index
    param_bound = p is not None and p in plan.manifest
    labels = term_labels(plan)
    n_blocks = -(-outer // MC_BLOCK)
    workers = _thread_count(threads)

    terms = []
    for t, label in enumerate(labels):
        key = _term_key(seed, plan, t)
        if label.block == 0:
            layout = _Layout(grid, _discrete_axes(model, plan.blocks), ())
            draw = _leading_sampler(model, data, layout, inner, param_bound)
            param_here = param_bound
        else:
            j = label.block
            layout = _Layout(
                grid,
                _discrete_axes(model, plan.blocks[: j - 1]),
                _discrete_axes(model, plan.blocks[j - 1 : j]),
            )
            param_here = param_bound and p in plan.blocks[j - 1]
            draw = _block_sampler(model, data, layout, inner, param_here)

        def run(block: int, draw=draw, key=key) -> np.ndarray:
            rng = _block_rng(key, block)
            count = min(MC_BLOCK, outer - block * MC_BLOCK)
            return np.array([draw(rng) for _ in range(count)])

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                chunks = list(pool.map(run, range(n_blocks)))
        else:
            chunks = [run(b) for b in range(n_blocks)]
        s2 = np.concatenate(chunks)
        value = float(np.mean(s2))
        se = float(np.std(s2, ddof=1) / math.sqrt(outer))
        terms.append(TermEstimate(label, value, se, "monte-carlo"))
    return DecompositionResult(plan, tuple(terms), total, "monte-carlo", int(seed),
                               tuple(model.factor_names()))


def _leading_sampler(model, data, layout: _Layout, inner: int, param_bound: bool):
    def draw(rng: np.random.Generator) -> float:
        c = int(_choice(rng, layout.mass1))
        if param_bound:
            comp = model.component(layout.original_index(c, 0, 0))
            theta = comp.draw_parameters(data, rng, 1)
            ys = comp.sample_given_parameters(data, np.repeat(theta, inner, axis=0), rng)
            return _sample_var(ys)
        counts = np.bincount(_choice(rng, layout.w[c, 0], inner), minlength=layout.n[2])
        ys = [
            model.component(layout.original_index(c, 0, u)).sample(data, rng, int(k))
            for u, k in enumerate(counts)
            if k > 0
        ]
        return _sample_var(np.concatenate(ys))

    return draw


def _block_sampler(model, data, layout: _Layout, inner: int, param_here: bool):
    def draw(rng: np.random.Generator) -> float:
        a = int(_choice(rng, layout.mass1))
        bs = _choice(rng, layout.mass12[a], inner)
        if not param_here:
            return _sample_var(layout.mean12[a, bs])
        counts = np.bincount(bs, minlength=layout.n[1])
        g = []
        for b, k in enumerate(counts):
            if k == 0:
                continue
            comp = model.component(layout.original_index(a, b, 0))
            theta = comp.draw_parameters(data, rng, int(k))
            means, _ = comp.parameter_moments(data, theta)
            g.append(np.asarray(means, dtype=float))
        return _sample_var(np.concatenate(g))

    return draw


@dataclass(frozen=True)
class FlaggedTerm:
    label: TermLabel
    proportion: float
    fix_factors: tuple[int, ...] = ()


@dataclass(frozen=True)
class DropReport:
    threshold: float
    flagged: tuple[FlaggedTerm, ...] = ()
    reduced_expression: str | None = None
    suggestion: str | None = None

    @property
    def empty(self) -> bool:
        return not self.flagged


def drop_term_report(result: DecompositionResult, threshold: float) -> DropReport:
    """Terms whose share of the total falls below ``threshold``.

    Only a small trailing Var_{B_1} E term licenses a reduction: the factors of
    B_1 can be held fixed, leaving the decomposition over the remaining
    blocks.
    """
    flagged = []
    reduced = None
    suggestion = None
    plan = result.plan
    for term, prop in zip(result.terms, result.proportions):
        if not prop < threshold:
            continue
        fix: tuple[int, ...] = ()
        if term.label.block == 1:
            fix = plan.blocks[0]
            rest = plan.blocks[1:]
            names = [_factor_name(result, k) for k in fix]
            suggestion = f"fix {', '.join(names)} at a single level"
            if rest:
                reduced_plan = DecompositionPlan.from_blocks(rest, plan.K)
                reduced = " + ".join(lbl.pattern for lbl in term_labels(reduced_plan))
            else:
                reduced = "Var(Y|D)"
        flagged.append(FlaggedTerm(term.label, prop, fix))
    return DropReport(threshold, tuple(flagged), reduced, suggestion)


def _factor_name(result: DecompositionResult, k: int) -> str:
    if 0 < k <= len(result.factor_names):
        return f"V{k} ({result.factor_names[k - 1]})"
    return f"V{k}"
