"""Bundled analyses: the O-ring model grid, BMA equivalence checks,
variable-set importance and the simulated binomial sample-size sweep."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .conjugate import (
    BetaBinomialBackend,
    BetaBinomialSpec,
    NormalKnownVarBackend,
    NormalKnownVarSpec,
)
from .cscope import parse_plan, term_labels
from .decomp import (
    DEFAULT_SEED,
    ConservationError,
    DecompositionResult,
    _thread_count,
    decompose_exact,
)
from .glm import (
    ConvergenceError,
    GlmBackend,
    GlmModelSpec,
    Link,
    McmcSettings,
    RankDeficientDesignError,
    SaddlePointError,
    fit_component,
)
from .hierarchy import (
    Dataset,
    FactorSpec,
    HierarchicalModel,
    PosteriorTable,
    joint_posterior,
    marginalize,
    moment_grid,
)

CHALLENGER_TRIALS = 6
CHALLENGER_ROWS = 23
LINKS = (Link.LOGIT, Link.CLOGLOG, Link.PROBIT)
# V_2 levels in table order; () is the intercept-only model
CHALLENGER_SUBSETS: tuple[tuple[str, ...], ...] = (
    ("t",),
    ("t2",),
    ("s",),
    ("t", "t2"),
    ("t", "s"),
    ("t2", "s"),
    ("t", "t2", "s"),
    (),
)
# models with nonzero prior in the restricted six-model analysis (1-based table ids)
RESTRICTED_MODELS = (1, 4, 5, 7, 8, 15)

FIT_ERRORS = (ConvergenceError, SaddlePointError, RankDeficientDesignError, np.linalg.LinAlgError)


class ModelFitError(RuntimeError):
    pass


def subset_label(subset: tuple[str, ...]) -> str:
    return "+".join(subset) if subset else "none"


# ---------------------------------------------------------------- Challenger


@dataclass(frozen=True)
class ChallengerData:
    data: Dataset
    t_mean: float

    def x_new(self, t: float, s: float) -> dict[str, float]:
        return {"t": float(t), "t2": (float(t) - self.t_mean) ** 2, "s": float(s)}


def load_challenger() -> ChallengerData:
    """The bundled 23-flight record, with t2 = (t - mean t)^2 added."""
    text = resources.files("ppvar.data").joinpath("challenger.csv").read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    if len(rows) != CHALLENGER_ROWS:
        raise ValueError(f"challenger.csv has {len(rows)} rows, expected {CHALLENGER_ROWS}")
    y = np.array([float(r["damaged"]) for r in rows])
    if np.any((y < 0) | (y > CHALLENGER_TRIALS)):
        raise ValueError("damaged counts must lie in 0..6")
    t = np.array([float(r["t"]) for r in rows])
    s = np.array([float(r["s"]) for r in rows])
    t_mean = float(t.mean())
    data = Dataset(y, {"t": t, "t2": (t - t_mean) ** 2, "s": s})
    return ChallengerData(data, t_mean)


@dataclass(frozen=True)
class ChallengerConfig:
    method: str = "mcmc"
    prior_sd: float = 10.0
    t_new: float = 31.0
    s_new: float = 200.0
    seed: int = DEFAULT_SEED
    mcmc: McmcSettings = McmcSettings()

    def snapshot(self) -> dict:
        return {
            "method": self.method,
            "prior_sd": self.prior_sd,
            "t_new": self.t_new,
            "s_new": self.s_new,
            "seed": self.seed,
            "chain_length": self.mcmc.chain_length,
            "burn_in": self.mcmc.burn_in,
            "step_scale": self.mcmc.step_scale,
            "trials": CHALLENGER_TRIALS,
            "t2": "(t - mean t)^2, then standardized",
            "coefficient_prior": f"Normal(0, {self.prior_sd}) on standardized covariates",
        }


@dataclass(frozen=True)
class ModelRow:
    model_id: int
    link: str
    subset: str
    log_marginal: float
    prior: float
    posterior: float
    mean: float
    variance: float
    acceptance_rate: float | None


@dataclass(frozen=True)
class ChallengerRun:
    config: ChallengerConfig
    model: HierarchicalModel
    posterior: PosteriorTable
    result: DecompositionResult
    restricted: DecompositionResult
    models: tuple[ModelRow, ...]
    subset_importance: tuple[tuple[str, float], ...]


def model_seed(seed: int, model_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(model_id)]).generate_state(1)[0])


def challenger_factors(restricted: bool = False) -> tuple[FactorSpec, FactorSpec]:
    links = [lk.code for lk in LINKS]
    subsets = [subset_label(s) for s in CHALLENGER_SUBSETS]
    if not restricted:
        return FactorSpec.uniform("link", links), FactorSpec.uniform("subset", subsets)
    # uniform over the six restricted models, written as link prior x subset|link prior
    counts = {code: 0 for code in links}
    allowed: dict[str, list[int]] = {code: [] for code in links}
    for mid in RESTRICTED_MODELS:
        code = links[(mid - 1) // len(subsets)]
        counts[code] += 1
        allowed[code].append((mid - 1) % len(subsets))
    total = len(RESTRICTED_MODELS)
    link_prior = FactorSpec("link", tuple(links), {(): tuple(counts[c] / total for c in links)})
    rows = {(): tuple([1.0 / len(subsets)] * len(subsets))}
    for code in links:
        if allowed[code]:
            k = len(allowed[code])
            rows[(code,)] = tuple(1.0 / k if i in allowed[code] else 0.0 for i in range(len(subsets)))
    return link_prior, FactorSpec("subset", tuple(subsets), rows)


def _fit_challenger_model(args) -> GlmBackend:
    model_id, link, subset, data, x_new, config = args
    spec = GlmModelSpec(link, subset, CHALLENGER_TRIALS, config.prior_sd)
    try:
        return fit_component(spec, data, x_new, "probability", config.method,
                             model_seed(config.seed, model_id), config.mcmc)
    except FIT_ERRORS as exc:
        raise ModelFitError(f"model m{model_id} ({spec.label}) failed to fit: {exc}") from exc


def run_challenger(config: ChallengerConfig = ChallengerConfig(), threads: int | None = None) -> ChallengerRun:
    """Three-term decomposition of Var(p at the prediction point) over 24 link x subset models."""
    ch = load_challenger()
    data = ch.data
    x_new = ch.x_new(config.t_new, config.s_new)
    jobs = []
    mid = 0
    for link in LINKS:
        for subset in CHALLENGER_SUBSETS:
            mid += 1
            jobs.append((mid, link, subset, data, x_new, config))
    workers = _thread_count(threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            backends = list(pool.map(_fit_challenger_model, jobs))
    else:
        backends = [_fit_challenger_model(j) for j in jobs]
    components = {
        (job[1].code, subset_label(job[2])): b for job, b in zip(jobs, backends)
    }
    model = HierarchicalModel(challenger_factors(), components)
    posterior = joint_posterior(model, data)
    grid = moment_grid(model, data, posterior)
    result = decompose_exact(model, data, posterior, parse_plan("1|2", 2), grid).check()

    restricted_model = HierarchicalModel(challenger_factors(restricted=True), components)
    restricted_post = joint_posterior(restricted_model, data)
    restricted = decompose_exact(restricted_model, data, restricted_post, parse_plan("1,2", 2)).check()

    prior = np.exp(model.log_prior())
    rows = []
    for job, b in zip(jobs, backends):
        i = LINKS.index(job[1])
        j = CHALLENGER_SUBSETS.index(job[2])
        m = b.moments(data)
        rows.append(ModelRow(
            job[0], job[1].code, subset_label(job[2]), b.fit.log_marginal,
            float(prior[i, j]), float(posterior.weights[i, j]), m.mean, m.variance,
            b.draws.acceptance_rate if b.draws is not None else None,
        ))
    importance = variable_set_importance(model, data, posterior)
    return ChallengerRun(config, model, posterior, result, restricted, tuple(rows), importance)


def variable_set_importance(
    model: HierarchicalModel,
    data: Dataset,
    posterior: PosteriorTable | None = None,
    factor: str = "subset",
) -> tuple[tuple[str, float], ...]:
    """Posterior probability of each level of the subset factor, other factors summed out."""
    names = [f.name for f in model.factors]
    if factor not in names:
        if len(names) == 0:
            raise ValueError("model has no discrete factor")
        factor = names[-1]
    k = names.index(factor) + 1
    posterior = posterior if posterior is not None else joint_posterior(model, data)
    probs = marginalize(posterior, [k])
    return tuple((lv, float(probs[(lv,)])) for lv in model.factors[k - 1].levels)


# ---------------------------------------------------------------- BMA


BMA_FORMS = {
    "model-index": "1",      # condition on J, parameter mixed out
    "joint": "1,2",          # condition on (J, theta) jointly
    "nested": "1|2",         # J then theta
}


@dataclass(frozen=True)
class BmaEquivalenceReport:
    forms: dict[str, DecompositionResult]
    mixture_total: float

    @property
    def totals(self) -> dict[str, float]:
        return {name: r.term_sum for name, r in self.forms.items()}

    @property
    def max_relative_gap(self) -> float:
        vals = list(self.totals.values()) + [self.mixture_total]
        scale = max(1.0, max(abs(v) for v in vals))
        return (max(vals) - min(vals)) / scale


def bma_equivalence_check(model: HierarchicalModel, data: Dataset, tol: float = 1e-10) -> BmaEquivalenceReport:
    """Two two-term forms and the three-term form of a one-factor BMA must share a total."""
    if model.n_discrete != 1 or model.parameter is None:
        raise ValueError("BMA check needs one discrete model factor and a parameter layer")
    posterior = joint_posterior(model, data)
    grid = moment_grid(model, data, posterior)
    forms = {
        name: decompose_exact(model, data, posterior, parse_plan(text, 2), grid)
        for name, text in BMA_FORMS.items()
    }
    # direct mixture: sum_j w_j (v_j + mu_j^2) - (sum_j w_j mu_j)^2
    w = posterior.weights
    mu = np.array([model.component((j,)).moments(data).mean for j in range(w.size)])
    v = np.array([model.component((j,)).moments(data).variance for j in range(w.size)])
    mixture_mean = float(w @ mu)
    mixture_total = float(w @ (v + (mu - mixture_mean) ** 2))
    report = BmaEquivalenceReport(forms, mixture_total)
    if report.max_relative_gap > tol:
        raise ConservationError(f"BMA totals disagree: {report.totals} vs mixture {mixture_total!r}")
    return report


def random_bma(rng: np.random.Generator, n_models: int = 3, family: str = "normal-normal"):
    """A random one-factor BMA with a parameter layer, plus data for it."""
    levels = [f"M{j + 1}" for j in range(n_models)]
    prior = rng.dirichlet(np.ones(n_models))
    prior = prior / prior.sum()
    prior[-1] = 1.0 - prior[:-1].sum()
    factor = FactorSpec("model", tuple(levels), {(): tuple(prior)})
    if family == "normal-normal":
        specs = [
            NormalKnownVarSpec(float(rng.uniform(0.5, 2.0)), float(rng.normal(0, 2)), float(rng.uniform(0.3, 3.0)))
            for _ in levels
        ]
        data = Dataset(rng.normal(rng.normal(0, 1), 1.0, size=int(rng.integers(1, 8))))
        backends = {(lv,): NormalKnownVarBackend(s) for lv, s in zip(levels, specs)}
    elif family == "beta-binomial":
        m = int(rng.integers(2, 12))
        specs = [
            BetaBinomialSpec(m, float(rng.uniform(0.5, 5.0)), float(rng.uniform(0.5, 5.0)))
            for _ in levels
        ]
        data = Dataset(rng.integers(0, m + 1, size=int(rng.integers(1, 6))).astype(float))
        backends = {(lv,): BetaBinomialBackend(s) for lv, s in zip(levels, specs)}
    else:
        raise ValueError(f"unknown BMA family {family!r}")
    return HierarchicalModel((factor,), backends, parameter="theta"), data


# ---------------------------------------------------------------- sweep


SWEEP_COVARIATES = tuple(f"x{i}" for i in range(1, 11))
TERM_NAMES = ("predictions", "models", "links")


def sweep_subsets(active: int = 4) -> tuple[tuple[str, ...], ...]:
    """All subsets of the first ``active`` covariates, then the full model."""
    base = SWEEP_COVARIATES[:active]
    out = []
    for mask in range(2 ** active):
        out.append(tuple(c for i, c in enumerate(base) if mask >> i & 1))
    out.sort(key=lambda s: (len(s), s))
    out.append(SWEEP_COVARIATES)
    return tuple(out)


@dataclass(frozen=True)
class SweepConfig:
    n_grid: tuple[int, ...] = (25, 50, 100, 200, 400)
    replicates: int = 20
    true_beta: tuple[float, ...] = (0.75, 0.25, -0.3, 0.5, 0, 0, 0, 0, 0, 0)
    trials: int = 30
    seed: int = DEFAULT_SEED
    prior_sd: float = 10.0
    method: str = "laplace"
    active: int = 4

    def __post_init__(self):
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        object.__setattr__(self, "true_beta", tuple(float(b) for b in self.true_beta))
        if len(self.true_beta) != len(SWEEP_COVARIATES):
            raise ValueError(f"true_beta must have {len(SWEEP_COVARIATES)} entries")
        if not self.n_grid or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError("n_grid must be nonempty and strictly increasing")
        if self.n_grid[0] < 2:
            raise ValueError("sample sizes must be at least 2")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.trials < 1:
            raise ValueError("trials must be positive")
        if not 0 <= self.active <= len(SWEEP_COVARIATES):
            raise ValueError("active must lie in 0..10")

    def snapshot(self) -> dict:
        return {
            "n_grid": list(self.n_grid),
            "replicates": self.replicates,
            "true_beta": list(self.true_beta),
            "trials": self.trials,
            "seed": self.seed,
            "prior_sd": self.prior_sd,
            "method": self.method,
            "subset_family": [subset_label(s) for s in sweep_subsets(self.active)],
            "coefficient_prior": f"Normal(0, {self.prior_sd}) on standardized covariates",
        }


@dataclass(frozen=True)
class ReplicateOutcome:
    n: int
    replicate: int
    values: tuple[float, ...] | None
    total: float | None
    error: str | None = None

    @property
    def proportions(self) -> tuple[float, ...]:
        return tuple(v / self.total for v in self.values)


@dataclass(frozen=True)
class SweepResult:
    config: SweepConfig
    outcomes: tuple[ReplicateOutcome, ...]
    labels: tuple[str, ...] = field(default=())

    @property
    def failures(self) -> tuple[ReplicateOutcome, ...]:
        return tuple(o for o in self.outcomes if o.error is not None)

    @property
    def failure_fraction(self) -> float:
        return len(self.failures) / len(self.outcomes)

    def curves(self) -> list[dict]:
        """Per-n averages of term values, totals and proportions over successful replicates."""
        out = []
        for n in self.config.n_grid:
            ok = [o for o in self.outcomes if o.n == n and o.error is None]
            row = {"n": n, "replicates": len(ok)}
            if ok:
                vals = np.array([o.values for o in ok])
                props = np.array([o.proportions for o in ok])
                row["total"] = float(np.mean([o.total for o in ok]))
                for i, name in enumerate(TERM_NAMES):
                    row[name] = float(vals[:, i].mean())
                    row[f"{name}_proportion"] = float(props[:, i].mean())
            out.append(row)
        return out


def simulate_replicate(config: SweepConfig, n: int, replicate: int):
    """Data from the true logit model and a fresh prediction point.

    Data streams are keyed by (seed, n, replicate). The prediction point is
    keyed by (seed, replicate) only, so every n in a replicate predicts at
    the same x_new.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), int(n), int(replicate)]))
    X = rng.standard_normal((n, len(SWEEP_COVARIATES)))
    p = 1.0 / (1.0 + np.exp(-(X @ np.array(config.true_beta))))
    y = rng.binomial(config.trials, p).astype(float)
    data = Dataset(y, {c: X[:, i] for i, c in enumerate(SWEEP_COVARIATES)})
    xrng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0, int(replicate), 1]))
    x_new = dict(zip(SWEEP_COVARIATES, (float(v) for v in xrng.standard_normal(len(SWEEP_COVARIATES)))))
    return data, x_new


def run_replicate(config: SweepConfig, n: int, replicate: int) -> ReplicateOutcome:
    data, x_new = simulate_replicate(config, n, replicate)
    subsets = sweep_subsets(config.active)
    components = {}
    try:
        for i, link in enumerate(LINKS):
            for j, subset in enumerate(subsets):
                spec = GlmModelSpec(link, subset, config.trials, config.prior_sd)
                seed = model_seed(config.seed, (n * 1000 + replicate) * 1000 + i * 100 + j)
                components[(link.code, subset_label(subset))] = fit_component(
                    spec, data, x_new, "count", config.method, seed
                )
    except FIT_ERRORS as exc:
        return ReplicateOutcome(n, replicate, None, None, f"{type(exc).__name__}: {exc}")
    factors = (
        FactorSpec.uniform("link", [lk.code for lk in LINKS]),
        FactorSpec.uniform("subset", [subset_label(s) for s in subsets]),
    )
    model = HierarchicalModel(factors, components)
    posterior = joint_posterior(model, data)
    result = decompose_exact(model, data, posterior, parse_plan("1|2", 2)).check()
    return ReplicateOutcome(n, replicate, result.values, result.total)


def run_sweep(config: SweepConfig = SweepConfig(), threads: int | None = None) -> SweepResult:
    jobs = [(n, r) for n in config.n_grid for r in range(config.replicates)]
    workers = _thread_count(threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda job: run_replicate(config, *job), jobs))
    else:
        outcomes = [run_replicate(config, *job) for job in jobs]
    labels = tuple(lbl.pattern for lbl in term_labels(parse_plan("1|2", 2)))
    return SweepResult(config, tuple(outcomes), labels)


def sweep_trends(curves: list[dict]) -> dict[str, bool]:
    """The three qualitative claims: total falls, models share falls, links share grows."""
    rows = [c for c in curves if c["replicates"] > 0]
    first, last = rows[0], rows[-1]
    models = [r["models_proportion"] for r in rows]
    violations = sum(b > a for a, b in zip(models, models[1:]))
    return {
        "total_decreases": last["total"] < first["total"],
        "models_share_nonincreasing": violations <= 1,
        "links_share_increases": last["links_proportion"] > first["links_proportion"],
    }
