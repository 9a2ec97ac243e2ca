import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ppvar.conjugate import BernoulliFixedBackend, DiscreteBackend
from ppvar.hierarchy import Dataset, FactorSpec, HierarchicalModel

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def bernoulli_toy():
    """V1 in {a, b}, uniform; Y|a ~ Bernoulli(0.2), Y|b ~ Bernoulli(0.6); no data."""
    f = FactorSpec.uniform("model", ["a", "b"])
    model = HierarchicalModel.build([f], lambda lv: BernoulliFixedBackend({"a": 0.2, "b": 0.6}[lv[0]]))
    return model, Dataset.empty()


def random_discrete_model(rng: np.random.Generator, shape: tuple[int, ...], support: int = 4):
    """A random factor grid with nonuniform chain priors and finite-support backends."""
    factors = []
    for k, m in enumerate(shape):
        levels = tuple(f"{chr(97 + k)}{i}" for i in range(m))
        rows = {(): tuple(_simplex(rng, m))}
        if k > 0:
            for parents in _parent_keys(factors):
                rows[parents] = tuple(_simplex(rng, m))
        factors.append(FactorSpec(f"V{k + 1}", levels, rows))
    values = rng.normal(0, 2, size=support)

    def backend(levels):
        return DiscreteBackend(values, _simplex(rng, support), float(rng.normal(0, 1.5)))

    return HierarchicalModel.build(factors, backend)


def _simplex(rng, m):
    w = rng.dirichlet(np.ones(m))
    w[-1] = 1.0 - w[:-1].sum()
    return np.clip(w, 0, None)


def _parent_keys(factors):
    import itertools

    return list(itertools.product(*(f.levels for f in factors)))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
