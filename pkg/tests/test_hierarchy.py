import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_discrete_model
from ppvar.conjugate import BernoulliFixedBackend, DiscreteBackend
from ppvar.hierarchy import (
    BackendError,
    Dataset,
    DegeneratePosteriorError,
    FactorAssignment,
    FactorSpec,
    HierarchicalModel,
    NullEventError,
    PosteriorTable,
    PredictiveMoments,
    conditional_moments,
    joint_posterior,
    marginalize,
)


def brute_force_posterior(model, data):
    """Unnormalized prior x likelihood for every assignment, by direct enumeration."""
    out = {}
    for levels in model.assignments():
        p = 1.0
        for k, f in enumerate(model.factors):
            p *= f.weights_given(levels[:k])[f.index(levels[k])]
        out[levels] = p * math.exp(model.components[levels].log_marginal(data))
    z = sum(out.values())
    return {k: v / z for k, v in out.items()}


def brute_force_moments(model, data, bindings):
    post = brute_force_posterior(model, data)
    keep = {lv: w for lv, w in post.items() if all(lv[k - 1] == v for k, v in bindings.items())}
    mass = sum(keep.values())
    mean = sum(w * model.components[lv].moments(data).mean for lv, w in keep.items()) / mass
    second = sum(
        w * (model.components[lv].moments(data).variance + model.components[lv].moments(data).mean ** 2)
        for lv, w in keep.items()
    ) / mass
    return mean, second - mean**2


class TestTypes:
    def test_moments_validated(self):
        with pytest.raises(ValueError):
            PredictiveMoments(0.0, -1.0)
        with pytest.raises(ValueError):
            PredictiveMoments(float("nan"), 1.0)

    def test_factor_prior_rows_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sums to"):
            FactorSpec("v", ("a", "b"), {(): (0.5, 0.6)})

    def test_duplicate_levels_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            FactorSpec.uniform("v", ["a", "a"])

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            FactorSpec("v", ("a", "b"), {(): (1.5, -0.5)})

    def test_default_row_used_for_unlisted_parents(self):
        f = FactorSpec("v", ("a", "b"), {(): (0.5, 0.5), ("x",): (1.0, 0.0)})
        assert f.weights_given(("x",)) == (1.0, 0.0)
        assert f.weights_given(("y",)) == (0.5, 0.5)

    def test_assignment_hash_and_scope(self):
        a = FactorAssignment({2: "b", 1: "a"})
        assert a == FactorAssignment({1: "a", 2: "b"})
        assert len({a, FactorAssignment({1: "a", 2: "b"})}) == 1
        assert a.scope == frozenset({1, 2})

    def test_dataset_columns_must_align(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros(3), {"x": np.zeros(2)})
        d = Dataset(np.zeros(3), {"x": np.arange(3.0)})
        assert d.n == 3
        with pytest.raises(KeyError):
            d.column("z")

    def test_model_needs_every_component(self):
        f = FactorSpec.uniform("v", ["a", "b"])
        with pytest.raises(ValueError, match="no backend"):
            HierarchicalModel((f,), {("a",): BernoulliFixedBackend(0.5)})


class TestJointPosterior:
    def test_symmetric_toy_recovers_prior(self, bernoulli_toy):
        model, data = bernoulli_toy
        post = joint_posterior(model, data)
        np.testing.assert_allclose(post.weights, [0.5, 0.5], atol=0)

    def test_prior_times_marginal(self):
        f = FactorSpec("v", ("a", "b"), {(): (0.25, 0.75)})
        comps = {("a",): DiscreteBackend([0.0], [1.0], math.log(3)), ("b",): DiscreteBackend([0.0], [1.0], 0.0)}
        post = joint_posterior(HierarchicalModel((f,), comps), Dataset.empty())
        np.testing.assert_allclose(post.weights, [0.5, 0.5], rtol=1e-14)
        assert post.log_evidence == pytest.approx(math.log(0.25 * 3 + 0.75))

    def test_log_space_survives_huge_likelihood_gaps(self):
        f = FactorSpec.uniform("v", ["a", "b"])
        comps = {("a",): DiscreteBackend([0.0], [1.0], -2000.0), ("b",): DiscreteBackend([0.0], [1.0], -2001.0)}
        post = joint_posterior(HierarchicalModel((f,), comps), Dataset.empty())
        np.testing.assert_allclose(post.weights, [1 / (1 + math.exp(-1)), 1 / (1 + math.e)], rtol=1e-12)

    def test_zero_prior_kept_with_weight_zero(self):
        f = FactorSpec("v", ("a", "b", "c"), {(): (0.5, 0.5, 0.0)})
        model = HierarchicalModel.build([f], lambda lv: BernoulliFixedBackend(0.3))
        post = joint_posterior(model, Dataset.empty())
        assert post.weights.shape == (3,)
        assert post.weights[2] == 0.0

    def test_impossible_data_is_a_backend_error(self):
        f = FactorSpec.uniform("v", ["a", "b"])
        model = HierarchicalModel.build([f], lambda lv: BernoulliFixedBackend(0.0))
        with pytest.raises(BackendError):
            joint_posterior(model, Dataset(np.array([1.0])))

    def test_all_zero_mass_is_degenerate(self, monkeypatch):
        f = FactorSpec.uniform("v", ["a", "b"])
        model = HierarchicalModel.build([f], lambda lv: DiscreteBackend([0.0], [1.0]))
        # unreachable through valid priors; force an all -inf log prior
        monkeypatch.setattr(HierarchicalModel, "log_prior", lambda self: np.full(self.shape, -np.inf))
        with pytest.raises(DegeneratePosteriorError):
            joint_posterior(model, Dataset.empty())

    def test_backend_failure_names_assignment(self):
        class Broken(DiscreteBackend):
            def log_marginal(self, data):
                raise RuntimeError("boom")

        f = FactorSpec.uniform("v", ["a", "b"])
        comps = {("a",): DiscreteBackend([0.0], [1.0]), ("b",): Broken([0.0], [1.0])}
        with pytest.raises(BackendError, match=r"\('b',\)"):
            joint_posterior(HierarchicalModel((f,), comps), Dataset.empty())

    @given(st.integers(0, 10_000), st.lists(st.integers(1, 3), min_size=1, max_size=3))
    def test_normalized_and_matches_brute_force(self, seed, shape):
        model = random_discrete_model(np.random.default_rng(seed), tuple(shape))
        post = joint_posterior(model, Dataset.empty())
        assert abs(post.weights.sum() - 1) <= 1e-10
        oracle = brute_force_posterior(model, Dataset.empty())
        for a, w in post.entries():
            assert w == pytest.approx(oracle[tuple(a.bindings.values())], rel=1e-10, abs=1e-15)

    @given(st.integers(0, 10_000))
    def test_prior_recovery_with_constant_marginal(self, seed):
        rng = np.random.default_rng(seed)
        model = random_discrete_model(rng, (2, 3))
        flat = HierarchicalModel(model.factors, {lv: DiscreteBackend([0.0], [1.0], 1.7) for lv in model.components})
        post = joint_posterior(flat, Dataset.empty())
        np.testing.assert_allclose(post.weights, np.exp(flat.log_prior()), rtol=1e-12, atol=1e-300)


class TestConditionalMoments:
    def test_bernoulli_toy_marginal(self, bernoulli_toy):
        model, data = bernoulli_toy
        post = joint_posterior(model, data)
        m = conditional_moments(model, data, post, FactorAssignment({}))
        assert m.mean == pytest.approx(0.4, abs=1e-15)
        assert m.variance == pytest.approx(0.24, abs=1e-15)

    def test_bernoulli_toy_bound_level_passthrough(self, bernoulli_toy):
        model, data = bernoulli_toy
        post = joint_posterior(model, data)
        m = conditional_moments(model, data, post, FactorAssignment({1: "a"}))
        assert (m.mean, m.variance) == (0.2, pytest.approx(0.16, abs=1e-15))

    def test_two_by_two_matches_enumeration(self):
        f1 = FactorSpec("v1", ("a", "b"), {(): (0.3, 0.7)})
        f2 = FactorSpec("v2", ("x", "y"), {(): (0.5, 0.5), ("a",): (0.9, 0.1)})
        ps = {("a", "x"): 0.1, ("a", "y"): 0.5, ("b", "x"): 0.7, ("b", "y"): 0.35}
        model = HierarchicalModel.build([f1, f2], lambda lv: BernoulliFixedBackend(ps[lv]))
        data = Dataset(np.array([1.0, 0.0, 1.0]))
        post = joint_posterior(model, data)
        for bindings in ({}, {1: "a"}, {1: "b"}, {2: "x"}, {2: "y"}, {1: "b", 2: "y"}):
            got = conditional_moments(model, data, post, FactorAssignment(bindings))
            mean, var = brute_force_moments(model, data, bindings)
            assert got.mean == pytest.approx(mean, rel=1e-12)
            assert got.variance == pytest.approx(var, rel=1e-12)

    def test_null_event(self):
        f = FactorSpec("v", ("a", "b"), {(): (1.0, 0.0)})
        model = HierarchicalModel.build([f], lambda lv: BernoulliFixedBackend(0.5))
        post = joint_posterior(model, Dataset.empty())
        with pytest.raises(NullEventError):
            conditional_moments(model, Dataset.empty(), post, FactorAssignment({1: "b"}))

    def test_unknown_level_rejected(self, bernoulli_toy):
        model, data = bernoulli_toy
        post = joint_posterior(model, data)
        with pytest.raises(KeyError):
            conditional_moments(model, data, post, FactorAssignment({1: "zz"}))

    @given(st.integers(0, 10_000))
    def test_mixture_variance_dominates_mean_within_variance(self, seed):
        rng = np.random.default_rng(seed)
        model = random_discrete_model(rng, (2, 3))
        data = Dataset.empty()
        post = joint_posterior(model, data)
        for level in model.factors[0].levels:
            got = conditional_moments(model, data, post, FactorAssignment({1: level}))
            cond = {lv: w for lv, w in brute_force_posterior(model, data).items() if lv[0] == level}
            z = sum(cond.values())
            within = sum(w * model.components[lv].moments(data).variance for lv, w in cond.items()) / z
            assert got.variance >= within - 1e-12

    @given(st.integers(0, 10_000))
    def test_mixing_is_associative(self, seed):
        rng = np.random.default_rng(seed)
        model = random_discrete_model(rng, (3, 2))
        data = Dataset.empty()
        post = joint_posterior(model, data)
        total = conditional_moments(model, data, post, FactorAssignment({}))
        marg = marginalize(post, [1])
        parts = [
            (marg[(lv,)], conditional_moments(model, data, post, FactorAssignment({1: lv})))
            for lv in model.factors[0].levels
        ]
        mean = sum(w * m.mean for w, m in parts)
        var = sum(w * (m.variance + (m.mean - mean) ** 2) for w, m in parts)
        assert mean == pytest.approx(total.mean, rel=1e-10, abs=1e-12)
        assert var == pytest.approx(total.variance, rel=1e-10, abs=1e-12)


class TestMarginalize:
    def _table(self, weights, shape):
        factors = tuple(FactorSpec.uniform(f"v{k}", [f"l{i}" for i in range(m)]) for k, m in enumerate(shape))
        return PosteriorTable(factors, np.array(weights, dtype=float).reshape(shape), 0.0)

    def test_row_sums(self):
        t = self._table([0.1, 0.2, 0.3, 0.4], (2, 2))
        m = marginalize(t, [1])
        assert m[("l0",)] == pytest.approx(0.3)
        assert m[("l1",)] == pytest.approx(0.7)

    def test_keep_all_is_identity(self):
        t = self._table([0.1, 0.2, 0.3, 0.4], (2, 2))
        m = marginalize(t, [1, 2])
        assert m == {("l0", "l0"): 0.1, ("l0", "l1"): 0.2, ("l1", "l0"): 0.3, ("l1", "l1"): 0.4}

    def test_middle_factor_of_three(self):
        rng = np.random.default_rng(3)
        w = rng.random((2, 3, 2))
        w /= w.sum()
        t = self._table(w.ravel(), (2, 3, 2))
        m = marginalize(t, [2])
        for j in range(3):
            brute = sum(w[i, j, k] for i, k in itertools.product(range(2), range(2)))
            assert m[(f"l{j}",)] == pytest.approx(brute, rel=1e-14)
        assert sum(m.values()) == pytest.approx(1.0, abs=1e-10)

    def test_empty_keep_rejected(self):
        with pytest.raises(ValueError):
            marginalize(self._table([0.5, 0.5], (2,)), [])
