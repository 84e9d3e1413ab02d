import numpy as np
import pytest

from omoe_lab import (diverse_degree, diversity_report, expert_param_variance,
                      load_entropy, model_param_variance, model_similar_fraction,
                      output_variance, similar_fraction)
from omoe_lab.errors import ContractViolation
from omoe_lab.model import RoutingRecord
from tests.test_model import small_model


class TestExpertParamVariance:
    def test_identical_experts_zero(self):
        assert expert_param_variance([np.ones(5), np.ones(5)]) == 0.0

    def test_hand_population_variance(self):
        assert expert_param_variance([np.array([1.0]), np.array([3.0])]) == 1.0

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        experts = [rng.normal(size=6) for _ in range(3)]
        base = expert_param_variance(experts)
        shifted = expert_param_variance([e + 7.5 for e in experts])
        assert shifted == pytest.approx(base, rel=1e-12)

    def test_ordering_invariance(self):
        rng = np.random.default_rng(1)
        experts = [rng.normal(size=4) for _ in range(4)]
        assert expert_param_variance(experts) == pytest.approx(
            expert_param_variance(experts[::-1]), rel=1e-12)

    def test_single_expert_rejected(self):
        with pytest.raises(ContractViolation):
            expert_param_variance([np.ones(3)])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            expert_param_variance([np.ones(3), np.ones(4)])

    def test_model_variant_replicate_zero(self):
        assert model_param_variance(small_model(init="replicate", M=3)) == 0.0


class TestSimilarFraction:
    def test_equal_vectors(self):
        assert similar_fraction(np.ones(4), np.ones(4)) == 1.0

    def test_hand_half(self):
        assert similar_fraction([0.0, 0.0], [5e-4, 5e-3], threshold=1e-3) == 0.5

    def test_huge_threshold(self):
        assert similar_fraction([0.0, 0.0], [100.0, -50.0], threshold=1e9) == 1.0

    def test_bad_threshold(self):
        with pytest.raises(ContractViolation):
            similar_fraction([0.0], [0.0], threshold=0.0)

    def test_model_similar_fraction_replicate(self):
        assert model_similar_fraction(small_model(init="replicate", M=3)) == 1.0


class TestDiverseDegree:
    def test_equal_models_zero(self):
        model = small_model(M=3)
        assert diverse_degree(model, model.clone()) == 0.0

    def test_hand_single_entry(self):
        a = small_model(d_raw=1, d=1, h=1, c=1, M=2, init="replicate")
        b = a.clone()
        for name in ("W1", "b1", "W2", "b2"):
            for model in (a, b):
                model.params[f"expert0.{name}"][:] = 0.0
            a.params[f"expert1.{name}"][:] = 1.0
            b.params[f"expert1.{name}"][:] = 0.5
        assert diverse_degree(a, b) == 1.0

    def test_complementarity_under_swap(self):
        a = small_model(seed=1, M=3)
        b = small_model(seed=2, M=3)
        v = diverse_degree(a, b)
        w = diverse_degree(b, a)
        # v counts strict wins for a, w strict wins for b; ties (here: the
        # zero-initialized biases, equal in both models) make up the rest
        assert 0.0 <= v + w <= 1.0 + 1e-12
        from itertools import combinations

        from omoe_lab.metrics import _expert_vector
        ties = total = 0
        for i, j in combinations(range(3), 2):
            da = np.abs(_expert_vector(a, i) - _expert_vector(a, j))
            db = np.abs(_expert_vector(b, i) - _expert_vector(b, j))
            ties += int(np.sum(da == db))
            total += da.size
        assert v + w + ties / total == pytest.approx(1.0, abs=1e-12)

    def test_architecture_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            diverse_degree(small_model(M=2), small_model(M=3))


class TestOutputVariance:
    def test_replicate_zero(self):
        model = small_model(init="replicate", M=3)
        assert output_variance(model, np.ones(model.dims.d_raw)) == 0.0

    def test_hand_constant_outputs(self):
        model = small_model(d_raw=2, d=2, h=2, c=2, M=2, init="replicate")
        for m, val in ((0, 1.0), (1, 3.0)):
            model.params[f"expert{m}.W1"][:] = 0.0
            model.params[f"expert{m}.W2"][:] = 0.0
            model.params[f"expert{m}.b1"][:] = 0.0
            model.params[f"expert{m}.b2"][:] = val  # expert outputs (val, val)
        assert output_variance(model, np.zeros(2)) == 1.0

    def test_ordering_invariance(self):
        model = small_model(M=3, init="independent")
        swapped = model.clone()
        for name in ("W1", "b1", "W2", "b2"):
            swapped.params[f"expert0.{name}"], swapped.params[f"expert2.{name}"] = \
                swapped.params[f"expert2.{name}"], swapped.params[f"expert0.{name}"]
        x = np.ones(model.dims.d_raw)
        assert output_variance(model, x) == pytest.approx(output_variance(swapped, x),
                                                          rel=1e-12)

    def test_single_expert_rejected(self):
        model = small_model(M=1)
        with pytest.raises(ContractViolation):
            output_variance(model, np.ones(model.dims.d_raw))


class TestLoadEntropy:
    def test_point_mass_zero(self):
        rec = RoutingRecord("top1", np.ones((5, 3)) / 3, np.zeros(5, dtype=int))
        assert load_entropy(rec) == 0.0

    def test_uniform_four_experts(self):
        rec = RoutingRecord("top1", np.ones((8, 4)) / 4, np.array([0, 1, 2, 3] * 2))
        assert load_entropy(rec) == pytest.approx(np.log(4))
        assert load_entropy(rec) == pytest.approx(1.3863, abs=5e-5)

    def test_hand_three_one_split(self):
        rec = RoutingRecord("top1", np.ones((4, 2)) / 2, np.array([0, 0, 0, 1]))
        expected = -(0.75 * np.log(0.75) + 0.25 * np.log(0.25))
        assert load_entropy(rec) == pytest.approx(expected)
        assert load_entropy(rec) == pytest.approx(0.5623, abs=5e-5)

    def test_dense_uses_soft_weights(self):
        w = np.array([[0.75, 0.25], [0.75, 0.25]])
        rec = RoutingRecord("dense", w, None)
        expected = -(0.75 * np.log(0.75) + 0.25 * np.log(0.25))
        assert load_entropy(rec) == pytest.approx(expected)

    def test_list_of_records(self):
        a = RoutingRecord("top1", np.ones((2, 2)) / 2, np.array([0, 0]))
        b = RoutingRecord("top1", np.ones((2, 2)) / 2, np.array([1, 1]))
        assert load_entropy([a, b]) == pytest.approx(np.log(2))

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            load_entropy([])


class TestDiversityReport:
    def test_schema_and_values(self):
        model = small_model(M=3, init="independent")
        rec = RoutingRecord("top1", np.ones((6, 3)) / 3, np.array([0, 1, 2, 0, 1, 2]))
        rep = diversity_report(model, np.ones(model.dims.d_raw), rec)
        d = rep.to_dict()
        assert set(d) == {"param_variance", "similar_fraction",
                          "output_variance", "load_entropy"}
        assert d["param_variance"] == model_param_variance(model)
        assert d["load_entropy"] == pytest.approx(np.log(3))
