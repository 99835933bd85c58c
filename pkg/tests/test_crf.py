import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qcrf.crf import (Dataset, DimensionError, DivergenceError, DomainError,
                      EnumerationTooLarge, FeatureTable, FeatureTemplate, LabelAlphabet,
                      Sequence, build_feature_table, conditional_probability,
                      gibbs_estimate, gradient_factorized, gradient_gibbs, gradient_naive,
                      nll, potential, train)
from qcrf.instances import aligned_instance, reference_instance, random_instance, random_table

# brute force over every labeling with math.exp; kept apart from the package code
REFERENCE_NLL = 1.2688665992365251
REFERENCE_GRAD = [-1.0897577847471602, -0.7645042504615023, 0.3252535342856579,
              -0.3252535342856579, 1.08975778474716]
REFERENCE_PROB = 0.2811500969988476


def brute_probability(values, w, y):
    K, n, Q = values.shape
    E = lambda lab: sum(w[k] * values[k, i, lab[i]] for i in range(n) for k in range(K))
    Z = sum(math.exp(E(lab)) for lab in itertools.product(range(Q), repeat=n))
    return math.exp(E(y)) / Z


def fd_gradient(ds, w, h=1e-5):
    g = np.zeros(len(w))
    for k in range(len(w)):
        e = np.zeros(len(w))
        e[k] = h
        g[k] = (nll(ds, w + e) - nll(ds, w - e)) / (2 * h)
    return g


def balanced_table(rng, n, K, Q=2):
    # sum over labels of f_k(x_i, y) is 0 at every (k, i)
    half = rng.choice([-1, 1], size=(K, n, 1))
    return FeatureTable(np.concatenate([half, -half], axis=2))


class TestTypes:
    def test_alphabet_rejects_duplicates(self):
        with pytest.raises(DomainError):
            LabelAlphabet(("A", "B", "A"))

    def test_alphabet_roundtrip(self):
        a = LabelAlphabet(("O", "PER", "LOC"))
        assert [a.index(a.token(j)) for j in range(a.size)] == [0, 1, 2]
        with pytest.raises(DomainError):
            a.index("ORG")

    def test_sequence_length_mismatch(self):
        with pytest.raises(DimensionError):
            Sequence(("a", "b"), ("X",))
        with pytest.raises(DimensionError):
            Sequence(())

    def test_feature_table_signs_only(self):
        with pytest.raises(DomainError):
            FeatureTable(np.zeros((1, 1, 2)))

    def test_dataset_weights_must_sum_to_one(self):
        t = FeatureTable(np.ones((1, 1, 2)))
        from qcrf.crf import Record
        with pytest.raises(DomainError):
            Dataset((Record(t, [0], 0.5),))

    def test_template_table(self):
        a = LabelAlphabet(("DET", "NOUN"))
        t = build_feature_table(("the", "dog"), a, [FeatureTemplate("DET", "the"), FeatureTemplate("NOUN")])
        assert t.values[0].tolist() == [[1, -1], [-1, -1]]
        assert t.values[1].tolist() == [[-1, 1], [-1, 1]]


class TestPotential:
    def test_single_term(self):
        assert potential(FeatureTable(np.ones((1, 1, 2))), [1.0], [0]) == 1.0

    def test_zero_weights(self):
        t = random_table(np.random.default_rng(0), 3, 4, 3)
        assert potential(t, np.zeros(4), [0, 1, 2]) == 0.0

    def test_hand_sum(self):
        t = FeatureTable(np.ones((2, 2, 2)))
        w = [0.3, -0.5]
        loop = sum(w[k] * t.values[k, i, 0] for i in range(2) for k in range(2))
        assert potential(t, w, [0, 0]) == pytest.approx(-0.4, abs=1e-15)
        assert loop == pytest.approx(-0.4, abs=1e-15)

    def test_length_mismatch(self):
        t = FeatureTable(np.ones((2, 2, 2)))
        with pytest.raises(DimensionError):
            potential(t, [1.0, 2.0], [0])
        with pytest.raises(DimensionError):
            potential(t, [1.0], [0, 0])


class TestConditionalProbability:
    def test_uniform_at_zero(self):
        t = random_table(np.random.default_rng(1), 3, 2, 3)
        assert conditional_probability(t, np.zeros(2), [2, 0, 1]) == pytest.approx(1 / 27, abs=1e-15)

    def test_two_label_closed_form(self):
        t = FeatureTable(np.array([[[1, -1]]]))
        expected = math.exp(0.5) / (math.exp(0.5) + math.exp(-0.5))
        assert conditional_probability(t, [0.5], [0]) == pytest.approx(expected, abs=1e-15)

    def test_out_of_alphabet(self):
        t = FeatureTable(np.ones((1, 2, 2)))
        with pytest.raises(DomainError):
            conditional_probability(t, [1.0], [0, 2])

    def test_large_weights_do_not_overflow(self):
        t = FeatureTable(np.array([[[1, -1], [1, -1]]]))
        p = conditional_probability(t, [800.0], [0, 0])
        assert p == pytest.approx(1.0)
        assert conditional_probability(t, [800.0], [1, 0]) == 0.0

    def test_reference_instance(self):
        ds, w = reference_instance()
        r = ds.records[0]
        assert conditional_probability(r.table, w, r.labels) == pytest.approx(REFERENCE_PROB, abs=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 4), st.integers(2, 3), st.integers(0, 2 ** 32 - 1))
    def test_normalization(self, n, K, Q, seed):
        if Q ** n > 243:
            return
        rng = np.random.default_rng(seed)
        t = random_table(rng, n, K, Q)
        w = rng.normal(scale=2.0, size=K)
        total = math.fsum(conditional_probability(t, w, y)
                          for y in itertools.product(range(Q), repeat=n))
        assert abs(total - 1.0) <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        t = random_table(rng, 3, 3, 3)
        w = rng.normal(size=3)
        y = rng.integers(0, 3, size=3)
        assert conditional_probability(t, w, y) == pytest.approx(brute_probability(t.values, w, y), rel=1e-12)

    def test_shift_invariance(self):
        # an always-+1 feature adds the same constant to every E(x, y)
        rng = np.random.default_rng(7)
        for _ in range(50):
            t = random_table(rng, 3, 2, 3)
            w = rng.normal(size=2)
            t2 = FeatureTable(np.concatenate([t.values, np.ones((1, 3, 3), dtype=np.int8)]))
            w2 = np.append(w, rng.normal(scale=3.0))
            for y in itertools.product(range(3), repeat=3):
                assert abs(conditional_probability(t, w, y) - conditional_probability(t2, w2, y)) <= 1e-12


class TestNll:
    def test_uniform_model(self):
        t = random_table(np.random.default_rng(2), 4, 3, 3)
        ds = Dataset.uniform([(t, [0, 1, 2, 0])])
        assert nll(ds, np.zeros(3)) == pytest.approx(4 * math.log(3), abs=1e-12)

    def test_monotone_in_scale_on_aligned_instance(self):
        ds, _ = aligned_instance()
        w = np.array([0.4, 0.3])
        vals = [nll(ds, w * c) for c in (1, 2, 4, 8)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-3

    def test_reference_scale_value(self):
        ds, w = reference_instance()
        assert nll(ds, w) == pytest.approx(REFERENCE_NLL, abs=1e-13)


class TestGradients:
    def test_balanced_zero_weights(self):
        rng = np.random.default_rng(3)
        t = balanced_table(rng, 3, 4)
        y = [0, 1, 1]
        ds = Dataset.uniform([(t, y)])
        expected = -t.feature_sums(y)
        for fn in (gradient_naive, gradient_factorized):
            np.testing.assert_allclose(fn(ds, np.zeros(4)), expected, atol=1e-14)

    def test_reference_scale_values(self):
        ds, w = reference_instance()
        np.testing.assert_allclose(gradient_naive(ds, w), REFERENCE_GRAD, atol=1e-12)
        np.testing.assert_allclose(gradient_factorized(ds, w), REFERENCE_GRAD, atol=1e-12)

    def test_naive_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            ds, w = random_instance(rng, 3, 3, 2, records=2)
            g = gradient_naive(ds, w.w)
            fd = fd_gradient(ds, w.w)
            assert np.all(np.abs(g - fd) <= 1e-6 * np.maximum(np.abs(g), 1e-3))

    def test_saturated_model_has_vanishing_gradient(self):
        ds, _ = aligned_instance()
        g = gradient_naive(ds, np.array([0.4, 0.3]) * 64)
        assert np.max(np.abs(g)) < 1e-12

    def test_factorized_equals_naive(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n, K, Q = int(rng.integers(1, 6)), int(rng.integers(1, 5)), int(rng.integers(2, 4))
            ds, w = random_instance(rng, n, K, Q, records=int(rng.integers(1, 4)))
            np.testing.assert_allclose(gradient_factorized(ds, w), gradient_naive(ds, w), rtol=0, atol=1e-10)

    def test_enumeration_cap(self):
        t = FeatureTable(np.ones((1, 21, 2)))
        ds = Dataset.uniform([(t, [0] * 21)])
        with pytest.raises(EnumerationTooLarge, match="2\\^21"):
            gradient_naive(ds, [0.1])
        assert gradient_factorized(ds, [0.1]).shape == (1,)


class TestGibbs:
    def test_matches_naive_within_three_se(self):
        rng = np.random.default_rng(6)
        for seed in range(5):
            ds, w = random_instance(rng, 2, 3, 2)
            est = gibbs_estimate(ds, w, sweeps=100_000, burn_in=100, seed=seed)
            exact = gradient_naive(ds, w)
            assert np.all(np.abs(est.gradient - exact) <= 3 * est.stderr + 1e-12)

    def test_symmetric_case(self):
        rng = np.random.default_rng(8)
        t = balanced_table(rng, 2, 3)
        ds = Dataset.uniform([(t, [1, 0])])
        est = gibbs_estimate(ds, np.zeros(3), sweeps=50_000, seed=1)
        assert np.all(np.abs(est.gradient + t.feature_sums([1, 0])) <= 4 * est.stderr)

    def test_deterministic(self):
        ds, w = random_instance(np.random.default_rng(9), 4, 3, 3)
        a = gradient_gibbs(ds, w, sweeps=500, burn_in=10, seed=42)
        b = gradient_gibbs(ds, w, sweeps=500, burn_in=10, seed=42)
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, gradient_gibbs(ds, w, sweeps=500, burn_in=10, seed=43))

    def test_needs_a_sweep(self):
        ds, w = random_instance(np.random.default_rng(9), 2, 2, 2)
        with pytest.raises(DomainError):
            gradient_gibbs(ds, w, sweeps=0)


class TestTrain:
    def test_zero_step_is_flat(self):
        ds, w = random_instance(np.random.default_rng(10), 3, 2, 2, eta=0.0)
        traj = train(ds, w, "factorized", iters=1)
        assert len(traj) == 1
        np.testing.assert_array_equal(traj[0].w, w.w)
        assert traj[0].nll == nll(ds, w)

    def test_aligned_instance_decreases(self):
        ds, w0 = aligned_instance(eta=0.1)
        traj = train(ds, w0, "factorized", iters=200)
        losses = [s.nll for s in traj]
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 0.1 * losses[0]

    def test_reference_scale_epochs(self):
        ds, w0 = reference_instance(eta=0.05)
        traj = train(ds, w0, "factorized", iters=340)
        assert len(traj) == 340
        losses = [s.nll for s in traj]
        assert all(a >= b for a, b in zip(losses, losses[1:]))

    def test_backends_agree(self):
        ds, w0 = random_instance(np.random.default_rng(11), 3, 2, 2, eta=0.1)
        a = train(ds, w0, "naive", iters=20)
        b = train(ds, w0, "factorized", iters=20)
        np.testing.assert_allclose(a[-1].w, b[-1].w, atol=1e-10)

    def test_gibbs_backend_runs(self):
        ds, w0 = aligned_instance(eta=0.1)
        traj = train(ds, w0, "gibbs", iters=30, sweeps=2000, seed=3)
        assert traj[-1].nll < traj[0].nll

    def test_divergence_detector(self):
        ds, w0 = aligned_instance(eta=0.1)
        ascent = lambda ds, w: -gradient_factorized(ds, w)
        with pytest.raises(DivergenceError) as err:
            train(ds, w0, ascent, iters=50)
        assert len(err.value.trajectory) == 11

    def test_unknown_backend(self):
        ds, w0 = aligned_instance()
        with pytest.raises(DomainError):
            train(ds, w0, "lbfgs", iters=1)
