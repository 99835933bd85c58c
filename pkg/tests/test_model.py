import itertools
import math

import numpy as np
import pytest

from qcrf.crf import (Dataset, FeatureTable, conditional_probability, gradient_naive,
                      log_partition, potential)
from qcrf.instances import REFERENCE_WEIGHTS, reference_instance, random_shape, random_table
from qcrf.model import (CLAMPED, FREE, QcrfInstance, RegisterLayout, build_h, build_lambda_x,
                        build_lambda_xy, clamped_average, dense_z, quantum_gradient_exact,
                        quantum_probability, sigma_sum, sigma_z, trace_lambda_exp)


def kron_h(n, K, w):
    nq = n * K
    return sum(w[k] * dense_z(nq, i * K + k) for i in range(n) for k in range(K))


def random_case(rng, max_dim=2 ** 16):
    n, K, Q = random_shape(rng, max_dim)
    t = random_table(rng, n, K, Q)
    return t, rng.integers(0, Q, size=n), rng.normal(size=K)


class TestLayout:
    def test_dimensions(self):
        lay = RegisterLayout(2, 5, 2, FREE)
        assert lay.dim == 4096
        assert lay.with_mode(CLAMPED).dim == 1024
        assert lay.qubits == 12

    def test_non_power_of_two_alphabet(self):
        lay = RegisterLayout(2, 1, 3, FREE)
        assert lay.label_bits == 2
        assert lay.dim == 9 * 4
        seen = {(tuple(lay.label_digits(b)), int(lay.feature_part(b))) for b in range(lay.dim)}
        assert len(seen) == lay.dim
        assert all(j < 3 for digits, _ in seen for j in digits)

    def test_compose_inverts_decomposition(self):
        lay = RegisterLayout(3, 2, 3, FREE)
        for b in range(lay.dim):
            assert lay.compose(lay.label_digits(b), lay.feature_part(b)) == b


class TestSigmaZ:
    def test_single_qubit(self):
        op = sigma_z(RegisterLayout(1, 1, 2), 0, 0)
        assert op.diagonal().tolist() == [1.0, -1.0]

    def test_involution(self):
        lay = RegisterLayout(3, 4, 2)
        for k, i in itertools.product(range(4), range(3)):
            assert np.all(sigma_z(lay, k, i).diagonal() ** 2 == 1.0)

    def test_free_mode_kronecker(self):
        op = sigma_z(RegisterLayout(1, 1, 2, FREE), 0, 0)
        dense = np.kron(np.eye(2), np.diag([1.0, -1.0]))
        assert op.diagonal().tolist() == np.diag(dense).tolist() == [1, -1, 1, -1]

    @pytest.mark.parametrize("n,K", [(1, 3), (2, 2), (3, 4), (4, 3)])
    def test_matches_dense_oracle(self, n, K):
        lay = RegisterLayout(n, K, 2)
        for i, k in itertools.product(range(n), range(K)):
            np.testing.assert_array_equal(sigma_z(lay, k, i).diagonal(), np.diag(dense_z(n * K, i * K + k)))

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            sigma_z(RegisterLayout(2, 2, 2), 2, 0)


class TestBuildH:
    def test_zero_weights(self):
        assert np.all(build_h(RegisterLayout(2, 3, 2), np.zeros(3)).diagonal() == 0)

    def test_reference_scale(self):
        H = build_h(RegisterLayout(2, 5, 2), REFERENCE_WEIGHTS)
        d = H.diagonal()
        assert d.size == 1024
        assert d.max() == pytest.approx(3.64, abs=1e-12)
        assert d[0] == pytest.approx(3.64, abs=1e-12)
        assert int(np.argmax(d)) == 0

    @pytest.mark.parametrize("n,K", [(1, 2), (2, 3), (3, 4), (2, 6)])
    def test_dense_oracle(self, n, K):
        w = np.random.default_rng(n * 10 + K).normal(size=K)
        np.testing.assert_allclose(build_h(RegisterLayout(n, K, 2), w).diagonal(),
                                   np.diag(kron_h(n, K, w)), atol=1e-13)

    def test_free_mode_is_identity_on_labels(self):
        w = [0.3, -0.7]
        Hn = build_h(RegisterLayout(2, 2, 3, FREE), w).diagonal()
        H0 = build_h(RegisterLayout(2, 2, 3), w).diagonal()
        np.testing.assert_array_equal(Hn, np.tile(H0, 9))

    def test_spectrum_bound(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n, K = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            w = rng.normal(size=K)
            d = build_h(RegisterLayout(n, K, 2), w).diagonal()
            bound = n * np.abs(w).sum()
            assert np.max(np.abs(d)) <= bound + 1e-12
            # the all-|0> state attains the bound when weights are positive
            assert build_h(RegisterLayout(n, K, 2), np.abs(w)).entry(0) == pytest.approx(bound)

    def test_derivative_is_sigma_sum(self):
        lay = RegisterLayout(3, 2, 2)
        w = np.array([0.4, -1.1])
        h = 1e-6
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (build_h(lay, w + e).diagonal() - build_h(lay, w - e).diagonal()) / (2 * h)
            np.testing.assert_allclose(fd, sigma_sum(lay, k).diagonal(), atol=1e-8)

    def test_dump_format(self):
        H = build_h(RegisterLayout(1, 1, 2), [0.1])
        assert H.dump() == "0\t0.10000000000000001\n1\t-0.10000000000000001\n"


class TestProjectors:
    def test_all_plus_selects_zero(self):
        t = FeatureTable(np.ones((2, 2, 2)))
        P = build_lambda_xy(t, [1, 0])
        assert P.support().tolist() == [0]

    def test_lambda_xy_rank_and_product_form(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n, K = int(rng.integers(1, 4)), int(rng.integers(1, 5))
            if n * K > 12:
                continue
            Q = int(rng.integers(2, 4))
            t = random_table(rng, n, K, Q)
            y = rng.integers(0, Q, size=n)
            P = build_lambda_xy(t, y)
            idx = P.layout.all_indices()
            ind = P.indicator(idx)
            assert ind.sum() == 1 == P.rank
            assert np.array_equal(ind * ind, ind)
            prod = np.ones(idx.size)
            for i, k in itertools.product(range(n), range(K)):
                z = sigma_z(P.layout, k, i)(idx)
                prod *= 0.5 * (1 + t.values[k, i, y[i]] * z)
            np.testing.assert_array_equal(ind, prod)

    def test_lambda_x_rank(self):
        rng = np.random.default_rng(2)
        for _ in range(60):
            n, K, Q = random_shape(rng, 2 ** 16)
            t = random_table(rng, n, K, Q)
            P = build_lambda_x(t)
            ind = P.indicator(P.layout.all_indices())
            assert ind.sum() == Q ** n == P.rank
            assert np.array_equal(ind * ind, ind)
            np.testing.assert_array_equal(np.flatnonzero(ind), P.support())

    def test_lambda_x_restriction_matches_lambda_xy(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n, K, Q = random_shape(rng, 2 ** 12)
            t = random_table(rng, n, K, Q)
            y = rng.integers(0, Q, size=n)
            Px, Pxy = build_lambda_x(t), build_lambda_xy(t, y)
            lay = Px.layout
            base = lay.compose(y, 0)
            sliced = Px.indicator(base + np.arange(1 << lay.feature_qubits))
            np.testing.assert_array_equal(sliced, Pxy.indicator(Pxy.layout.all_indices()))

    def test_single_label_alphabet(self):
        t = FeatureTable(np.array([[[1], [-1]], [[-1], [-1]]]))
        Px, Pxy = build_lambda_x(t), build_lambda_xy(t, [0, 0])
        assert Px.layout.dim == Pxy.layout.dim == 16
        np.testing.assert_array_equal(Px.support(), Pxy.support())


class TestTraces:
    def test_zero_weights(self):
        t = random_table(np.random.default_rng(4), 2, 3, 3)
        inst = QcrfInstance(t, [0, 2], np.zeros(3))
        assert trace_lambda_exp(inst.Lxy, inst.H0) == 1.0
        assert trace_lambda_exp(inst.Lx, inst.Hn) == pytest.approx(9.0, abs=1e-12)

    def test_identities_on_random_instances(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            t, y, w = random_case(rng)
            inst = QcrfInstance(t, y, w)
            assert trace_lambda_exp(inst.Lxy, inst.H0) == pytest.approx(math.exp(potential(t, w, y)), rel=1e-12)
            brute = math.fsum(math.exp(potential(t, w, ys)) for ys in itertools.product(range(t.Q), repeat=t.n))
            assert trace_lambda_exp(inst.Lx, inst.Hn) == pytest.approx(brute, rel=1e-10)

    def test_derivative_variant_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        h = 1e-5
        for _ in range(20):
            t, y, w = random_case(rng, 2 ** 12)
            inst = QcrfInstance(t, y, w)
            for k in range(t.K):
                e = np.zeros(t.K)
                e[k] = h
                for proj, mode in ((inst.Lxy, inst.clamped), (inst.Lx, inst.free)):
                    plus = trace_lambda_exp(proj, build_h(mode, w + e))
                    minus = trace_lambda_exp(proj, build_h(mode, w - e))
                    fd = (plus - minus) / (2 * h)
                    exact = trace_lambda_exp(proj, build_h(mode, w), sigma_sum(mode, k))
                    assert abs(exact - fd) <= 1e-6 * max(abs(exact), 1e-3)

    def test_large_weights_stay_finite(self):
        t = random_table(np.random.default_rng(7), 2, 2, 2)
        inst = QcrfInstance(t, [0, 1], [300.0, -250.0])
        assert math.isfinite(quantum_probability(inst))


class TestQuantumModel:
    def test_bridge(self):
        rng = np.random.default_rng(8)
        for _ in range(500):
            t, y, w = random_case(rng)
            inst = QcrfInstance(t, y, w)
            assert abs(quantum_probability(inst) - conditional_probability(t, w, y)) <= 1e-12

    def test_zero_weights_uniform(self):
        t = random_table(np.random.default_rng(9), 3, 2, 2)
        assert quantum_probability(QcrfInstance(t, [0, 1, 1], np.zeros(2))) == pytest.approx(1 / 8)

    def test_reference_scale(self):
        ds, w = reference_instance()
        r = ds.records[0]
        inst = QcrfInstance(r.table, r.labels, w)
        assert inst.H0.diagonal().size == 1024
        assert quantum_probability(inst) == pytest.approx(0.2811500969988476, abs=1e-14)

    def test_other_labeling(self):
        ds, w = reference_instance()
        r = ds.records[0]
        inst = QcrfInstance(r.table, r.labels, w)
        assert quantum_probability(inst, (1, 1)) == pytest.approx(conditional_probability(r.table, w, (1, 1)))

    def test_gradient_matches_naive(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            n, K, Q = random_shape(rng, 2 ** 12)
            pairs = [(random_table(rng, n, K, Q), rng.integers(0, Q, size=n)) for _ in range(2)]
            ds = Dataset.uniform(pairs)
            w = rng.normal(size=K)
            np.testing.assert_allclose(quantum_gradient_exact(ds, w), gradient_naive(ds, w), rtol=0, atol=1e-10)

    def test_clamped_average_collapses(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            t, y, w = random_case(rng, 2 ** 12)
            inst = QcrfInstance(t, y, w)
            for k in range(t.K):
                assert clamped_average(inst, k) == pytest.approx(t.feature_sums(y)[k], abs=1e-12)

    def test_balanced_zero_weights(self):
        half = np.random.default_rng(12).choice([-1, 1], size=(3, 2, 1))
        t = FeatureTable(np.concatenate([half, -half], axis=2))
        ds = Dataset.uniform([(t, [1, 0])])
        np.testing.assert_allclose(quantum_gradient_exact(ds, np.zeros(3)), -t.feature_sums([1, 0]), atol=1e-14)

    def test_log_partition_consistency(self):
        ds, w = reference_instance()
        r = ds.records[0]
        inst = QcrfInstance(r.table, r.labels, w)
        assert math.log(trace_lambda_exp(inst.Lx, inst.Hn)) == pytest.approx(log_partition(r.table, w), abs=1e-13)
