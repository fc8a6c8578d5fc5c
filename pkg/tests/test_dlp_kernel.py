import itertools

import numpy as np
import pytest

from qhelearn.crypto import PadKey, gen_pad
from qhelearn.dlp_kernel import (
    Concept,
    DlpGroup,
    FeatureConfig,
    check_kernel,
    concept_label,
    cross_kernel,
    delegated_kernel_pipeline,
    dlog_bruteforce,
    feature_state,
    find_generator,
    is_prime,
    kernel_entry,
    kernel_matrix,
    kernel_predict,
    orbit,
    orbit_tables,
    padded_kernel_entry,
    predict_from_kernel,
    sample_points,
    train_kernel_classifier,
    write_kernel_csv,
)
from qhelearn.engine import AuditSecrets, audit_server_view
from qhelearn.errors import DomainError, ProtocolError, SolverError, ValidationError
from qhelearn.protocol import account
from qhelearn.simulator import inner_product, int_to_bits

G7 = DlpGroup(7)
K1 = FeatureConfig(1)
SMALL_PRIMES = [p for p in range(3, 1 << 13) if is_prime(p)]


class TestGroup:
    @pytest.mark.parametrize("p, a", [(7, 3), (5, 2), (11, 2), (23, 5)])
    def test_smallest_generator(self, p, a):
        assert find_generator(p) == a

    def test_generator_powers(self):
        assert [pow(3, j, 7) for j in range(1, 7)] == [3, 2, 6, 4, 5, 1]

    @pytest.mark.parametrize("p", [4, 1, 9, 15])
    def test_composite(self, p):
        with pytest.raises(DomainError):
            find_generator(p)

    def test_non_generator_rejected(self):
        with pytest.raises(DomainError):
            DlpGroup(7, a=2)  # 2 has order 3 mod 7

    @pytest.mark.parametrize("x, j", [(1, 0), (6, 3), (3, 1), (5, 5)])
    def test_dlog(self, x, j):
        assert dlog_bruteforce(G7, x) == j

    @pytest.mark.parametrize("x", [0, 7, -1])
    def test_dlog_domain(self, x):
        with pytest.raises(DomainError):
            dlog_bruteforce(G7, x)

    def test_powers_enumerate_group(self, rng):
        for p in rng.choice(SMALL_PRIMES, size=10):
            g = DlpGroup(int(p))
            assert sorted(g.power(j) for j in range(g.order)) == list(range(1, g.p))


class TestConcept:
    def test_p7_positive_set(self):
        c = Concept(G7, 1)
        assert {x for x in range(1, 7) if concept_label(c, x) == 1} == {3, 2, 6}
        assert concept_label(c, 1) == -1

    def test_balance_small_primes_exhaustive(self):
        for p in [q for q in SMALL_PRIMES if q < 300]:
            g = DlpGroup(p)
            for i in range(1, p):
                assert sum(concept_label(Concept(g, i), x) == 1 for x in range(1, p)) == (p - 1) // 2

    def test_balance_large_primes(self, rng):
        for p in [q for q in SMALL_PRIMES if q > 8000]:
            g = DlpGroup(p)
            for i in rng.integers(1, p, size=3):
                assert sum(concept_label(Concept(g, int(i)), x) == 1 for x in range(1, p)) == (p - 1) // 2

    def test_wraparound(self):
        # i = p - 1 wraps to the interval [p-1, p-1 + 2] = dlogs {0, 1, 2} mod 6.
        c = Concept(G7, 6)
        assert {dlog_bruteforce(G7, x) for x in range(1, 7) if concept_label(c, x) == 1} == {0, 1, 2}

    def test_index_range(self):
        with pytest.raises(DomainError):
            Concept(G7, 0)


class TestFeatures:
    def test_p7_k1(self):
        amps = feature_state(G7, K1, 1).amplitudes
        expected = np.zeros(8)
        expected[[1, 3]] = 2**-0.5
        np.testing.assert_allclose(amps, expected)

    def test_full_orbit_is_constant(self):
        g = DlpGroup(5)  # p - 1 = 4 = 2^2
        states = [feature_state(g, FeatureConfig(2), x).amplitudes for x in range(1, 5)]
        for s in states[1:]:
            np.testing.assert_allclose(s, states[0])

    def test_orbit_labels_distinct(self, rng):
        for _ in range(200):
            g = DlpGroup(int(rng.choice(SMALL_PRIMES)))
            k = int(rng.integers(1, int(np.log2(g.order)) + 1))
            labels = orbit(g, FeatureConfig(k), int(rng.integers(1, g.p)))
            assert len(set(labels.tolist())) == 1 << k

    def test_k_too_large(self):
        with pytest.raises(ValidationError):
            feature_state(G7, FeatureConfig(3), 1)


class TestKernel:
    def test_diagonal(self):
        assert kernel_entry(G7, K1, 4, 4) == 1.0

    def test_p7_pair(self):
        assert kernel_entry(G7, K1, 1, 3) == 0.5

    def test_statevector_agrees_with_set_overlap(self, rng):
        g, cfg = DlpGroup(127), FeatureConfig(5)
        for _ in range(500):
            x1, x2 = (int(v) for v in rng.integers(1, 127, size=2))
            sv = inner_product(feature_state(g, cfg, x1), feature_state(g, cfg, x2)).real
            assert sv == pytest.approx(kernel_entry(g, cfg, x1, x2), abs=1e-12)

    def test_matrix_properties(self, rng):
        g, cfg = DlpGroup(127), FeatureConfig(4)
        K = kernel_matrix(g, cfg, sample_points(g, 40, rng))
        check_kernel(K)
        np.testing.assert_array_equal(np.diag(K), 1.0)

    def test_cross_kernel_matches_entries(self):
        K = cross_kernel(G7, K1, [1, 2], [3, 4, 5])
        assert K[0, 0] == kernel_entry(G7, K1, 1, 3) and K[1, 2] == kernel_entry(G7, K1, 2, 5)


class TestPaddedKernel:
    def test_identity_pad(self):
        assert padded_kernel_entry(G7, K1, 1, 3, PadKey.zeros(3)) == pytest.approx(0.5)

    def test_shared_random_pads(self, rng):
        g, cfg = DlpGroup(31), FeatureConfig(3)
        for _ in range(500):
            x1, x2 = (int(v) for v in rng.integers(1, 31, size=2))
            got = padded_kernel_entry(g, cfg, x1, x2, gen_pad(g.n, rng))
            assert got == pytest.approx(kernel_entry(g, cfg, x1, x2), abs=1e-12)

    def test_mismatched_pads_flagged(self):
        with pytest.raises(ProtocolError):
            padded_kernel_entry(G7, K1, 1, 3, PadKey.zeros(3), PadKey((1, 0, 0), (0, 0, 0)))

    def test_mismatched_pads_counterexample(self):
        found = False
        for x1, x2 in itertools.permutations(range(1, 7), 2):
            for bits in itertools.product((0, 1), repeat=6):
                pad2 = PadKey.from_bits(bits)
                got = padded_kernel_entry(G7, K1, x1, x2, PadKey.zeros(3), pad2, strict=False)
                if abs(got - kernel_entry(G7, K1, x1, x2)) > 0.1:
                    found = True
                    break
            if found:
                break
        assert found


class TestPipeline:
    def test_orbit_tables_are_permutations(self):
        for table in orbit_tables(G7, K1):
            np.testing.assert_array_equal(np.sort(table), np.arange(table.shape[0]))

    def test_single_sample(self):
        np.testing.assert_array_equal(delegated_kernel_pipeline([5], G7, K1).K, [[1.0]])

    def test_p7_pair(self):
        res = delegated_kernel_pipeline(["100", "110"], G7, K1)  # labels 1 and 3
        np.testing.assert_allclose(res.K, [[1.0, 0.5], [0.5, 1.0]], atol=1e-12)
        assert res.rounds == 1

    def test_matches_plaintext_p127(self, rng):
        g, cfg = DlpGroup(127), FeatureConfig(5)
        xs = sample_points(g, 20, rng)
        res = delegated_kernel_pipeline(xs, g, cfg, seed=3)
        np.testing.assert_allclose(res.K, kernel_matrix(g, cfg, xs), atol=1e-10)

    def test_shot_mode_within_tolerance(self, rng):
        g, cfg = DlpGroup(31), FeatureConfig(3)
        xs = sample_points(g, 8, rng)
        shots = 2000
        res = delegated_kernel_pipeline(xs, g, cfg, seed=1, shots=shots)
        assert np.max(np.abs(res.K - kernel_matrix(g, cfg, xs))) <= 5 / np.sqrt(shots)

    def test_shot_mode_charges_resends(self, rng):
        g, cfg = DlpGroup(31), FeatureConfig(3)
        xs = sample_points(g, 5, rng)
        exact = delegated_kernel_pipeline(xs, g, cfg)
        shot = delegated_kernel_pipeline(xs, g, cfg, shots=100)
        assert shot.classical_bits > 100 * exact.classical_bits
        assert exact.bound_bits == pytest.approx(25 * g.n / 0.1**2)

    def test_transcript_is_one_round(self, rng):
        res = delegated_kernel_pipeline(sample_points(G7, 4, rng), G7, K1)
        assert account(res.transcript)["rounds"] == 1
        kinds = [m.kind for m in res.transcript.messages]
        assert kinds == ["KernelRequest", "KernelResponse"]

    def test_server_view_audit(self, rng):
        g, cfg = DlpGroup(127), FeatureConfig(3)
        xs = sample_points(g, 12, rng)
        res = delegated_kernel_pipeline(xs, g, cfg, seed=5)
        pads = [p for pair in res.pads for p in pair]
        secrets = AuditSecrets(pads, [int_to_bits(int(x), g.n) for x in xs], [])
        assert audit_server_view(res.log, secrets).passed

    def test_unpadded_bits_would_be_caught(self, rng):
        g, cfg = DlpGroup(127), FeatureConfig(3)
        xs = sample_points(g, 12, rng)
        res = delegated_kernel_pipeline(xs, g, cfg, seed=5)
        for x in xs:
            res.log.record("debug", bits=int_to_bits(int(x), g.n))
        secrets = AuditSecrets([], [int_to_bits(int(x), g.n) for x in xs], [])
        assert not audit_server_view(res.log, secrets).passed

    def test_rejects_non_units(self):
        with pytest.raises(DomainError):
            delegated_kernel_pipeline([0], G7, K1)


class TestClassifier:
    def test_identity_kernel(self):
        y = np.array([1, -1, 1])
        alpha = train_kernel_classifier(np.eye(3), y, 0.0)
        np.testing.assert_allclose(alpha, y)
        np.testing.assert_array_equal(predict_from_kernel(alpha, np.eye(3)), y)

    def test_duplicates_with_ridge(self):
        g, cfg = DlpGroup(31), FeatureConfig(3)
        xs = [3, 3, 5, 5, 9]
        y = [1, 1, -1, -1, 1]
        alpha = train_kernel_classifier(kernel_matrix(g, cfg, xs), y, 1e-6)
        preds = [kernel_predict(alpha, xs, x, g, cfg) for x in xs]
        assert preds[0] == preds[1] and preds[2] == preds[3]

    def test_singular_without_ridge(self):
        g, cfg = DlpGroup(31), FeatureConfig(3)
        with pytest.raises(SolverError, match="lam > 0"):
            train_kernel_classifier(kernel_matrix(g, cfg, [3, 3]), [1, 1], 0.0)

    def test_tie_is_positive(self):
        assert predict_from_kernel(np.array([1.0, -1.0]), np.array([[0.5, 0.5]]))[0] == 1

    def test_bad_labels(self):
        with pytest.raises(ValidationError):
            train_kernel_classifier(np.eye(2), [1, 0])

    def test_delegated_and_plaintext_predictions_agree(self, rng):
        g, cfg = DlpGroup(127), FeatureConfig(5)
        concept = Concept(g, int(rng.integers(1, 127)))
        xs = sample_points(g, 40, rng)
        y = np.array([concept_label(concept, int(x)) for x in xs])
        K_plain = kernel_matrix(g, cfg, xs)
        K_del = delegated_kernel_pipeline(xs, g, cfg, seed=2).K
        tr, te = slice(0, 28), slice(28, None)
        preds = []
        for K in (K_plain, K_del):
            alpha = train_kernel_classifier(K[tr, tr], y[tr], 1e-3)
            preds.append(predict_from_kernel(alpha, K[te, tr]))
        np.testing.assert_array_equal(preds[0], preds[1])


def test_kernel_csv(tmp_path):
    K = kernel_matrix(G7, K1, [1, 3])
    path = tmp_path / "k.csv"
    write_kernel_csv(K, [1, 3], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x,1,3" and lines[1] == "1,1.0,0.5"
