import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qhelearn.errors import DomainError, ValidationError
from qhelearn.simulator import (
    CNOT,
    RY,
    RZ,
    Gate,
    H,
    Perm,
    S,
    StateVector,
    T,
    apply,
    basis_state,
    bits_to_int,
    expectation,
    fidelity,
    inner_product,
    int_to_bits,
    random_state,
    run,
    sample_z,
    split_product,
    unitary,
)

from conftest import random_circuit

PLUS = StateVector.from_amplitudes([1, 1])
MINUS = StateVector.from_amplitudes([1, -1])


class TestBasisState:
    @pytest.mark.parametrize(
        "n, x, expected",
        [(1, 0, [1, 0]), (2, 3, [0, 0, 0, 1]), (3, 5, np.eye(8)[5])],
    )
    def test_unit_vector(self, n, x, expected):
        np.testing.assert_array_equal(basis_state(n, x).amplitudes, expected)

    def test_bitstring_is_qubit_zero_first(self):
        assert bits_to_int("10") == 1
        assert int_to_bits(1, 2) == "10"
        assert basis_state(2, "01").amplitudes[2] == 1

    @pytest.mark.parametrize("x", [-1, 4, 100])
    def test_out_of_range(self, x):
        with pytest.raises(DomainError):
            basis_state(2, x)

    def test_rejects_unnormalized(self):
        with pytest.raises(DomainError):
            StateVector(np.array([1.0, 1.0]))

    def test_amplitudes_are_read_only(self):
        s = basis_state(1, 0)
        with pytest.raises(ValueError):
            s.amplitudes[0] = 0


class TestApply:
    def test_hadamard_on_zero(self):
        out = apply(basis_state(1, 0), H(0))
        np.testing.assert_allclose(out.amplitudes, [2**-0.5, 2**-0.5], atol=1e-12)

    def test_cnot_truth_table(self):
        # |10>: qubit 0 set (label 1) -> control fires -> label 3.
        out = apply(basis_state(2, "10"), CNOT(0, 1))
        assert abs(out.amplitudes[3]) == pytest.approx(1.0)

    def test_rz_pi_maps_plus_to_minus(self):
        out = apply(PLUS, RZ(0, np.pi))
        assert abs(inner_product(MINUS, out)) == pytest.approx(1.0, abs=1e-10)

    def test_invalid_index(self):
        with pytest.raises(DomainError):
            apply(basis_state(2, 0), H(2))

    def test_cnot_same_wire(self):
        with pytest.raises(DomainError):
            CNOT(1, 1)

    def test_perm_must_be_bijection(self):
        with pytest.raises(ValidationError):
            Perm((0, 1), [0, 0, 1, 2])

    def test_unbound_rotation_rejected(self):
        with pytest.raises(ValidationError):
            apply(basis_state(1, 0), RY(0, slot=0))

    def test_bind_fills_slot(self):
        g = RY(0, slot=1).bind([0.0, 0.4])
        assert g.theta == pytest.approx(0.4) and g.slot is None

    def test_unitarity_random_sequences(self, rng):
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 6))
            state = run(random_state(n, rng), random_circuit(n, int(rng.integers(0, 31)), rng))
            worst = max(worst, abs(np.linalg.norm(state.amplitudes) - 1))
        assert worst < 1e-9


class TestGateAlgebra:
    @pytest.mark.parametrize(
        "lhs, rhs",
        [
            ([H(0), H(0)], []),
            ([S(0), S(0)], [Gate("Z", (0,))]),
            ([T(0), T(0)], [S(0)]),
        ],
    )
    def test_single_qubit_identities(self, lhs, rhs):
        np.testing.assert_allclose(unitary(lhs, 1), unitary(rhs, 1), atol=1e-12)

    def test_cnot_squared(self):
        np.testing.assert_allclose(unitary([CNOT(0, 1), CNOT(0, 1)], 2), np.eye(4), atol=1e-12)

    def test_perm_maps_basis_to_basis(self):
        table = [3, 0, 2, 1]
        for x in range(4):
            out = apply(basis_state(2, x), Perm((0, 1), table))
            assert abs(out.amplitudes[table[x]]) == pytest.approx(1.0)

    def test_perm_on_subset_of_qubits(self):
        # Swap-like table on qubits (2, 0): local label = q2 + 2*q0.
        g = Perm((2, 0), [0, 2, 1, 3])
        out = apply(basis_state(3, "001"), g)
        assert abs(out.amplitudes[bits_to_int("100")]) == pytest.approx(1.0)

    def test_perm_preserves_inner_products(self, rng):
        table = rng.permutation(8)
        a, b = random_state(3, rng), random_state(3, rng)
        g = Perm((0, 1, 2), table)
        assert inner_product(apply(a, g), apply(b, g)) == pytest.approx(inner_product(a, b), abs=1e-12)


class TestExpectation:
    @pytest.mark.parametrize("state, value", [(basis_state(1, 0), 1.0), (PLUS, 0.0), (basis_state(1, 1), -1.0)])
    def test_known_values(self, state, value):
        assert expectation(state, 0) == pytest.approx(value, abs=1e-12)

    @pytest.mark.parametrize("theta", [0.3, 1.2])
    def test_ry_gives_cosine(self, theta):
        assert expectation(apply(basis_state(1, 0), RY(0, theta)), 0) == pytest.approx(np.cos(theta), abs=1e-12)

    def test_index_check(self):
        with pytest.raises(DomainError):
            expectation(basis_state(2, 0), 2)


class TestInnerProduct:
    def test_orthogonal(self):
        assert inner_product(basis_state(1, 0), basis_state(1, 1)) == 0

    def test_set_overlap_example(self):
        s1 = StateVector.from_amplitudes(np.eye(4)[1] + np.eye(4)[3])
        s2 = StateVector.from_amplitudes(np.eye(4)[3] + np.eye(4)[2])
        # Brute-force overlap of label sets {1,3} and {3,2}, each normalized by 2.
        overlap = len({1, 3} & {3, 2}) / 2
        assert inner_product(s1, s2) == pytest.approx(overlap, abs=1e-12)

    def test_conjugate_linear_in_first(self):
        a = StateVector.from_amplitudes([1, 1j])
        b = basis_state(1, 1)
        assert inner_product(a, b) == pytest.approx(-1j / np.sqrt(2))

    def test_mismatch(self):
        with pytest.raises(DomainError):
            inner_product(basis_state(1, 0), basis_state(2, 0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_self_overlap_is_one(self, n, seed):
        psi = random_state(n, np.random.default_rng(seed))
        assert inner_product(psi, psi) == pytest.approx(1.0, abs=1e-12)


class TestSampling:
    @pytest.mark.parametrize("x, value", [(0, 1.0), (1, -1.0)])
    def test_deterministic_outcomes(self, x, value, rng):
        assert sample_z(basis_state(1, x), 0, 17, rng) == value

    def test_plus_state_within_five_sigma(self, rng):
        assert abs(sample_z(PLUS, 0, 10_000, rng)) <= 5 / np.sqrt(10_000)

    def test_converges_to_exact(self):
        psi = random_state(3, np.random.default_rng(7))
        est = sample_z(psi, 1, 10**6, np.random.default_rng(8))
        assert abs(est - expectation(psi, 1)) < 5e-3

    def test_zero_shots(self, rng):
        with pytest.raises(DomainError):
            sample_z(PLUS, 0, 0, rng)


class TestSplitProduct:
    def test_recovers_factors(self, rng):
        lo, hi = random_state(2, rng), random_state(1, rng)
        joint = StateVector(np.kron(hi.amplitudes, lo.amplitudes))
        got_hi, got_lo = split_product(joint, 2)
        assert fidelity(got_lo, lo) == pytest.approx(1.0, abs=1e-12)
        assert fidelity(got_hi, hi) == pytest.approx(1.0, abs=1e-12)

    def test_entangled_rejected(self):
        bell = run(basis_state(2, 0), [H(0), CNOT(0, 1)])
        with pytest.raises(DomainError):
            split_product(bell, 1)
