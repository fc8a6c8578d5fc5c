"""Dense statevector simulation for few-qubit circuits.

Bit ordering is little-endian throughout the package: qubit ``i`` is bit ``i``
of the basis-state integer label. Bitstrings given as text list qubit 0
first, so ``"10"`` is the label 1 (qubit 0 set).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import DomainError, ValidationError

MAX_QUBITS = 20
NORM_TOL = 1e-8

SINGLE_QUBIT_KINDS = frozenset({"X", "Z", "H", "S", "T", "RZ", "RY"})
ROTATION_KINDS = frozenset({"RZ", "RY"})
GATE_KINDS = SINGLE_QUBIT_KINDS | {"CNOT", "PERM"}

_SQ2 = 1.0 / np.sqrt(2.0)
_FIXED = {
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
    "H": np.array([[_SQ2, _SQ2], [_SQ2, -_SQ2]], dtype=complex),
    "S": np.array([[1, 0], [0, 1j]], dtype=complex),
    "T": np.array([[1, 0], [0, np.exp(1j * np.pi / 4)]], dtype=complex),
}


def bits_to_int(bits: Union[str, Sequence[int]]) -> int:
    """Convert a qubit-ordered bitstring (qubit 0 first) to its integer label."""
    value = 0
    for i, ch in enumerate(bits):
        bit = int(ch)
        if bit not in (0, 1):
            raise DomainError(f"not a bit: {ch!r}")
        value |= bit << i
    return value


def int_to_bits(value: int, n: int) -> str:
    if not 0 <= value < (1 << n):
        raise DomainError(f"label {value} does not fit in {n} bits")
    return "".join(str((value >> i) & 1) for i in range(n))


@dataclass(frozen=True, eq=False)
class StateVector:
    """Normalized amplitude vector of length ``2**num_qubits``."""

    amplitudes: np.ndarray
    num_qubits: int = field(init=False)

    def __post_init__(self) -> None:
        amps = np.array(self.amplitudes, dtype=complex).reshape(-1)
        dim = amps.shape[0]
        n = dim.bit_length() - 1
        if dim < 2 or (1 << n) != dim:
            raise DomainError(f"amplitude length {dim} is not 2**n with n >= 1")
        if n > MAX_QUBITS:
            raise DomainError(f"{n} qubits exceeds the {MAX_QUBITS}-qubit cap")
        norm = np.vdot(amps, amps).real
        if abs(norm - 1.0) > NORM_TOL:
            raise DomainError(f"state is not normalized (norm^2 = {norm})")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "num_qubits", n)

    @classmethod
    def from_amplitudes(cls, amps: Iterable[complex]) -> "StateVector":
        """Build a state, normalizing the given vector first."""
        vec = np.asarray(list(amps) if not isinstance(amps, np.ndarray) else amps, dtype=complex)
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise DomainError("zero vector cannot be normalized")
        return cls(vec / norm)

    @property
    def dim(self) -> int:
        return self.amplitudes.shape[0]

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def __repr__(self) -> str:
        return f"StateVector(num_qubits={self.num_qubits})"


@dataclass(frozen=True, eq=False)
class Gate:
    """One circuit instruction.

    ``theta`` holds the rotation angle for RZ/RY. A rotation may instead name a
    parameter ``slot`` that is filled in by :meth:`bind`. ``table`` is the
    permutation of local labels for PERM gates acting on ``qubits`` (first
    listed qubit is the least significant local bit).
    """

    kind: str
    qubits: tuple
    theta: float | None = None
    table: np.ndarray | None = None
    slot: int | None = None

    def __post_init__(self) -> None:
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        qubits = tuple(int(q) for q in self.qubits)
        object.__setattr__(self, "qubits", qubits)
        if kind not in GATE_KINDS:
            raise ValidationError(f"unknown gate kind {self.kind!r}")
        if any(q < 0 for q in qubits):
            raise DomainError(f"negative qubit index in {qubits}")
        if kind in SINGLE_QUBIT_KINDS and len(qubits) != 1:
            raise ValidationError(f"{kind} acts on exactly one qubit")
        if kind == "CNOT":
            if len(qubits) != 2:
                raise ValidationError("CNOT needs (control, target)")
            if qubits[0] == qubits[1]:
                raise DomainError("CNOT control equals target")
        if kind in ROTATION_KINDS:
            if self.theta is None and self.slot is None:
                raise ValidationError(f"{kind} needs an angle or a parameter slot")
            if self.theta is not None:
                theta = float(self.theta)
                if not np.isfinite(theta):
                    raise DomainError("rotation angle must be finite")
                object.__setattr__(self, "theta", theta)
        if kind == "PERM":
            if not qubits or len(set(qubits)) != len(qubits):
                raise ValidationError("PERM needs distinct qubits")
            if self.table is None:
                raise ValidationError("PERM needs a table")
            table = np.asarray(self.table, dtype=np.int64).reshape(-1)
            if table.shape[0] != 1 << len(qubits):
                raise ValidationError(
                    f"PERM table has {table.shape[0]} entries, expected {1 << len(qubits)}"
                )
            if not np.array_equal(np.sort(table), np.arange(table.shape[0])):
                raise ValidationError("PERM table is not a bijection")
            table.setflags(write=False)
            object.__setattr__(self, "table", table)

    @property
    def is_bound(self) -> bool:
        return self.kind not in ROTATION_KINDS or self.theta is not None

    def bind(self, params: Sequence[float]) -> "Gate":
        if self.slot is None:
            return self
        if not 0 <= self.slot < len(params):
            raise DomainError(f"parameter slot {self.slot} out of range")
        return replace(self, theta=float(params[self.slot]), slot=None)

    def __repr__(self) -> str:
        extra = ""
        if self.theta is not None:
            extra = f", theta={self.theta:.6g}"
        elif self.slot is not None:
            extra = f", slot={self.slot}"
        return f"Gate({self.kind}, {self.qubits}{extra})"


def X(q: int) -> Gate:
    return Gate("X", (q,))


def Z(q: int) -> Gate:
    return Gate("Z", (q,))


def H(q: int) -> Gate:
    return Gate("H", (q,))


def S(q: int) -> Gate:
    return Gate("S", (q,))


def T(q: int) -> Gate:
    return Gate("T", (q,))


def RZ(q: int, theta: float | None = None, slot: int | None = None) -> Gate:
    return Gate("RZ", (q,), theta=theta, slot=slot)


def RY(q: int, theta: float | None = None, slot: int | None = None) -> Gate:
    return Gate("RY", (q,), theta=theta, slot=slot)


def CNOT(control: int, target: int) -> Gate:
    return Gate("CNOT", (control, target))


def Perm(qubits: Sequence[int], table: Sequence[int]) -> Gate:
    return Gate("PERM", tuple(qubits), table=np.asarray(table))


def single_qubit_matrix(kind: str, theta: float | None = None) -> np.ndarray:
    """2x2 unitary for a single-qubit gate kind.

    RZ(t) = diag(exp(-it/2), exp(it/2)); RY(t) = exp(-i t Y / 2).
    """
    kind = kind.upper()
    if kind in _FIXED:
        return _FIXED[kind]
    if theta is None:
        raise ValidationError(f"{kind} needs an angle")
    if kind == "RZ":
        return np.array([[np.exp(-0.5j * theta), 0], [0, np.exp(0.5j * theta)]], dtype=complex)
    if kind == "RY":
        c, s = np.cos(theta / 2), np.sin(theta / 2)
        return np.array([[c, -s], [s, c]], dtype=complex)
    raise ValidationError(f"{kind} is not a single-qubit gate")


def basis_state(n: int, x: Union[int, str, Sequence[int]]) -> StateVector:
    if not 1 <= n <= MAX_QUBITS:
        raise DomainError(f"qubit count {n} outside [1, {MAX_QUBITS}]")
    if not isinstance(x, (int, np.integer)):
        if len(x) != n:
            raise DomainError(f"bitstring length {len(x)} != {n}")
        x = bits_to_int(x)
    x = int(x)
    if not 0 <= x < (1 << n):
        raise DomainError(f"basis label {x} outside [0, 2**{n})")
    amps = np.zeros(1 << n, dtype=complex)
    amps[x] = 1.0
    return StateVector(amps)


def zero_state(n: int) -> StateVector:
    return basis_state(n, 0)


def random_state(n: int, rng: np.random.Generator) -> StateVector:
    """Haar-random pure state."""
    vec = rng.normal(size=1 << n) + 1j * rng.normal(size=1 << n)
    return StateVector.from_amplitudes(vec)


def _check_qubits(gate: Gate, n: int) -> None:
    for q in gate.qubits:
        if q >= n:
            raise DomainError(f"qubit {q} out of range for {n}-qubit state")


def apply_matrix_1q(amps: np.ndarray, n: int, q: int, mat: np.ndarray) -> np.ndarray:
    psi = amps.reshape(1 << (n - q - 1), 2, 1 << q)
    return np.einsum("ij,ajb->aib", mat, psi).reshape(-1)


def permutation_index_map(n: int, qubits: Sequence[int], table: np.ndarray) -> np.ndarray:
    """Full-register destination index for every source basis label."""
    if tuple(qubits) == tuple(range(n)):
        return np.asarray(table, dtype=np.int64)
    idx = np.arange(1 << n, dtype=np.int64)
    local = np.zeros_like(idx)
    qmask = 0
    for pos, q in enumerate(qubits):
        local |= ((idx >> q) & 1) << pos
        qmask |= 1 << q
    new_local = table[local]
    dest = idx & ~qmask
    for pos, q in enumerate(qubits):
        dest |= ((new_local >> pos) & 1) << q
    return dest


def apply(state: StateVector, gate: Gate) -> StateVector:
    """Return ``gate`` applied to ``state`` as a new state."""
    n = state.num_qubits
    _check_qubits(gate, n)
    if not gate.is_bound:
        raise ValidationError(f"{gate!r} has an unbound parameter slot")
    amps = state.amplitudes
    if gate.kind in SINGLE_QUBIT_KINDS:
        out = apply_matrix_1q(amps, n, gate.qubits[0], single_qubit_matrix(gate.kind, gate.theta))
    elif gate.kind == "CNOT":
        c, t = gate.qubits
        idx = np.arange(1 << n)
        src = np.where((idx >> c) & 1, idx ^ (1 << t), idx)
        out = amps[src]
    else:
        dest = permutation_index_map(n, gate.qubits, gate.table)
        out = np.empty_like(amps)
        out[dest] = amps
    return StateVector(out)


def run(state: StateVector, gates: Iterable[Gate]) -> StateVector:
    for g in gates:
        state = apply(state, g)
    return state


def unitary(gates: Sequence[Gate], n: int) -> np.ndarray:
    """Dense matrix of a gate sequence, built column by column (small n only)."""
    dim = 1 << n
    cols = [run(basis_state(n, j), gates).amplitudes for j in range(dim)]
    return np.stack(cols, axis=1)


def _check_z_index(state: StateVector, k: int) -> None:
    if not 0 <= k < state.num_qubits:
        raise DomainError(f"observable qubit {k} out of range for {state.num_qubits} qubits")


def expectation(state: StateVector, k: int) -> float:
    """Exact <Z_k>."""
    _check_z_index(state, k)
    idx = np.arange(state.dim)
    signs = 1 - 2 * ((idx >> k) & 1)
    return float(np.dot(signs, state.probabilities()))


def inner_product(s1: StateVector, s2: StateVector) -> complex:
    """<s1|s2>, conjugate-linear in the first argument."""
    if s1.num_qubits != s2.num_qubits:
        raise DomainError(f"dimension mismatch: {s1.num_qubits} vs {s2.num_qubits} qubits")
    return complex(np.vdot(s1.amplitudes, s2.amplitudes))


def fidelity(s1: StateVector, s2: StateVector) -> float:
    return abs(inner_product(s1, s2)) ** 2


def sample_z(state: StateVector, k: int, shots: int, rng: np.random.Generator) -> float:
    """Shot estimate of <Z_k> from Born-rule samples."""
    _check_z_index(state, k)
    if shots < 1:
        raise DomainError("shots must be >= 1")
    idx = np.arange(state.dim)
    p0 = float(state.probabilities()[((idx >> k) & 1) == 0].sum())
    zeros = rng.binomial(shots, min(max(p0, 0.0), 1.0))
    return (2 * zeros - shots) / shots


def split_product(state: StateVector, low_qubits: int, tol: float = 1e-9) -> tuple[StateVector, StateVector]:
    """Factor a product state into (high register, low register).

    The low register is qubits ``0..low_qubits-1``. Raises if the state is
    entangled across the cut beyond ``tol``. Each factor carries an arbitrary
    global phase.
    """
    n = state.num_qubits
    if not 1 <= low_qubits < n:
        raise DomainError(f"cannot split {n} qubits at {low_qubits}")
    mat = state.amplitudes.reshape(1 << (n - low_qubits), 1 << low_qubits)
    row = int(np.argmax(np.linalg.norm(mat, axis=1)))
    low = mat[row] / np.linalg.norm(mat[row])
    high = mat @ low.conj()
    if np.max(np.abs(mat - np.outer(high, low))) > tol:
        raise DomainError("state is entangled across the requested cut")
    return StateVector.from_amplitudes(high), StateVector.from_amplitudes(low)
