"""Server-side homomorphic evaluation on one-time-padded states.

The server holds the padded statevector and the key ciphertext. Clifford gates
are applied directly and the key is updated through :func:`he_eval`; RZ, T and
permutations go through sealed gadgets that fix the key-dependent residual.
Everything the server code observes is appended to a :class:`ServerViewLog`.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np
from scipy import stats

from . import crypto
from .crypto import EvaluationHandle, KeyCiphertext, PadKey, he_eval, key_update_rule
from .errors import DomainError, ResourceError, UnsupportedGateError, ValidationError, WrongKeyError
from .simulator import Gate, StateVector, apply, expectation, sample_z

ENGINE_KINDS = frozenset({"X", "Z", "H", "S", "T", "RZ", "RY", "CNOT", "PERM"})


@dataclass(frozen=True, eq=False)
class EncryptedState:
    padded: StateVector
    key_ct: KeyCiphertext
    session_id: str = ""

    @property
    def num_qubits(self) -> int:
        return self.padded.num_qubits


@dataclass(frozen=True)
class ServerCircuit:
    """Gate list whose rotations may reference parameter slots."""

    gates: tuple = ()
    num_params: int = 0

    def __post_init__(self) -> None:
        gates = tuple(self.gates)
        for g in gates:
            if g.kind not in ENGINE_KINDS:
                raise UnsupportedGateError(f"engine cannot evaluate {g.kind}")
            if g.slot is not None and g.slot >= self.num_params:
                raise ValidationError(f"{g!r} references slot beyond {self.num_params}")
        object.__setattr__(self, "gates", gates)

    def bind(self, params: Sequence[float]) -> "ServerCircuit":
        if len(params) != self.num_params:
            raise DomainError(f"expected {self.num_params} parameters, got {len(params)}")
        return ServerCircuit(tuple(g.bind(params) for g in self.gates), 0)

    def __len__(self) -> int:
        return len(self.gates)


@dataclass(frozen=True)
class EncryptedExpectation:
    w: float
    key_ct_out: KeyCiphertext
    k: int
    shots: int = 0


class ServerViewLog:
    """Append-only record of what server-side code has observed."""

    def __init__(self) -> None:
        self._records: list[dict] = []

    def record(self, event: str, **payload: Any) -> None:
        self._records.append({"event": event, **payload})

    @property
    def records(self) -> tuple:
        return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self._records)


def _log(log: Optional[ServerViewLog], event: str, **payload: Any) -> None:
    if log is not None:
        log.record(event, **payload)


def compile_gate(gate: Gate) -> list[Gate]:
    """Lower RY to the engine's native set: RY(t) = S H RZ(t) H S^dagger."""
    if gate.kind != "RY":
        return [gate]
    (q,) = gate.qubits
    return [
        Gate("S", (q,)),
        Gate("S", (q,)),
        Gate("S", (q,)),
        Gate("H", (q,)),
        Gate("RZ", (q,), theta=gate.theta),
        Gate("H", (q,)),
        Gate("S", (q,)),
    ]


def _check_handle(es: EncryptedState, handle: EvaluationHandle) -> None:
    if handle.vault_id != es.key_ct.vault_id:
        raise WrongKeyError(f"state keyed under {es.key_ct.vault_id}, handle is {handle.vault_id}")


def _check_qubit(es: EncryptedState, j: int) -> None:
    if not 0 <= j < es.num_qubits:
        raise DomainError(f"qubit {j} out of range for {es.num_qubits} qubits")


def rotation_gadget(
    es: EncryptedState, j: int, theta: float, handle: EvaluationHandle, log: Optional[ServerViewLog] = None
) -> EncryptedState:
    """Plaintext effect RZ_j(theta); the sign flip forced by an X pad is fixed inside the gadget."""
    _check_qubit(es, j)
    _check_handle(es, handle)
    _log(log, "gadget", kind="rotation", qubits=[j], theta=float(theta))
    padded = crypto.sealed_signed_rz(handle, es.padded, es.key_ct, j, float(theta))
    return EncryptedState(padded, es.key_ct, es.session_id)


def t_gadget(
    es: EncryptedState, j: int, handle: EvaluationHandle, log: Optional[ServerViewLog] = None
) -> EncryptedState:
    """Plaintext effect T_j: apply T, cancel the residual S^{b_j}, update a_j ^= b_j."""
    _check_qubit(es, j)
    _check_handle(es, handle)
    _log(log, "gadget", kind="t", qubits=[j])
    gate = Gate("T", (j,))
    padded = apply(es.padded, gate)
    padded = crypto.sealed_conditional_s(handle, padded, es.key_ct, j)
    key_ct = he_eval(es.key_ct, key_update_rule(gate, es.num_qubits), handle)
    return EncryptedState(padded, key_ct, es.session_id)


def permutation_gadget(
    es: EncryptedState, gate: Gate, handle: EvaluationHandle, log: Optional[ServerViewLog] = None
) -> EncryptedState:
    """Plaintext effect of a permutation gate; output carries a fresh pad and ciphertext."""
    if gate.kind != "PERM":
        raise ValidationError("permutation_gadget needs a PERM gate")
    for q in gate.qubits:
        _check_qubit(es, q)
    _check_handle(es, handle)
    digest = hashlib.sha256(gate.table.tobytes()).hexdigest()[:16]
    _log(log, "gadget", kind="permutation", qubits=list(gate.qubits), table_digest=digest)
    padded, key_ct = crypto.sealed_permute(handle, es.padded, es.key_ct, gate)
    _log(log, "key_ct", ciphertext=key_ct.hex())
    return EncryptedState(padded, key_ct, es.session_id)


def homomorphic_apply(
    es: EncryptedState,
    circuit: Union[ServerCircuit, Iterable[Gate]],
    handle: EvaluationHandle,
    log: Optional[ServerViewLog] = None,
) -> EncryptedState:
    """Evaluate ``circuit`` on the padded state, keeping the key ciphertext in step."""
    _check_handle(es, handle)
    gates = circuit.gates if isinstance(circuit, ServerCircuit) else tuple(circuit)
    n = es.num_qubits
    for top in gates:
        if top.kind not in ENGINE_KINDS:
            raise UnsupportedGateError(f"engine cannot evaluate {top.kind}")
        if not top.is_bound:
            raise ValidationError(f"{top!r} is unbound")
        for gate in compile_gate(top):
            if any(q >= n for q in gate.qubits):
                raise DomainError(f"{gate!r} does not fit {n} qubits")
            if gate.kind == "RZ":
                es = rotation_gadget(es, gate.qubits[0], gate.theta, handle, log)
            elif gate.kind == "T":
                es = t_gadget(es, gate.qubits[0], handle, log)
            elif gate.kind == "PERM":
                es = permutation_gadget(es, gate, handle, log)
            else:
                _log(log, "gate", kind=gate.kind, qubits=list(gate.qubits))
                padded = apply(es.padded, gate)
                key_ct = he_eval(es.key_ct, key_update_rule(gate, n), handle)
                es = EncryptedState(padded, key_ct, es.session_id)
    return es


def encrypted_expectation_z(
    es: EncryptedState,
    k: int,
    shots: int = 0,
    rng: Optional[np.random.Generator] = None,
    log: Optional[ServerViewLog] = None,
) -> EncryptedExpectation:
    """Measure Z_k on the padded state. The result carries the sign (-1)^{b'_k}."""
    _check_qubit(es, k)
    if shots < 0:
        raise DomainError("shots must be >= 0")
    if shots == 0:
        w = expectation(es.padded, k)
    else:
        if rng is None:
            raise DomainError("shot mode needs an rng")
        w = sample_z(es.padded, k, shots, rng)
    _log(log, "measure", k=k, shots=shots, w=w)
    return EncryptedExpectation(w, es.key_ct, k, shots)


# ---------------------------------------------------------------------------
# Audits


def _pauli_pad_average(rho: np.ndarray, n: int, use_x: bool, use_z: bool) -> np.ndarray:
    dim = 1 << n
    idx = np.arange(dim)
    x_range = range(dim) if use_x else (0,)
    z_range = range(dim) if use_z else (0,)
    acc = np.zeros_like(rho)
    count = 0
    for bmask in x_range:
        perm = idx ^ bmask
        rx = rho[np.ix_(perm, perm)]
        for amask in z_range:
            signs = crypto._z_signs(dim, amask)
            acc += signs[:, None] * rx * signs[None, :]
            count += 1
    return acc / count


def audit_mixedness(psi: StateVector, use_x: bool = True, use_z: bool = True) -> float:
    """Max entrywise deviation of the pad-averaged density matrix from I/2^n.

    Averages over every pad (4^n of them); ``use_x``/``use_z`` restrict the
    average to one pad type for demonstrations.
    """
    n = psi.num_qubits
    if n > 3:
        raise ResourceError(f"exhaustive pad average limited to n <= 3, got {n}")
    amps = psi.amplitudes
    rho = np.outer(amps, amps.conj())
    avg = _pauli_pad_average(rho, n, use_x, use_z)
    return float(np.max(np.abs(avg - np.eye(1 << n) / (1 << n))))


STRUCTURAL_FIELDS = frozenset(
    {"event", "kind", "qubits", "k", "shots", "theta", "table_digest", "num_qubits", "session", "norm", "w", "count"}
)


@dataclass
class AuditSecrets:
    """Test-only plaintext material the server must never see."""

    keys: list = field(default_factory=list)
    sample_bits: list = field(default_factory=list)
    sample_states: list = field(default_factory=list)

    def bit_patterns(self) -> set:
        pats = set()
        for key in self.keys:
            if isinstance(key, PadKey):
                pats.add("".join(map(str, key.bits)))
                pats.add("".join(map(str, key.a)))
                pats.add("".join(map(str, key.b)))
            else:
                pats.add("".join(str(int(v)) for v in key))
        pats.update(str(s) for s in self.sample_bits)
        return pats


@dataclass
class AuditReport:
    passed: bool
    findings: list
    scanned_values: int

    def __bool__(self) -> bool:
        return self.passed


_HEX = re.compile(r"[0-9a-f]+")
# Secrets shorter than this are not searched for inside opaque payloads: any
# long random byte string contains them by chance.
MIN_EMBEDDED_BITS = 8


class _Blob(str):
    """Bit expansion of an opaque hex payload, searched at every offset."""


def _leaves(value: Any, name: str = ""):
    if name in STRUCTURAL_FIELDS:
        return
    if isinstance(value, dict):
        for k, v in value.items():
            yield from _leaves(v, k)
    elif isinstance(value, (list, tuple)):
        if value and all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) and v in (0, 1) for v in value):
            yield name, "".join(str(int(v)) for v in value)
        elif value and all(isinstance(v, (float, int, complex, np.floating)) for v in value):
            yield name, np.asarray(value, dtype=complex)
        elif value and all(isinstance(v, (list, tuple)) and len(v) == 2 for v in value):
            try:
                arr = np.asarray(value, dtype=float)
                yield name, arr[:, 0] + 1j * arr[:, 1]
            except (TypeError, ValueError):
                for v in value:
                    yield from _leaves(v, name)
        else:
            for v in value:
                yield from _leaves(v, name)
    elif isinstance(value, str) and value and set(value) <= {"0", "1"}:
        yield name, value
    elif isinstance(value, str) and len(value) >= 16 and len(value) % 2 == 0 and _HEX.fullmatch(value):
        raw = bytes.fromhex(value)
        try:
            yield name, KeyCiphertext.from_bytes(raw).payload_bitstring()
        except (ValidationError, ValueError, struct.error):
            yield name, _Blob("".join(f"{byte:08b}" for byte in raw))
    elif isinstance(value, np.ndarray):
        yield from _leaves(value.tolist(), name)


def _count_overlapping(text: str, pat: str) -> int:
    count, start = 0, text.find(pat)
    while start != -1:
        count += 1
        start = text.find(pat, start + 1)
    return count


def audit_server_view(log: ServerViewLog, secrets: AuditSecrets, alpha: float = 1e-6) -> AuditReport:
    """Scan the server's view for plaintext key bits or sample encodings.

    Bitstring hits are judged against chance: a one-time-padded value equals a
    given secret with probability 2^-L, so a field fails only when its number
    of exact matches is implausible under that null (binomial tail below
    ``alpha``, split evenly across fields). Opaque hex payloads are parsed as
    key ciphertexts where possible; otherwise their bits are searched for
    embedded secrets of at least ``MIN_EMBEDDED_BITS`` bits. Any amplitude vector matching a plaintext sample fails
    outright.
    """
    patterns = secrets.bit_patterns()
    by_len: dict[int, set] = {}
    for p in patterns:
        by_len.setdefault(len(p), set()).add(p)
    candidates: dict[int, list] = {}
    vectors = []
    scanned = 0
    blobs = []
    for rec in log.records:
        for name, leaf in _leaves(rec):
            scanned += 1
            if isinstance(leaf, _Blob):
                blobs.append((name, leaf))
            elif isinstance(leaf, str):
                candidates.setdefault(len(leaf), []).append((name, leaf))
            else:
                vectors.append((name, leaf))
    findings = []
    # Each (field, length) pair is its own channel; Bonferroni over channels.
    groups: dict[tuple, list] = {}
    for length, values in candidates.items():
        if length in by_len:
            for name, v in values:
                groups.setdefault((name, length), []).append(v)
    level = alpha / max(1, len(groups))
    for (name, length), values in sorted(groups.items()):
        secret_set = by_len[length]
        hits = sum(v in secret_set for v in values)
        if not hits:
            continue
        q = min(1.0, len(secret_set) / 2.0**length)
        p_value = float(stats.binom.sf(hits - 1, len(values), q))
        if p_value < level:
            findings.append(
                f"{hits}/{len(values)} {length}-bit values in field {name!r} match secrets "
                f"(chance rate {q:.3g}, p={p_value:.2e})"
            )
    for length, secret_set in by_len.items():
        if length < MIN_EMBEDDED_BITS or not blobs:
            continue
        trials = sum(max(0, len(b) - length + 1) for _, b in blobs)
        hits, fields = 0, set()
        for name, blob in blobs:
            for pat in secret_set:
                count = _count_overlapping(blob, pat)
                if count:
                    hits += count
                    fields.add(name)
        if not hits:
            continue
        q = min(1.0, len(secret_set) / 2.0**length)
        p_value = float(stats.binom.sf(hits - 1, trials, q))
        if p_value < alpha:
            findings.append(
                f"{length}-bit secrets embedded {hits} times in opaque payloads "
                f"(chance rate {q:.3g} over {trials} offsets, p={p_value:.2e}) in fields {sorted(fields)}"
            )
    for name, vec in vectors:
        for psi in secrets.sample_states:
            amps = psi.amplitudes if isinstance(psi, StateVector) else np.asarray(psi)
            if vec.shape == amps.shape and (
                np.allclose(vec, amps, atol=1e-9) or np.allclose(np.abs(vec), np.abs(amps), atol=1e-9)
            ):
                findings.append(f"plaintext amplitudes logged in field {name!r}")
    return AuditReport(not findings, findings, scanned)


__all__ = [
    "EncryptedState",
    "ServerCircuit",
    "EncryptedExpectation",
    "ServerViewLog",
    "compile_gate",
    "homomorphic_apply",
    "rotation_gadget",
    "t_gadget",
    "permutation_gadget",
    "encrypted_expectation_z",
    "audit_mixedness",
    "AuditSecrets",
    "AuditReport",
    "audit_server_view",
]
