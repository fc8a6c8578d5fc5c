"""Client and server parties for one-round delegated evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .crypto import (
    EvaluationHandle,
    HEKeypair,
    KeyCiphertext,
    PadKey,
    classical_otp,
    gen_pad,
    he_decrypt,
    he_encrypt,
    qotp_encrypt,
)
from .engine import (
    EncryptedExpectation,
    EncryptedState,
    ServerCircuit,
    ServerViewLog,
    encrypted_expectation_z,
    homomorphic_apply,
)
from .errors import DomainError, ProtocolError
from .protocol import CLIENT_TO_SERVER, FLOAT_BITS, SERVER_TO_CLIENT, Transcript
from .simulator import StateVector, basis_state

Shift = tuple  # (parameter index or None, offset in radians)
UNSHIFTED: Shift = (None, 0.0)


class Client:
    """Data owner: holds the vault secret and generates a fresh pad per copy."""

    def __init__(self, rng: np.random.Generator, transcript: Optional[Transcript] = None, name: str = "client"):
        self.name = name
        self.rng = rng
        self.keypair = HEKeypair.generate(rng)
        self.transcript = transcript if transcript is not None else Transcript()
        # Client-side memory of issued pads; never leaves the client.
        self.issued_pads: list[PadKey] = []

    @property
    def vault_id(self) -> str:
        return self.keypair.vault_id

    def handle(self, refresh_pad: Optional[PadKey] = None) -> EvaluationHandle:
        return self.keypair.handle(refresh_pad)

    def encrypt_state(self, state: StateVector, session: str = "") -> EncryptedState:
        pad = gen_pad(state.num_qubits, self.rng)
        self.issued_pads.append(pad)
        return EncryptedState(qotp_encrypt(state, pad), he_encrypt(pad, self.keypair), session)

    def encrypt_bits(self, bits: str, pad: Optional[PadKey] = None) -> tuple[str, KeyCiphertext]:
        """Classical one-time pad for computational-basis data."""
        if pad is None:
            pad = gen_pad(len(bits), self.rng)
        self.issued_pads.append(pad)
        return classical_otp(bits, pad), he_encrypt(pad, self.keypair)

    def decode(self, result: EncryptedExpectation) -> float:
        """Undo the sign encryption: (-1)^{b'_k} w."""
        pad = self.open_key(result.key_ct_out)
        return -result.w if pad.b[result.k] else result.w

    def open_key(self, ct: KeyCiphertext) -> PadKey:
        regs = he_decrypt(ct, self.keypair)
        return PadKey.from_bits(regs)


@dataclass
class EvalBundle:
    """What travels client-to-server in one delegated evaluation."""

    session: str
    handle: EvaluationHandle
    shifts: tuple
    states: tuple = ()
    classical: tuple = ()  # (padded bitstring, key ciphertext) per copy
    shots: int = 0

    @property
    def copies(self) -> int:
        return len(self.states) + len(self.classical)

    def num_qubits_sent(self) -> int:
        return sum(es.num_qubits for es in self.states)

    def classical_bits_sent(self) -> int:
        bits = sum(es.key_ct.num_bits for es in self.states)
        bits += sum(len(x) + ct.num_bits for x, ct in self.classical)
        return bits


class Server:
    """Holds the public model and evaluates it on encrypted inputs."""

    def __init__(
        self,
        template: ServerCircuit,
        theta: Sequence[float],
        k: int,
        num_qubits: int,
        rng: Optional[np.random.Generator] = None,
        log: Optional[ServerViewLog] = None,
    ):
        self.template = template
        self.theta = np.array(theta, dtype=float)
        self.k = k
        self.num_qubits = num_qubits
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.log = log if log is not None else ServerViewLog()

    def set_params(self, theta: Sequence[float]) -> None:
        theta = np.array(theta, dtype=float)
        if theta.shape != self.theta.shape or not np.all(np.isfinite(theta)):
            raise DomainError("parameter update has the wrong shape or is not finite")
        self.theta = theta
        self.log.record("params", theta=[float(t) for t in theta])

    def _shifted(self, shift: Shift) -> np.ndarray:
        j, delta = shift
        theta = self.theta.copy()
        if j is not None:
            if not 0 <= j < theta.shape[0]:
                raise DomainError(f"shift index {j} out of range")
            theta[j] += delta
        return theta

    def prepare_classical(self, bits: str, ct: KeyCiphertext, session: str) -> EncryptedState:
        return EncryptedState(basis_state(len(bits), bits), ct, session)

    def evaluate(self, bundle: EvalBundle) -> list[EncryptedExpectation]:
        self.log.record(
            "receive",
            session=bundle.session,
            copies=bundle.copies,
            num_qubits=[es.num_qubits for es in bundle.states],
            ciphertexts=[es.key_ct.hex() for es in bundle.states] + [ct.hex() for _, ct in bundle.classical],
            bits=[x for x, _ in bundle.classical],
            shots=bundle.shots,
        )
        inputs = list(bundle.states) + [self.prepare_classical(x, ct, bundle.session) for x, ct in bundle.classical]
        if len(inputs) != len(bundle.shifts):
            raise ProtocolError("one encrypted copy is required per shift")
        if any(es.num_qubits != self.num_qubits for es in inputs):
            raise DomainError(f"model expects {self.num_qubits}-qubit inputs")
        results = []
        for es, shift in zip(inputs, bundle.shifts):
            circuit = self.template.bind(self._shifted(shift))
            out = homomorphic_apply(es, circuit, bundle.handle, self.log)
            results.append(encrypted_expectation_z(out, self.k, bundle.shots, self.rng, self.log))
        self.log.record("send", session=bundle.session, ciphertexts=[r.key_ct_out.hex() for r in results])
        return results


def response_bits(results: Sequence[EncryptedExpectation]) -> int:
    return sum(FLOAT_BITS + r.key_ct_out.num_bits for r in results)


def run_evaluation(
    client: Client,
    server: Server,
    sample: Union[StateVector, str],
    shifts: Sequence[Shift],
    shots: int = 0,
    round_index: int = 0,
) -> list[float]:
    """One protocol round: encrypt one copy per shift, evaluate, decode."""
    tr = client.transcript
    session = tr.new_session()
    handle = client.handle()
    shifts = tuple(shifts)
    if isinstance(sample, StateVector):
        states = tuple(client.encrypt_state(sample, session) for _ in shifts)
        bundle = EvalBundle(session, handle, shifts, states=states, shots=shots)
    else:
        classical = tuple(client.encrypt_bits(sample) for _ in shifts)
        bundle = EvalBundle(session, handle, shifts, classical=classical, shots=shots)
    tr.send(
        CLIENT_TO_SERVER,
        "EncryptedSample",
        qubits=bundle.num_qubits_sent(),
        classical_bits=bundle.classical_bits_sent(),
        session=session,
        round=round_index,
        vault=client.vault_id,
    )
    results = server.evaluate(bundle)
    for r in results:
        if r.key_ct_out.vault_id != client.vault_id:
            raise ProtocolError("response keyed under a foreign vault")
    tr.send(
        SERVER_TO_CLIENT,
        "EvalResponse",
        classical_bits=response_bits(results),
        session=session,
        round=round_index,
        vault=client.vault_id,
    )
    return [client.decode(r) for r in results]


def upload_params(client: Client, server: Server, theta: Sequence[float], round_index: int = 0) -> None:
    tr = client.transcript
    tr.send(
        CLIENT_TO_SERVER,
        "ParamUpdate",
        classical_bits=FLOAT_BITS * len(theta),
        session=tr.new_session("u"),
        round=round_index,
        vault=client.vault_id,
    )
    server.set_params(theta)
