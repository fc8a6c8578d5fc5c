"""Quantum one-time pad, Pauli key-update algebra, and the sealed key vault.

The pad on ``n`` qubits is a pair of bit vectors ``(a, b)``; encryption applies
``X^b`` to every qubit first and then ``Z^a``. Gate conjugation moves the pad
through a Clifford gate and changes ``(a, b)`` by an XOR-linear map, which is
expressed as a :class:`KeyUpdateCircuit` over ``2n`` key registers laid out as
``a_0..a_{n-1}, b_0..b_{n-1}``.

The classical homomorphic layer is a functional stand-in, not a lattice
scheme. Key bits are masked with a keyed BLAKE2b keystream; the mask's linear
dependence on the keystream is tracked publicly, so swap/xor/not updates are
evaluated without the secret. ``and`` gates are deferred into a public tail
that is replayed at decryption time.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    DomainError,
    SealedAccessError,
    UnsupportedGateError,
    ValidationError,
    WrongKeyError,
)
from .simulator import (
    Gate,
    StateVector,
    apply,
    apply_matrix_1q,
    bits_to_int,
    single_qubit_matrix,
)

# ---------------------------------------------------------------------------
# Pads


@dataclass(frozen=True)
class PadKey:
    """Z-mask bits ``a`` and X-mask bits ``b``, one of each per qubit."""

    a: tuple
    b: tuple

    def __post_init__(self) -> None:
        a = tuple(int(v) for v in self.a)
        b = tuple(int(v) for v in self.b)
        if len(a) != len(b):
            raise DomainError("pad halves differ in length")
        if any(v not in (0, 1) for v in a + b):
            raise DomainError("pad entries must be bits")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def num_qubits(self) -> int:
        return len(self.a)

    @property
    def bits(self) -> tuple:
        """Register layout used by the vault: ``a`` then ``b``."""
        return self.a + self.b

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> "PadKey":
        bits = list(bits)
        if len(bits) % 2:
            raise DomainError("pad register count must be even")
        n = len(bits) // 2
        return cls(tuple(bits[:n]), tuple(bits[n:]))

    @classmethod
    def zeros(cls, n: int) -> "PadKey":
        return cls((0,) * n, (0,) * n)

    def __str__(self) -> str:
        return "a=" + "".join(map(str, self.a)) + " b=" + "".join(map(str, self.b))


def gen_pad(n: int, rng: np.random.Generator) -> PadKey:
    if n < 1:
        raise DomainError("pad needs at least one qubit")
    bits = rng.integers(0, 2, size=2 * n)
    return PadKey(tuple(bits[:n]), tuple(bits[n:]))


def _masks(key: PadKey) -> tuple[int, int]:
    return bits_to_int(key.a), bits_to_int(key.b)


def _check_len(state: StateVector, key: PadKey) -> None:
    if state.num_qubits != key.num_qubits:
        raise DomainError(f"pad covers {key.num_qubits} qubits, state has {state.num_qubits}")


def _z_signs(dim: int, a_mask: int) -> np.ndarray:
    parity = np.bitwise_count(np.arange(dim, dtype=np.int64) & a_mask) & 1
    return 1 - 2 * parity.astype(np.int64)


def pad_amplitudes(amps: np.ndarray, key: PadKey) -> np.ndarray:
    """Z^a X^b applied to a raw amplitude vector."""
    a_mask, b_mask = _masks(key)
    idx = np.arange(amps.shape[0], dtype=np.int64)
    return amps[idx ^ b_mask] * _z_signs(amps.shape[0], a_mask)


def unpad_amplitudes(amps: np.ndarray, key: PadKey) -> np.ndarray:
    """(Z^a X^b)^-1 = X^b Z^a."""
    a_mask, b_mask = _masks(key)
    idx = np.arange(amps.shape[0], dtype=np.int64)
    return (amps * _z_signs(amps.shape[0], a_mask))[idx ^ b_mask]


def qotp_encrypt(state: StateVector, key: PadKey) -> StateVector:
    _check_len(state, key)
    return StateVector(pad_amplitudes(state.amplitudes, key))


def qotp_decrypt(state: StateVector, key: PadKey) -> StateVector:
    _check_len(state, key)
    return StateVector(unpad_amplitudes(state.amplitudes, key))


def classical_otp(x: str, key: PadKey) -> str:
    """XOR a qubit-ordered bitstring with the pad's X bits.

    On a basis state the Z bits only contribute a global phase, so they are
    not applied here.
    """
    if len(x) != key.num_qubits:
        raise DomainError(f"bitstring length {len(x)} != pad length {key.num_qubits}")
    return "".join(str(int(c) ^ bit) for c, bit in zip(x, key.b))


# ---------------------------------------------------------------------------
# Key-update circuits

BOOL_OPS = ("swap", "xor", "not", "and")


@dataclass(frozen=True)
class KeyUpdateCircuit:
    """Boolean program over key registers.

    Ops are tuples: ``("swap", i, j)``, ``("xor", target, source)``,
    ``("not", i)`` and ``("and", i, j)``; the last appends a fresh register
    holding ``r_i & r_j``. ``residual`` flags a key-dependent correction that a
    sealed gadget must perform, e.g. ``("S", j)`` or ``("RZ", j)``.
    """

    ops: tuple = ()
    residual: Optional[tuple] = None

    def __post_init__(self) -> None:
        ops = tuple(tuple(op) for op in self.ops)
        for op in ops:
            arity = {"swap": 3, "xor": 3, "not": 2, "and": 3}.get(op[0])
            if arity is None or len(op) != arity:
                raise ValidationError(f"malformed key-update op {op!r}")
            if any(not isinstance(r, (int, np.integer)) or r < 0 for r in op[1:]):
                raise ValidationError(f"bad register in {op!r}")
            if op[0] == "xor" and op[1] == op[2]:
                raise ValidationError("xor target equals source")
        object.__setattr__(self, "ops", tuple((op[0],) + tuple(int(r) for r in op[1:]) for op in ops))

    def required_registers(self, start: int) -> int:
        """Check register references against ``start`` registers; return the final count."""
        count = start
        for op in self.ops:
            if any(r >= count for r in op[1:]):
                raise ValidationError(f"{op!r} references a register beyond {count}")
            if op[0] == "and":
                count += 1
        return count

    def __add__(self, other: "KeyUpdateCircuit") -> "KeyUpdateCircuit":
        return KeyUpdateCircuit(self.ops + other.ops)

    def __len__(self) -> int:
        return len(self.ops)


def evaluate_plain(circuit: KeyUpdateCircuit, bits: Sequence[int]) -> list[int]:
    """Plaintext semantics of a key-update circuit."""
    regs = [int(b) for b in bits]
    circuit.required_registers(len(regs))
    for op in circuit.ops:
        name = op[0]
        if name == "swap":
            i, j = op[1], op[2]
            regs[i], regs[j] = regs[j], regs[i]
        elif name == "xor":
            regs[op[1]] ^= regs[op[2]]
        elif name == "not":
            regs[op[1]] ^= 1
        else:
            regs.append(regs[op[1]] & regs[op[2]])
    return regs


def key_update_rule(gate: Gate, n: int) -> KeyUpdateCircuit:
    """Pad update for pushing ``gate`` through ``Z^a X^b`` on ``n`` qubits."""
    if any(q >= n for q in gate.qubits):
        raise DomainError(f"{gate!r} does not fit {n} qubits")
    kind = gate.kind
    if kind in ("X", "Z"):
        return KeyUpdateCircuit()
    if kind == "PERM":
        raise UnsupportedGateError("permutations are handled by the engine's permutation gadget")
    if kind == "CNOT":
        c, t = gate.qubits
        return KeyUpdateCircuit((("xor", c, t), ("xor", n + t, n + c)))
    (j,) = gate.qubits
    if kind == "H":
        return KeyUpdateCircuit((("swap", j, n + j),))
    if kind == "S":
        return KeyUpdateCircuit((("xor", j, n + j),))
    if kind == "T":
        return KeyUpdateCircuit((("xor", j, n + j),), residual=("S", j))
    if kind == "RZ":
        return KeyUpdateCircuit((), residual=("RZ", j))
    raise UnsupportedGateError(f"no key-update rule for {kind}")


# ---------------------------------------------------------------------------
# Sealed vault

_MAGIC = b"QHK1"


def _keystream(secret: bytes, nonce: int, nbits: int) -> np.ndarray:
    out = bytearray()
    counter = 0
    while len(out) * 8 < nbits:
        h = hashlib.blake2b(struct.pack(">QQ", nonce, counter), key=secret, digest_size=64)
        out += h.digest()
        counter += 1
    return np.unpackbits(np.frombuffer(bytes(out), dtype=np.uint8))[:nbits].astype(np.uint8)


@dataclass(frozen=True, eq=False)
class KeyCiphertext:
    """Opaque encryption of key registers, bound to one vault.

    Nothing on this object is a plaintext key bit: ``_masked`` is XOR-masked
    with keystream combinations described by the public matrix ``_mask``.
    """

    vault_id: str
    nonce: int
    _masked: np.ndarray = field(repr=False)
    _mask: np.ndarray = field(repr=False)
    _tail: tuple = field(default=(), repr=False)

    def __post_init__(self) -> None:
        for arr in (self._masked, self._mask):
            arr.setflags(write=False)

    @property
    def num_registers(self) -> int:
        regs = self._masked.shape[0]
        for op in self._tail:
            if op[0] == "and":
                regs += 1
        return regs

    def to_bytes(self) -> bytes:
        rows, cols = self._mask.shape
        tail = json.dumps([list(op) for op in self._tail], separators=(",", ":")).encode()
        return b"".join(
            (
                _MAGIC,
                bytes.fromhex(self.vault_id),
                struct.pack(">QHHH", self.nonce, rows, cols, len(tail)),
                np.packbits(self._masked).tobytes(),
                np.packbits(self._mask.reshape(-1)).tobytes(),
                tail,
            )
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeyCiphertext":
        if data[:4] != _MAGIC:
            raise ValidationError("not a key ciphertext")
        vault_id = data[4:12].hex()
        nonce, rows, cols, tail_len = struct.unpack(">QHHH", data[12:26])
        pos = 26
        masked_len = (rows + 7) // 8
        mask_len = (rows * cols + 7) // 8
        masked = np.unpackbits(np.frombuffer(data[pos:pos + masked_len], dtype=np.uint8))[:rows]
        pos += masked_len
        mask = np.unpackbits(np.frombuffer(data[pos:pos + mask_len], dtype=np.uint8))[: rows * cols]
        pos += mask_len
        tail = tuple(
            (op[0],) + tuple(op[1:]) for op in json.loads(data[pos:pos + tail_len].decode() or "[]")
        )
        return cls(vault_id, nonce, masked.astype(np.uint8), mask.reshape(rows, cols).astype(np.uint8), tail)

    @property
    def num_bits(self) -> int:
        """Serialized size in bits, as charged to transcripts."""
        return 8 * len(self.to_bytes())

    def hex(self) -> str:
        return self.to_bytes().hex()

    def payload_bitstring(self) -> str:
        """The masked register bits, i.e. the part of the ciphertext a leak would sit in."""
        return "".join(str(int(v)) for v in self._masked)


def ciphertext_bits(num_registers: int) -> int:
    """Serialized size of a freshly encrypted ciphertext over ``num_registers`` bits."""
    return 8 * (4 + 8 + 14 + (num_registers + 7) // 8 + (num_registers * num_registers + 7) // 8 + 2)


class EvaluationHandle:
    """Public evaluation capability for one vault.

    Enough for :func:`he_eval`. The sealed gadgets additionally reach the vault
    through a private channel that server code never reads; a handle rebuilt
    from bytes has no such channel.
    """

    __slots__ = ("vault_id", "_vault", "_refresh_pad")

    def __init__(self, vault_id: str, vault: Optional["HEKeypair"] = None, refresh_pad: Optional[PadKey] = None):
        self.vault_id = vault_id
        self._vault = vault
        self._refresh_pad = refresh_pad

    def to_bytes(self) -> bytes:
        return bytes.fromhex(self.vault_id)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EvaluationHandle":
        return cls(data.hex())

    def __repr__(self) -> str:
        return f"EvaluationHandle({self.vault_id})"


class HEKeypair:
    """Secret key plus a public evaluation handle."""

    __slots__ = ("vault_id", "_secret", "_nonces", "_gadget_rng")

    def __init__(self, secret: bytes, vault_id: str):
        self.vault_id = vault_id
        self._secret = secret
        self._nonces = itertools.count()
        seed = int.from_bytes(hashlib.blake2b(b"gadget", key=secret, digest_size=8).digest(), "big")
        self._gadget_rng = np.random.default_rng(seed)

    @classmethod
    def generate(cls, rng: np.random.Generator) -> "HEKeypair":
        raw = rng.bytes(40)
        return cls(raw[:32], raw[32:].hex())

    def handle(self, refresh_pad: Optional[PadKey] = None) -> EvaluationHandle:
        """Evaluation handle; ``refresh_pad`` fixes the pad that re-padding gadgets apply."""
        return EvaluationHandle(self.vault_id, self, refresh_pad)

    def __repr__(self) -> str:
        return f"HEKeypair({self.vault_id})"

    def __getstate__(self):
        raise TypeError("HEKeypair is not serializable")


def he_encrypt(bits: Union[Sequence[int], PadKey], keypair: HEKeypair) -> KeyCiphertext:
    if not isinstance(keypair, HEKeypair):
        raise SealedAccessError("encryption needs the vault keypair")
    if isinstance(bits, PadKey):
        bits = bits.bits
    arr = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if np.any(arr > 1):
        raise DomainError("only bits can be encrypted")
    nonce = next(keypair._nonces)
    stream = _keystream(keypair._secret, nonce, arr.shape[0])
    return KeyCiphertext(keypair.vault_id, nonce, arr ^ stream, np.eye(arr.shape[0], dtype=np.uint8))


def _open(ct: KeyCiphertext, keypair: HEKeypair) -> list[int]:
    rows, cols = ct._mask.shape
    stream = _keystream(keypair._secret, ct.nonce, cols)
    regs = (ct._masked ^ (ct._mask.astype(np.int64) @ stream.astype(np.int64) % 2).astype(np.uint8)).tolist()
    if ct._tail:
        regs = evaluate_plain(KeyUpdateCircuit(ct._tail), regs)
    return [int(r) for r in regs]


def he_decrypt(ct: KeyCiphertext, keypair: HEKeypair) -> list[int]:
    if isinstance(keypair, EvaluationHandle):
        raise SealedAccessError("an evaluation handle cannot decrypt")
    if not isinstance(keypair, HEKeypair):
        raise SealedAccessError("decryption needs the vault keypair")
    if ct.vault_id != keypair.vault_id:
        raise WrongKeyError(f"ciphertext from vault {ct.vault_id} opened with {keypair.vault_id}")
    return _open(ct, keypair)


def he_eval(ct: KeyCiphertext, circuit: KeyUpdateCircuit, handle: EvaluationHandle) -> KeyCiphertext:
    """Apply ``circuit`` under encryption. Needs only the public handle."""
    if not isinstance(handle, (EvaluationHandle, HEKeypair)):
        raise ValidationError("he_eval needs an evaluation handle")
    if handle.vault_id != ct.vault_id:
        raise WrongKeyError(f"ciphertext from vault {ct.vault_id} evaluated under {handle.vault_id}")
    circuit.required_registers(ct.num_registers)
    if not circuit.ops:
        return ct
    masked = ct._masked.copy()
    mask = ct._mask.copy()
    tail = list(ct._tail)
    for op in circuit.ops:
        if tail or op[0] == "and":
            tail.append(op)
            continue
        name = op[0]
        if name == "swap":
            i, j = op[1], op[2]
            masked[[i, j]] = masked[[j, i]]
            mask[[i, j]] = mask[[j, i]]
        elif name == "xor":
            masked[op[1]] ^= masked[op[2]]
            mask[op[1]] ^= mask[op[2]]
        else:
            masked[op[1]] ^= 1
    return KeyCiphertext(ct.vault_id, ct.nonce, masked, mask, tuple(tail))


# ---------------------------------------------------------------------------
# Sealed gadget kernels.
#
# These read key bits through the handle's private vault channel and return
# only physical outputs (states and fresh ciphertexts). Server-side code calls
# them as opaque subroutines and never binds a key bit.


def _vault_of(handle: EvaluationHandle) -> HEKeypair:
    vault = handle._vault
    if vault is None:
        raise SealedAccessError("handle has no sealed gadget channel")
    return vault


def _pad_of(handle: EvaluationHandle, ct: KeyCiphertext, n: int) -> PadKey:
    if handle.vault_id != ct.vault_id:
        raise WrongKeyError("gadget invoked with a foreign ciphertext")
    regs = _open(ct, _vault_of(handle))
    return PadKey.from_bits(regs[: 2 * n])


def sealed_conditional_s(handle: EvaluationHandle, state: StateVector, ct: KeyCiphertext, j: int) -> StateVector:
    """Apply S_j iff the pad's X bit on qubit j is set."""
    pad = _pad_of(handle, ct, state.num_qubits)
    if not pad.b[j]:
        return state
    n = state.num_qubits
    return StateVector(apply_matrix_1q(state.amplitudes, n, j, single_qubit_matrix("S")))


def sealed_signed_rz(
    handle: EvaluationHandle, state: StateVector, ct: KeyCiphertext, j: int, theta: float
) -> StateVector:
    """Apply Rz((-1)^{b_j} theta) so the plaintext sees Rz(theta)."""
    pad = _pad_of(handle, ct, state.num_qubits)
    angle = -theta if pad.b[j] else theta
    n = state.num_qubits
    return StateVector(apply_matrix_1q(state.amplitudes, n, j, single_qubit_matrix("RZ", angle)))


def sealed_permute(
    handle: EvaluationHandle, state: StateVector, ct: KeyCiphertext, gate: Gate
) -> tuple[StateVector, KeyCiphertext]:
    """Apply a permutation to the plaintext and re-pad with a fresh key."""
    n = state.num_qubits
    vault = _vault_of(handle)
    pad = _pad_of(handle, ct, n)
    plain = StateVector(unpad_amplitudes(state.amplitudes, pad))
    plain = apply(plain, gate)
    fresh = handle._refresh_pad
    if fresh is None:
        fresh = gen_pad(n, vault._gadget_rng)
    elif fresh.num_qubits != n:
        raise DomainError("refresh pad does not match the register")
    return StateVector(pad_amplitudes(plain.amplitudes, fresh)), he_encrypt(fresh, vault)


__all__ = [
    "PadKey",
    "gen_pad",
    "qotp_encrypt",
    "qotp_decrypt",
    "classical_otp",
    "pad_amplitudes",
    "unpad_amplitudes",
    "KeyUpdateCircuit",
    "evaluate_plain",
    "key_update_rule",
    "KeyCiphertext",
    "ciphertext_bits",
    "EvaluationHandle",
    "HEKeypair",
    "he_encrypt",
    "he_decrypt",
    "he_eval",
    "sealed_conditional_s",
    "sealed_signed_rz",
    "sealed_permute",
]
