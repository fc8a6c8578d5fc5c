"""Discrete-logarithm concept class, orbit feature states and kernel learning.

Feature states are uniform superpositions over the orbit
``S_x = {x * a^j mod p : 0 <= j < 2^k}``, so kernel entries are orbit-overlap
fractions. The delegated pipeline lets a purely classical client send
one-time-padded bitstrings; the server builds padded feature states with
sealed permutation gadgets and returns inner products.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .crypto import PadKey, classical_otp, gen_pad, he_encrypt, pad_amplitudes
from .engine import EncryptedState, ServerViewLog, homomorphic_apply, permutation_gadget
from .errors import DomainError, ProtocolError, SolverError, ValidationError
from .protocol import CLIENT_TO_SERVER, FLOAT_BITS, SERVER_TO_CLIENT, Transcript, account
from .session import Client
from .simulator import Gate, StateVector, basis_state, bits_to_int, inner_product, int_to_bits, split_product

MAX_PRIME = 1 << 16


def is_prime(p: int) -> bool:
    if p < 2:
        return False
    if p % 2 == 0:
        return p == 2
    return all(p % d for d in range(3, math.isqrt(p) + 1, 2))


def _order(a: int, p: int) -> int:
    x, r = a % p, 1
    while x != 1:
        x = x * a % p
        r += 1
    return r


@lru_cache(maxsize=None)
def find_generator(p: int) -> int:
    """Smallest generator of Z_p^*, by exhaustive order check."""
    if not is_prime(p):
        raise DomainError(f"{p} is not prime")
    if p > MAX_PRIME:
        raise DomainError(f"p={p} exceeds the desk-scale limit {MAX_PRIME}")
    if p == 2:
        return 1
    for a in range(2, p):
        if _order(a, p) == p - 1:
            return a
    raise DomainError(f"no generator found for {p}")  # unreachable for prime p


@lru_cache(maxsize=None)
def _dlog_table(p: int, a: int) -> np.ndarray:
    table = np.full(p, -1, dtype=np.int64)
    x = 1
    for j in range(p - 1):
        table[x] = j
        x = x * a % p
    return table


@dataclass(frozen=True)
class DlpGroup:
    """Z_p^* with generator ``a``; ``n`` is the bit length of ``p``."""

    p: int
    a: Optional[int] = None

    def __post_init__(self) -> None:
        if not is_prime(self.p) or self.p < 3:
            raise DomainError(f"p={self.p} must be an odd prime")
        if self.p > MAX_PRIME:
            raise DomainError(f"p={self.p} exceeds the desk-scale limit {MAX_PRIME}")
        a = find_generator(self.p) if self.a is None else int(self.a)
        if not 1 <= a < self.p or _order(a, self.p) != self.p - 1:
            raise DomainError(f"{a} does not generate Z_{self.p}^*")
        object.__setattr__(self, "a", a)

    @property
    def n(self) -> int:
        return self.p.bit_length()

    @property
    def order(self) -> int:
        return self.p - 1

    def check_unit(self, x: int) -> int:
        x = int(x)
        if not 1 <= x < self.p:
            raise DomainError(f"{x} is not in Z_{self.p}^*")
        return x

    def power(self, j: int) -> int:
        return pow(self.a, int(j), self.p)


def dlog_bruteforce(group: DlpGroup, x: int) -> int:
    """j in [0, p-2] with a^j = x mod p (table built by walking all powers)."""
    x = group.check_unit(x)
    return int(_dlog_table(group.p, group.a)[x])


@dataclass(frozen=True)
class Concept:
    group: DlpGroup
    i: int

    def __post_init__(self) -> None:
        if not 1 <= self.i <= self.group.p - 1:
            raise DomainError(f"concept index {self.i} outside [1, {self.group.p - 1}]")


def concept_label(concept: Concept, x: int) -> int:
    """+1 iff log_a x lies in [i, i + (p-3)/2], read cyclically modulo p-1."""
    g = concept.group
    offset = (dlog_bruteforce(g, x) - concept.i) % g.order
    return 1 if offset <= (g.p - 3) // 2 else -1


@dataclass(frozen=True)
class FeatureConfig:
    """Orbit size 2^k. ``t`` only documents the asymptotic choice k = n - t log n."""

    k: int
    t: Optional[float] = None

    def check(self, group: DlpGroup) -> None:
        if not 1 <= self.k <= group.n:
            raise ValidationError(f"k={self.k} outside [1, {group.n}]")
        if (1 << self.k) > group.order:
            raise ValidationError(f"2^k = {1 << self.k} exceeds p-1 = {group.order}")


def orbit(group: DlpGroup, cfg: FeatureConfig, x: int) -> np.ndarray:
    """Labels x * a^j mod p for j < 2^k."""
    cfg.check(group)
    x = group.check_unit(x)
    return np.array([x * group.power(j) % group.p for j in range(1 << cfg.k)], dtype=np.int64)


def feature_state(group: DlpGroup, cfg: FeatureConfig, x: int) -> StateVector:
    labels = orbit(group, cfg, x)
    amps = np.zeros(1 << group.n, dtype=complex)
    amps[labels] = 2.0 ** (-cfg.k / 2)
    return StateVector(amps)


def kernel_entry(group: DlpGroup, cfg: FeatureConfig, x1: int, x2: int) -> float:
    """|S_x1 & S_x2| / 2^k."""
    s1 = set(orbit(group, cfg, x1).tolist())
    s2 = set(orbit(group, cfg, x2).tolist())
    return len(s1 & s2) / (1 << cfg.k)


def padded_kernel_entry(
    group: DlpGroup,
    cfg: FeatureConfig,
    x1: int,
    x2: int,
    pad: PadKey,
    pad2: Optional[PadKey] = None,
    strict: bool = True,
) -> float:
    """Overlap of two one-time-padded feature states.

    With one shared pad this equals :func:`kernel_entry`. Passing a different
    ``pad2`` raises unless ``strict`` is off, in which case the (meaningless)
    mismatched overlap is returned for demonstration.
    """
    pad2 = pad if pad2 is None else pad2
    if pad2 != pad and strict:
        raise ProtocolError("kernel entries need one shared pad on both feature states")
    f1 = pad_amplitudes(feature_state(group, cfg, x1).amplitudes, pad)
    f2 = pad_amplitudes(feature_state(group, cfg, x2).amplitudes, pad2)
    return float(np.vdot(f1, f2).real)


def kernel_matrix(group: DlpGroup, cfg: FeatureConfig, samples: Sequence[int]) -> np.ndarray:
    """Plaintext Gram matrix from orbit overlaps."""
    orbits = [set(orbit(group, cfg, x).tolist()) for x in samples]
    size = 1 << cfg.k
    N = len(orbits)
    K = np.eye(N)
    for i in range(N):
        for j in range(i + 1, N):
            K[i, j] = K[j, i] = len(orbits[i] & orbits[j]) / size
    return K


def cross_kernel(group: DlpGroup, cfg: FeatureConfig, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
    ro = [set(orbit(group, cfg, x).tolist()) for x in rows]
    co = [set(orbit(group, cfg, x).tolist()) for x in cols]
    return np.array([[len(r & c) for c in co] for r in ro], dtype=float) / (1 << cfg.k)


# ---------------------------------------------------------------------------
# Delegated pipeline for a classical client
#
# Register layout: feature = qubits [0, n), ancilla = [n, n+k), input x =
# [n+k, 2n+k). The server starts from |0>|0>|x xor b>, applies H to the
# ancillas, then two sealed permutations:
#   pi1: feature ^= x * a^j          (j = ancilla value)
#   pi2: ancilla ^= dlog(feature) - dlog(x) mod (p-1)
# leaving (padded feature state) (x) |0> (x) |x>, a product across the cut.


def _unpack(labels: np.ndarray, n: int, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return labels & ((1 << n) - 1), (labels >> n) & ((1 << k) - 1), labels >> (n + k)


def _pack(f: np.ndarray, j: np.ndarray, x: np.ndarray, n: int, k: int) -> np.ndarray:
    return f | (j << n) | (x << (n + k))


def _valid(v: np.ndarray, p: int) -> np.ndarray:
    return (v >= 1) & (v < p)


def orbit_tables(group: DlpGroup, cfg: FeatureConfig) -> tuple[np.ndarray, np.ndarray]:
    """Permutation tables for pi1 and pi2 over the full 2n+k qubit register.

    Both are involutions on every fixed value of the untouched registers;
    labels outside Z_p^* pass through unchanged.
    """
    cfg.check(group)
    n, k, p = group.n, cfg.k, group.p
    labels = np.arange(1 << (2 * n + k), dtype=np.int64)
    f, j, x = _unpack(labels, n, k)
    powers = np.array([group.power(e) for e in range(1 << k)], dtype=np.int64)
    ok = _valid(x, p)
    shift = np.where(ok, (np.where(ok, x, 1) * powers[j]) % p, 0)
    pi1 = _pack(f ^ shift, j, x, n, k)
    dl = _dlog_table(p, group.a)
    ok2 = _valid(f, p) & ok
    diff = np.where(ok2, (dl[np.where(ok2, f, 1)] - dl[np.where(ok, x, 1)]) % group.order, 0)
    diff = np.where(diff < (1 << k), diff, 0)
    pi2 = _pack(f, j ^ diff, x, n, k)
    return pi1, pi2


@dataclass
class KernelPipelineResult:
    K: np.ndarray
    transcript: Transcript
    log: ServerViewLog
    classical_bits: int
    bound_bits: float
    ratio: float
    shots: int
    eps: float
    pads: list = field(default_factory=list, repr=False)

    @property
    def rounds(self) -> int:
        return account(self.transcript)["rounds"]


def _as_label(sample: Union[int, str], group: DlpGroup) -> int:
    if isinstance(sample, str):
        if len(sample) != group.n:
            raise DomainError(f"bitstring {sample!r} must have {group.n} bits")
        sample = bits_to_int(sample)
    return group.check_unit(sample)


def server_feature_state(
    es: EncryptedState, group: DlpGroup, cfg: FeatureConfig, gates: tuple, handle, log: ServerViewLog
) -> StateVector:
    """Run the preparation circuit on one padded input and cut out the feature register."""
    n, k = group.n, cfg.k
    es = homomorphic_apply(es, [Gate("H", (n + q,)) for q in range(k)], handle, log)
    for g in gates:
        es = permutation_gadget(es, g, handle, log)
    _, feature = split_product(es.padded, n)
    return feature


def _estimate_overlap(f1: StateVector, f2: StateVector, shots: int, rng: np.random.Generator) -> float:
    exact = abs(inner_product(f1, f2))
    if shots == 0:
        return exact
    hits = rng.binomial(shots, min(1.0, exact**2))
    return math.sqrt(hits / shots)


def delegated_kernel_pipeline(
    samples: Sequence[Union[int, str]],
    group: DlpGroup,
    cfg: FeatureConfig,
    seed: int = 0,
    shots: int = 0,
    eps: float = 0.1,
    client: Optional[Client] = None,
    log: Optional[ServerViewLog] = None,
) -> KernelPipelineResult:
    """Kernel matrix for a classical client, computed by the server on padded data.

    The client draws one shared pad for the feature register (so overlaps are
    the true kernel entries) and independent pads for the other registers of
    each sample. Exact mode (``shots == 0``) returns exact overlaps; shot mode
    samples each squared overlap ``shots`` times from fresh copies, and the
    transcript is charged for resending those copies.
    """
    cfg.check(group)
    if shots < 0:
        raise DomainError("shots must be >= 0")
    if not eps > 0:
        raise DomainError("eps must be positive")
    xs = [_as_label(s, group) for s in samples]
    if not xs:
        raise DomainError("no samples")
    n, k = group.n, cfg.k
    width = 2 * n + k
    client_seq, server_seq = np.random.SeedSequence(seed).spawn(2)
    if client is None:
        client = Client(np.random.default_rng(client_seq))
    server_rng = np.random.default_rng(server_seq)
    log = log if log is not None else ServerViewLog()
    tr = client.transcript
    pi1, pi2 = orbit_tables(group, cfg)
    gates = (Gate("PERM", tuple(range(width)), table=pi1), Gate("PERM", tuple(range(width)), table=pi2))

    shared = gen_pad(n, client.rng)
    client.issued_pads.append(shared)
    session = tr.new_session("k")
    features, pads, payload_bits = [], [], 0
    for x in xs:
        x_pad = gen_pad(n, client.rng)
        full = PadKey((0,) * (n + k) + x_pad.a, (0,) * (n + k) + x_pad.b)
        refresh_tail = gen_pad(n + k, client.rng)
        refresh = PadKey(shared.a + refresh_tail.a, shared.b + refresh_tail.b)
        client.issued_pads.extend([full, refresh])
        pads.append((full, refresh))
        bits = classical_otp(int_to_bits(x, n), x_pad)
        ct = he_encrypt(full, client.keypair)
        payload_bits += n + ct.num_bits
        log.record("receive", session=session, bits=bits, ciphertexts=[ct.hex()])
        es = EncryptedState(basis_state(width, "0" * (n + k) + bits), ct, session)
        features.append(server_feature_state(es, group, cfg, gates, client.handle(refresh), log))

    N = len(xs)
    pairs = N * (N - 1) // 2
    copies = N if shots == 0 else N + 2 * pairs * shots
    # Shot mode resends fresh copies of the same encrypted strings.
    per_sample = payload_bits / N
    tr.send(
        CLIENT_TO_SERVER,
        "KernelRequest",
        classical_bits=int(round(per_sample * copies)),
        session=session,
        vault=client.vault_id,
    )
    K = np.eye(N)
    for i in range(N):
        for j in range(i + 1, N):
            K[i, j] = K[j, i] = _estimate_overlap(features[i], features[j], shots, server_rng)
    log.record("send", session=session, count=pairs)
    tr.send(
        SERVER_TO_CLIENT,
        "KernelResponse",
        classical_bits=FLOAT_BITS * pairs,
        session=session,
        vault=client.vault_id,
    )
    total = account(tr)["classical_bits"]
    bound = N * N * n / eps**2
    return KernelPipelineResult(K, tr, log, total, bound, total / bound, shots, eps, pads)


# ---------------------------------------------------------------------------
# Kernel ridge classifier


def check_kernel(K: np.ndarray, tol: float = 1e-8) -> None:
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValidationError("kernel matrix must be square")
    if not np.allclose(K, K.T, atol=1e-12):
        raise ValidationError("kernel matrix is not symmetric")
    if K.shape[0] and np.linalg.eigvalsh(K).min() < -tol:
        raise ValidationError("kernel matrix is not positive semidefinite")


def train_kernel_classifier(K: np.ndarray, labels: Sequence[int], lam: float = 1e-3) -> np.ndarray:
    """Dual coefficients alpha solving (K + lam I) alpha = y."""
    K = np.asarray(K, dtype=float)
    y = np.asarray(labels, dtype=float)
    check_kernel(K)
    if y.shape != (K.shape[0],) or not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValidationError("labels must be +1/-1, one per kernel row")
    if lam < 0:
        raise DomainError("ridge parameter must be nonnegative")
    A = K + lam * np.eye(K.shape[0])
    if np.linalg.matrix_rank(A) < A.shape[0] or np.linalg.cond(A) > 1e12:
        raise SolverError("kernel system is singular or ill-conditioned; use a ridge parameter lam > 0")
    return np.linalg.solve(A, y)


def predict_from_kernel(alpha: np.ndarray, K_cross: np.ndarray) -> np.ndarray:
    """Signs of K_cross @ alpha, ties to +1. Rows are query points."""
    scores = np.asarray(K_cross, dtype=float) @ np.asarray(alpha, dtype=float)
    return np.where(scores >= 0, 1, -1)


def kernel_predict(
    alpha: np.ndarray, train: Sequence[int], x: int, group: DlpGroup, cfg: FeatureConfig
) -> int:
    row = np.array([kernel_entry(group, cfg, xj, x) for xj in train])
    return int(predict_from_kernel(alpha, row[None, :])[0])


def sample_points(group: DlpGroup, count: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct elements of Z_p^* (with replacement once count exceeds p-1)."""
    replace = count > group.order
    return rng.choice(np.arange(1, group.p), size=count, replace=replace)


def write_kernel_csv(K: np.ndarray, samples: Sequence[int], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x"] + [str(s) for s in samples])
        for s, row in zip(samples, np.asarray(K)):
            w.writerow([str(s)] + [repr(float(v)) for v in row])


def write_summary_json(summary: dict, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


__all__ = [
    "is_prime",
    "find_generator",
    "dlog_bruteforce",
    "DlpGroup",
    "Concept",
    "concept_label",
    "FeatureConfig",
    "orbit",
    "feature_state",
    "kernel_entry",
    "padded_kernel_entry",
    "kernel_matrix",
    "cross_kernel",
    "orbit_tables",
    "delegated_kernel_pipeline",
    "KernelPipelineResult",
    "check_kernel",
    "train_kernel_classifier",
    "predict_from_kernel",
    "kernel_predict",
    "sample_points",
    "write_kernel_csv",
    "write_summary_json",
]
