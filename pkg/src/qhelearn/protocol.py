"""Message schema, transcripts and communication accounting.

A *round* is one client-to-server transmission answered by the server. The
blind-computing baseline is an analytical cost model with declared constants;
nothing here simulates a blind protocol.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

from .errors import TranscriptError, ValidationError
from .simulator import Gate

CLIENT_TO_SERVER = "c2s"
SERVER_TO_CLIENT = "s2c"

REQUEST_KINDS = {"EncryptedSample": "eval", "EvalRequest": "eval", "KernelRequest": "kernel"}
RESPONSE_KINDS = {"EvalResponse": "eval", "KernelResponse": "kernel"}
MESSAGE_KINDS = frozenset(REQUEST_KINDS) | frozenset(RESPONSE_KINDS) | {"ParamUpdate"}

# Fixed-width encodings used when sizing classical payloads.
FLOAT_BITS = 64


@dataclass(frozen=True)
class Message:
    direction: str
    kind: str
    qubits: int = 0
    classical_bits: int = 0
    session: str = ""
    round: int = 0
    vault: str = ""

    def __post_init__(self) -> None:
        if self.direction not in (CLIENT_TO_SERVER, SERVER_TO_CLIENT):
            raise ValidationError(f"bad direction {self.direction!r}")
        if self.kind not in MESSAGE_KINDS:
            raise ValidationError(f"unknown message kind {self.kind!r}")
        if self.qubits < 0 or self.classical_bits < 0:
            raise ValidationError("payload counts must be nonnegative")
        expected = SERVER_TO_CLIENT if self.kind in RESPONSE_KINDS else CLIENT_TO_SERVER
        if self.direction != expected:
            raise ValidationError(f"{self.kind} must travel {expected}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class CommTotals:
    qubits_sent: int = 0
    classical_bits: int = 0
    rounds: int = 0
    messages: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _rounds(messages: Sequence[Message]) -> int:
    count = 0
    prev = None
    for m in messages:
        if m.direction == SERVER_TO_CLIENT and prev == CLIENT_TO_SERVER:
            count += 1
        prev = m.direction
    return count


class Transcript:
    """Append-only message list with a grammar check and cached totals."""

    def __init__(self) -> None:
        self._messages: list[Message] = []
        self._open: dict[str, str] = {}
        self._totals = CommTotals()
        self._last_direction: Optional[str] = None
        self._session_ids = itertools.count()

    def new_session(self, prefix: str = "s") -> str:
        return f"{prefix}{next(self._session_ids):06d}"

    def append(self, msg: Message) -> Message:
        if msg.kind in REQUEST_KINDS:
            if msg.session in self._open:
                raise TranscriptError(f"session {msg.session} already has an unanswered request")
            self._open[msg.session] = REQUEST_KINDS[msg.kind]
        elif msg.kind in RESPONSE_KINDS:
            pending = self._open.pop(msg.session, None)
            if pending != RESPONSE_KINDS[msg.kind]:
                raise TranscriptError(f"{msg.kind} in session {msg.session!r} without a matching request")
        self._messages.append(msg)
        t = self._totals
        t.qubits_sent += msg.qubits
        t.classical_bits += msg.classical_bits
        t.messages += 1
        if msg.direction == SERVER_TO_CLIENT and self._last_direction == CLIENT_TO_SERVER:
            t.rounds += 1
        self._last_direction = msg.direction
        return msg

    def send(self, direction: str, kind: str, **fields) -> Message:
        return self.append(Message(direction, kind, **fields))

    @property
    def messages(self) -> tuple:
        return tuple(self._messages)

    @property
    def totals(self) -> CommTotals:
        return CommTotals(**self._totals.as_dict())

    def __len__(self) -> int:
        return len(self._messages)

    def session(self, session_id: str) -> list[Message]:
        return [m for m in self._messages if m.session == session_id]

    def sessions(self) -> list[str]:
        seen: dict[str, None] = {}
        for m in self._messages:
            seen.setdefault(m.session, None)
        return list(seen)

    def to_jsonl(self) -> str:
        return "".join(m.to_json() + "\n" for m in self._messages)

    @classmethod
    def from_jsonl(cls, text: str) -> "Transcript":
        tr = cls()
        for line in text.splitlines():
            if line.strip():
                tr.append(Message(**json.loads(line)))
        return tr


def account(transcript: Transcript | Iterable[Message]) -> dict:
    """Recompute totals from raw messages and check them against the cache."""
    messages = transcript.messages if isinstance(transcript, Transcript) else tuple(transcript)
    if not isinstance(transcript, Transcript):
        replay = Transcript()
        for m in messages:
            replay.append(m)
    result = {
        "qubits_sent": sum(m.qubits for m in messages),
        "classical_bits": sum(m.classical_bits for m in messages),
        "rounds": _rounds(messages),
    }
    if isinstance(transcript, Transcript):
        cached = transcript.totals
        if (cached.qubits_sent, cached.classical_bits, cached.rounds) != (
            result["qubits_sent"],
            result["classical_bits"],
            result["rounds"],
        ):
            raise TranscriptError("cached totals disagree with the message list")
    return result


def account_by_session(transcript: Transcript) -> dict[str, dict]:
    return {sid: account(transcript.session(sid)) for sid in transcript.sessions()}


# ---------------------------------------------------------------------------
# Blind-computing baseline


@dataclass(frozen=True)
class CostModel:
    """Declared constants for a communication model.

    ``blind_brickwork``: each single-qubit gate occupies ``slots_1q`` brickwork
    columns and each CNOT ``slots_2q`` on both wires, packed greedily per wire;
    permutation gates are charged ``slots_2q`` on every wire they touch. Per
    column the client sends one qubit per wire, one angle of ``angle_bits``
    out and one outcome bit back, and the column is one round.
    """

    variant: str = "blind_brickwork"
    slots_1q: int = 4
    slots_2q: int = 8
    angle_bits: int = 1

    def __post_init__(self) -> None:
        if self.variant not in ("qhe", "blind_brickwork"):
            raise ValidationError(f"unknown cost model {self.variant!r}")
        if min(self.slots_1q, self.slots_2q, self.angle_bits) < 1:
            raise ValidationError("cost model constants must be positive")

    def describe(self) -> dict:
        return asdict(self)


def brickwork_depth(circuit: Sequence[Gate], n: int, model: CostModel = CostModel()) -> int:
    clock = [0] * n
    for g in circuit:
        if g.kind == "CNOT" or g.kind == "PERM":
            start = max(clock[q] for q in g.qubits)
            for q in g.qubits:
                clock[q] = start + model.slots_2q
        else:
            clock[g.qubits[0]] += model.slots_1q
    return max(clock, default=0)


def blind_baseline_cost(circuit: Sequence[Gate], n: int, model: CostModel = CostModel()) -> dict:
    """Modeled cost of evaluating ``circuit`` once with a brickwork blind protocol."""
    gates = tuple(getattr(circuit, "gates", circuit))
    depth = brickwork_depth(gates, n, model)
    return {
        "qubits_sent": n * depth,
        "classical_bits": (model.angle_bits + 1) * n * depth,
        "rounds": depth,
        "depth": depth,
    }


def qhe_evaluation_cost(n: int, ct_bits: int, copies: int = 1, response_ct_bits: Optional[int] = None) -> dict:
    """Cost of one evaluate-and-measure round under the QHE protocol."""
    response_ct_bits = ct_bits if response_ct_bits is None else response_ct_bits
    return {
        "qubits_sent": copies * n,
        "classical_bits": copies * ct_bits + copies * (FLOAT_BITS + response_ct_bits),
        "rounds": 1,
    }


__all__ = [
    "CLIENT_TO_SERVER",
    "SERVER_TO_CLIENT",
    "FLOAT_BITS",
    "Message",
    "Transcript",
    "CommTotals",
    "account",
    "account_by_session",
    "CostModel",
    "brickwork_depth",
    "blind_baseline_cost",
    "qhe_evaluation_cost",
]
