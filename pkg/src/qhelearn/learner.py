"""Variational classifier trained and queried through encrypted delegation.

Every expectation value used by the delegated paths comes from a one-round
protocol exchange (:func:`qhelearn.session.run_evaluation`); the plaintext
functions here are the local oracles they are checked against.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .engine import ServerCircuit
from .errors import DomainError, TrainingDiverged, ValidationError
from .protocol import account
from .session import UNSHIFTED, Client, Server, Shift, run_evaluation, upload_params
from .simulator import CNOT, Gate, StateVector, basis_state, expectation, run

PARAMETER_SHIFT = "parameter-shift"
FINITE_DIFFERENCE = "finite-difference"


@dataclass
class VariationalModel:
    """Layered ansatz: rotations on every qubit, then a CNOT ring.

    With the default rotations each layer applies RY then RZ per qubit, giving
    ``2 * num_qubits * layers`` parameters. Parameter ``(layer, qubit, r)`` sits
    at index ``(layer * num_qubits + qubit) * len(rotations) + r``.
    """

    num_qubits: int
    layers: int
    theta: np.ndarray = None
    k: int = 0
    rotations: tuple = ("RY", "RZ")
    entangle: bool = True

    def __post_init__(self) -> None:
        if self.num_qubits < 1 or self.layers < 0:
            raise DomainError("need num_qubits >= 1 and layers >= 0")
        if not 0 <= self.k < self.num_qubits:
            raise DomainError(f"observable qubit {self.k} out of range")
        self.rotations = tuple(r.upper() for r in self.rotations)
        if not set(self.rotations) <= {"RY", "RZ"}:
            raise ValidationError(f"unsupported rotations {self.rotations}")
        if self.theta is None:
            self.theta = np.zeros(self.num_params)
        self.theta = np.array(self.theta, dtype=float).reshape(-1)
        if self.theta.shape[0] != self.num_params:
            raise DomainError(f"expected {self.num_params} parameters, got {self.theta.shape[0]}")
        if not np.all(np.isfinite(self.theta)):
            raise DomainError("parameters must be finite")

    @property
    def num_params(self) -> int:
        return len(self.rotations) * self.num_qubits * self.layers

    @classmethod
    def random(cls, num_qubits: int, layers: int, rng: np.random.Generator, **kwargs) -> "VariationalModel":
        count = len(kwargs.get("rotations", ("RY", "RZ"))) * num_qubits * layers
        return cls(num_qubits, layers, rng.uniform(-np.pi, np.pi, size=count), **kwargs)

    def _ring(self) -> list[Gate]:
        n = self.num_qubits
        if not self.entangle or n == 1:
            return []
        if n == 2:
            return [CNOT(0, 1)]
        return [CNOT(q, (q + 1) % n) for q in range(n)]

    def template(self) -> ServerCircuit:
        gates = []
        slot = 0
        for _ in range(self.layers):
            for q in range(self.num_qubits):
                for rot in self.rotations:
                    gates.append(Gate(rot, (q,), slot=slot))
                    slot += 1
            gates.extend(self._ring())
        return ServerCircuit(tuple(gates), self.num_params)

    def gates(self, theta: Optional[Sequence[float]] = None) -> tuple:
        params = self.theta if theta is None else np.asarray(theta, dtype=float)
        return self.template().bind(params).gates

    def with_theta(self, theta: Sequence[float]) -> "VariationalModel":
        return VariationalModel(self.num_qubits, self.layers, np.array(theta, dtype=float), self.k, self.rotations, self.entangle)


@dataclass(frozen=True)
class LabeledSample:
    input: Union[StateVector, str]
    y: int
    index: int = 0

    def __post_init__(self) -> None:
        if self.y not in (1, -1):
            raise DomainError(f"label must be +1 or -1, got {self.y}")

    def state(self) -> StateVector:
        if isinstance(self.input, StateVector):
            return self.input
        return basis_state(len(self.input), self.input)


@dataclass
class TrainConfig:
    lr: float = 0.1
    max_iter: int = 100
    gradient: str = PARAMETER_SHIFT
    eps: float = 1e-5
    shots: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.lr >= 0:
            raise ValidationError("learning rate must be nonnegative")
        if self.gradient not in (PARAMETER_SHIFT, FINITE_DIFFERENCE):
            raise ValidationError(f"unknown gradient mode {self.gradient!r}")
        if self.gradient == FINITE_DIFFERENCE and not self.eps > 0:
            raise ValidationError("finite-difference step must be positive")
        if self.max_iter < 0 or self.shots < 0:
            raise ValidationError("max_iter and shots must be nonnegative")


# ---------------------------------------------------------------------------
# Plaintext model evaluation


def _check_dims(model: VariationalModel, state: StateVector) -> None:
    if state.num_qubits != model.num_qubits:
        raise DomainError(f"sample has {state.num_qubits} qubits, model expects {model.num_qubits}")


def expectation_at(model: VariationalModel, state: StateVector, theta: Sequence[float]) -> float:
    _check_dims(model, state)
    return expectation(run(state, model.gates(theta)), model.k)


def predict(model: VariationalModel, sample: Union[LabeledSample, StateVector]) -> float:
    state = sample.state() if isinstance(sample, LabeledSample) else sample
    return expectation_at(model, state, model.theta)


def class_of(value: float) -> int:
    """Class 1 for a nonnegative expectation, class 2 otherwise."""
    return 1 if value >= 0 else 2


def classify(model: VariationalModel, sample: Union[LabeledSample, StateVector]) -> int:
    return class_of(predict(model, sample))


def _require_data(dataset: Sequence[LabeledSample]) -> None:
    if len(dataset) == 0:
        raise DomainError("dataset is empty")


def mse_from_expectations(values: Sequence[float], labels: Sequence[int]) -> float:
    values = np.asarray(values, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if values.shape[0] == 0:
        raise DomainError("dataset is empty")
    return float(np.mean((values - labels) ** 2))


def mse_cost(model: VariationalModel, dataset: Sequence[LabeledSample]) -> float:
    _require_data(dataset)
    return mse_from_expectations([predict(model, s) for s in dataset], [s.y for s in dataset])


def _check_index(model: VariationalModel, j: int) -> None:
    if not 0 <= j < model.num_params:
        raise DomainError(f"parameter index {j} out of range [0, {model.num_params})")


def _shifted(theta: np.ndarray, j: int, delta: float) -> np.ndarray:
    out = theta.copy()
    out[j] += delta
    return out


def parameter_shift_gradient(model: VariationalModel, dataset: Sequence[LabeledSample], j: int) -> float:
    """dC/dtheta_j with dE/dtheta_j = [E(theta_j + pi/2) - E(theta_j - pi/2)] / 2."""
    _require_data(dataset)
    _check_index(model, j)
    total = 0.0
    for s in dataset:
        st = s.state()
        e = expectation_at(model, st, model.theta)
        plus = expectation_at(model, st, _shifted(model.theta, j, math.pi / 2))
        minus = expectation_at(model, st, _shifted(model.theta, j, -math.pi / 2))
        total += (e - s.y) * (plus - minus) / 2
    return 2.0 * total / len(dataset)


def finite_difference_gradient(
    model: VariationalModel, dataset: Sequence[LabeledSample], j: int, eps: float = 1e-5
) -> float:
    """Central difference of the full cost."""
    _require_data(dataset)
    _check_index(model, j)
    up = mse_cost(model.with_theta(_shifted(model.theta, j, eps)), dataset)
    down = mse_cost(model.with_theta(_shifted(model.theta, j, -eps)), dataset)
    return (up - down) / (2 * eps)


def gradient_shifts(num_params: int, mode: str = PARAMETER_SHIFT, eps: float = 1e-5) -> list[Shift]:
    """Unshifted evaluation first, then (+, -) per parameter."""
    step = math.pi / 2 if mode == PARAMETER_SHIFT else eps
    shifts = [UNSHIFTED]
    for j in range(num_params):
        shifts += [(j, step), (j, -step)]
    return shifts


def _combine(values: Sequence[float], y: int, mode: str, eps: float) -> tuple[float, np.ndarray]:
    """Per-sample squared error and its gradient from the shifted evaluations."""
    e0 = values[0]
    plus = np.asarray(values[1::2])
    minus = np.asarray(values[2::2])
    denom = 2.0 if mode == PARAMETER_SHIFT else 2.0 * eps
    return (e0 - y) ** 2, 2.0 * (e0 - y) * (plus - minus) / denom


def plaintext_cost_and_gradient(
    model: VariationalModel, dataset: Sequence[LabeledSample], mode: str = PARAMETER_SHIFT, eps: float = 1e-5
) -> tuple[float, np.ndarray]:
    _require_data(dataset)
    cost, grad = 0.0, np.zeros(model.num_params)
    for s in dataset:
        st = s.state()
        values = [
            expectation_at(model, st, model.theta if j is None else _shifted(model.theta, j, d))
            for j, d in gradient_shifts(model.num_params, mode, eps)
        ]
        c, g = _combine(values, s.y, mode, eps)
        cost += c
        grad += g
    return cost / len(dataset), grad / len(dataset)


# ---------------------------------------------------------------------------
# Delegated paths


def make_parties(
    model: VariationalModel, seed: int, transcript=None, log=None
) -> tuple[Client, Server]:
    """A client and a server holding ``model``, with independent RNG streams."""
    client_seq, server_seq = np.random.SeedSequence(seed).spawn(2)
    client = Client(np.random.default_rng(client_seq), transcript)
    server = Server(model.template(), model.theta, model.k, model.num_qubits, np.random.default_rng(server_seq), log)
    return client, server


def delegated_evaluate(
    client: Client,
    server: Server,
    sample: Union[LabeledSample, StateVector, str],
    shifts: Sequence[Shift] = (UNSHIFTED,),
    shots: int = 0,
    round_index: int = 0,
) -> list[float]:
    """Decrypted <Z_k> for each requested parameter shift, in one protocol round."""
    if isinstance(sample, LabeledSample):
        sample = sample.input
    n = sample.num_qubits if isinstance(sample, StateVector) else len(sample)
    if n != server.num_qubits:
        raise DomainError(f"sample has {n} qubits, server model expects {server.num_qubits}")
    return run_evaluation(client, server, sample, shifts, shots, round_index)


def delegated_gradient(
    client: Client,
    server: Server,
    dataset: Sequence[LabeledSample],
    mode: str = PARAMETER_SHIFT,
    eps: float = 1e-5,
    shots: int = 0,
    round_index: int = 0,
) -> tuple[float, np.ndarray]:
    """Batch cost and gradient, one protocol round per sample."""
    _require_data(dataset)
    shifts = gradient_shifts(server.theta.shape[0], mode, eps)
    cost, grad = 0.0, np.zeros(server.theta.shape[0])
    for s in dataset:
        values = delegated_evaluate(client, server, s, shifts, shots, round_index)
        c, g = _combine(values, s.y, mode, eps)
        cost += c
        grad += g
    return cost / len(dataset), grad / len(dataset)


def delegated_inference(client: Client, server: Server, sample: Union[LabeledSample, StateVector, str]) -> int:
    (value,) = delegated_evaluate(client, server, sample)
    return class_of(value)


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    grad_norm: float
    classical_bits: int
    qubits_sent: int
    rounds: int


@dataclass
class TrainResult:
    theta: np.ndarray
    history: list = field(default_factory=list)

    @property
    def costs(self) -> np.ndarray:
        return np.array([h.cost for h in self.history])


def _guard(costs: list, patience: int = 20, factor: float = 10.0) -> None:
    if len(costs) <= patience:
        return
    limit = factor * costs[0]
    if all(c > limit for c in costs[-patience:]):
        raise TrainingDiverged(f"cost above {factor}x its initial value for {patience} iterations")


def train_delegated(
    dataset: Sequence[LabeledSample],
    config: TrainConfig,
    model: VariationalModel,
    client: Optional[Client] = None,
    server: Optional[Server] = None,
) -> TrainResult:
    """Full-batch gradient descent with every expectation obtained by delegation."""
    _require_data(dataset)
    if client is None or server is None:
        client, server = make_parties(model, config.seed)
    theta = np.array(model.theta, dtype=float)
    upload_params(client, server, theta, 0)
    history = []
    for it in range(config.max_iter):
        before = account(client.transcript)
        cost, grad = delegated_gradient(client, server, dataset, config.gradient, config.eps, config.shots, it)
        theta = theta - config.lr * grad
        upload_params(client, server, theta, it)
        after = account(client.transcript)
        history.append(
            IterationRecord(
                it,
                cost,
                float(np.linalg.norm(grad)),
                after["classical_bits"] - before["classical_bits"],
                after["qubits_sent"] - before["qubits_sent"],
                after["rounds"] - before["rounds"],
            )
        )
        _guard([h.cost for h in history])
    return TrainResult(theta, history)


def train_plaintext(dataset: Sequence[LabeledSample], config: TrainConfig, model: VariationalModel) -> TrainResult:
    """Local oracle for :func:`train_delegated` (exact expectations only)."""
    theta = np.array(model.theta, dtype=float)
    history = []
    for it in range(config.max_iter):
        cost, grad = plaintext_cost_and_gradient(model.with_theta(theta), dataset, config.gradient, config.eps)
        theta = theta - config.lr * grad
        history.append(IterationRecord(it, cost, float(np.linalg.norm(grad)), 0, 0, 0))
        _guard([h.cost for h in history])
    return TrainResult(theta, history)


def write_history_csv(history: Sequence, path: Union[str, Path]) -> None:
    rows = [asdict(h) for h in history]
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def toy_dataset(count: int, rng: np.random.Generator, jitter: float = 0.0, start_index: int = 0) -> list[LabeledSample]:
    """One-qubit task: states near |0> are labeled +1, near |1> labeled -1.

    Labels alternate so every prefix is balanced; ``jitter`` is the maximum
    RY angle offset applied to each sample.
    """
    samples = []
    for i in range(count):
        y = 1 if i % 2 == 0 else -1
        angle = (0.0 if y == 1 else math.pi) + rng.uniform(-jitter, jitter)
        state = run(basis_state(1, 0), [Gate("RY", (0,), theta=angle)])
        samples.append(LabeledSample(state, y, start_index + i))
    return samples


def accuracy(model: VariationalModel, dataset: Sequence[LabeledSample]) -> float:
    _require_data(dataset)
    hits = sum((classify(model, s) == 1) == (s.y == 1) for s in dataset)
    return hits / len(dataset)
