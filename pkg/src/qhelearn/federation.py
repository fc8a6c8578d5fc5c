"""Multi-client training of one server-held model over encrypted delegation.

Each round picks one client from a pre-drawn schedule. That client samples a
mini-batch of its private data, obtains the batch gradient through its own
vault, optionally sanitizes it, and uploads the updated parameters in the
clear. Parameters are public; samples and pads never leave their owner.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import ServerViewLog
from .errors import DomainError, ProtocolError, ValidationError
from .learner import (
    PARAMETER_SHIFT,
    LabeledSample,
    VariationalModel,
    _combine,
    _guard,
    accuracy,
    delegated_evaluate,
    gradient_shifts,
    mse_cost,
)
from .protocol import Transcript, account
from .session import Client, Server, upload_params


@dataclass
class DPConfig:
    clip: float
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if not self.clip > 0:
            raise ValidationError("clip norm must be positive")
        if not self.sigma >= 0:
            raise ValidationError("noise multiplier must be nonnegative")


@dataclass
class FedConfig:
    M: int
    T: int
    batch: int
    lr: float = 0.1
    dp: Optional[DPConfig] = None
    seed: int = 0
    gradient: str = PARAMETER_SHIFT
    eps: float = 1e-5
    shots: int = 0

    def __post_init__(self) -> None:
        if self.M < 1 or self.T < 1:
            raise ValidationError("need M >= 1 and T >= 1")
        if self.batch < 1:
            raise ValidationError("batch size must be >= 1")
        if not self.lr >= 0:
            raise ValidationError("learning rate must be nonnegative")


@dataclass
class ClientNode:
    """One data owner: private samples, own vault, own randomness.

    ``weights`` optionally weights the batch average per sample (indexed like
    ``dataset``); the default is the plain mean.
    """

    id: int
    dataset: list
    client: Client
    batch_rng: np.random.Generator
    weights: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if not self.dataset:
            raise DomainError(f"client {self.id} has no data")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (len(self.dataset),) or np.any(w < 0) or w.sum() == 0:
                raise ValidationError("weights must be nonnegative, one per sample, not all zero")
            self.weights = w

    @property
    def vault_id(self) -> str:
        return self.client.vault_id


@dataclass
class RoundRecord:
    round: int
    client: int
    batch_cost: float
    holdout_cost: float
    holdout_accuracy: float
    grad_norm: float
    classical_bits: int
    qubits_sent: int
    rounds: int


@dataclass
class FedResult:
    model: VariationalModel
    schedule: np.ndarray
    history: list = field(default_factory=list)
    transcript: Optional[Transcript] = None
    thetas: list = field(default_factory=list, repr=False)


def generate_schedule(T: int, M: int, rng: np.random.Generator) -> np.ndarray:
    """Length-T string of client indices, i.i.d. uniform over range(M)."""
    if M < 1:
        raise DomainError("need at least one client")
    if T < 1:
        raise DomainError("need at least one round")
    return rng.integers(0, M, size=T)


def dp_sanitize(g: Sequence[float], C: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian mechanism: clip to norm C, then add N(0, sigma^2 C^2) per coordinate."""
    if not C > 0:
        raise DomainError("clip norm must be positive")
    if not sigma >= 0:
        raise DomainError("noise multiplier must be nonnegative")
    g = np.asarray(g, dtype=float)
    norm = np.linalg.norm(g)
    clipped = g * min(1.0, C / norm) if norm > 0 else g.copy()
    if sigma == 0:
        return clipped
    return clipped + rng.normal(0.0, sigma * C, size=g.shape)


def make_clients(
    datasets: Sequence[Sequence[LabeledSample]], seed: int, transcript: Optional[Transcript] = None
) -> tuple[list, np.random.SeedSequence]:
    """Build one node per dataset with independent vault and batch streams.

    Returns the nodes and the leftover seed sequence for the server side.
    """
    transcript = transcript if transcript is not None else Transcript()
    root = np.random.SeedSequence(seed)
    server_seq, *client_seqs = root.spawn(len(datasets) + 1)
    nodes = []
    for i, (data, seq) in enumerate(zip(datasets, client_seqs)):
        vault_seq, batch_seq = seq.spawn(2)
        client = Client(np.random.default_rng(vault_seq), transcript, name=f"client{i}")
        nodes.append(ClientNode(i, list(data), client, np.random.default_rng(batch_seq)))
    return nodes, server_seq


@dataclass
class FedState:
    """Mutable training state shared across rounds."""

    server: Server
    nodes: list
    schedule: np.ndarray
    config: FedConfig
    dp_rng: np.random.Generator
    theta: np.ndarray


def batch_gradient(node: ClientNode, server: Server, batch: Sequence[int], config: FedConfig, round_index: int):
    """Batch-average cost and gradient, every expectation obtained through ``node``'s vault."""
    shifts = gradient_shifts(server.theta.shape[0], config.gradient, config.eps)
    weights = np.ones(len(batch)) if node.weights is None else node.weights[list(batch)]
    weights = weights / weights.sum()
    cost, grad = 0.0, np.zeros(server.theta.shape[0])
    for w, idx in zip(weights, batch):
        sample = node.dataset[idx]
        values = delegated_evaluate(node.client, server, sample, shifts, config.shots, round_index)
        c, g = _combine(values, sample.y, config.gradient, config.eps)
        cost += w * c
        grad += w * g
    return cost, grad


def federated_round(state: FedState, i: int, holdout: Optional[Sequence[LabeledSample]] = None, model=None) -> RoundRecord:
    """Run round ``i``: the scheduled client computes, sanitizes and uploads an update."""
    cfg = state.config
    if not 0 <= i < len(state.schedule):
        raise DomainError(f"round {i} outside schedule of length {len(state.schedule)}")
    node = state.nodes[int(state.schedule[i])]
    if cfg.batch > len(node.dataset):
        raise DomainError(f"batch {cfg.batch} exceeds client {node.id}'s {len(node.dataset)} samples")
    before = account(node.client.transcript)
    batch = node.batch_rng.choice(len(node.dataset), size=cfg.batch, replace=False)
    cost, grad = batch_gradient(node, state.server, batch, cfg, i)
    if cfg.dp is not None:
        grad = dp_sanitize(grad, cfg.dp.clip, cfg.dp.sigma, state.dp_rng)
    state.theta = state.theta - cfg.lr * grad
    upload_params(node.client, state.server, state.theta, i)
    after = account(node.client.transcript)
    h_cost, h_acc = float("nan"), float("nan")
    if holdout:
        trained = model.with_theta(state.theta)
        h_cost, h_acc = mse_cost(trained, holdout), accuracy(trained, holdout)
    return RoundRecord(
        i,
        node.id,
        float(cost),
        float(h_cost),
        float(h_acc),
        float(np.linalg.norm(grad)),
        after["classical_bits"] - before["classical_bits"],
        after["qubits_sent"] - before["qubits_sent"],
        after["rounds"] - before["rounds"],
    )


def run_federated(
    datasets: Sequence[Sequence[LabeledSample]],
    model: VariationalModel,
    config: FedConfig,
    holdout: Optional[Sequence[LabeledSample]] = None,
    schedule: Optional[Sequence[int]] = None,
    log: Optional[ServerViewLog] = None,
) -> FedResult:
    """Train ``model`` for ``config.T`` rounds; returns the model h(theta_T) and history.

    ``schedule`` overrides the random client order (must have length T).
    Holdout metrics are plaintext monitoring values computed outside the
    protocol; they never influence the update.
    """
    if len(datasets) != config.M:
        raise ValidationError(f"config.M={config.M} but {len(datasets)} datasets given")
    for d in datasets:
        if config.batch > len(d):
            raise ValidationError(f"batch {config.batch} exceeds a client dataset of size {len(d)}")
    transcript = Transcript()
    nodes, server_seq = make_clients(datasets, config.seed, transcript)
    sched_seq, dp_seq, eval_seq = server_seq.spawn(3)
    if schedule is None:
        schedule = generate_schedule(config.T, config.M, np.random.default_rng(sched_seq))
    else:
        schedule = np.asarray(schedule, dtype=np.int64)
        if schedule.shape != (config.T,) or np.any(schedule < 0) or np.any(schedule >= config.M):
            raise ValidationError("schedule must hold T client indices in [0, M)")
    server = Server(model.template(), model.theta, model.k, model.num_qubits, np.random.default_rng(eval_seq), log)
    theta = np.array(model.theta, dtype=float)
    # The server starts from the public initial parameters posted by client 0.
    upload_params(nodes[0].client, server, theta, 0)
    state = FedState(server, nodes, schedule, config, np.random.default_rng(dp_seq), theta)
    result = FedResult(model, schedule, transcript=transcript)
    for i in range(config.T):
        rec = federated_round(state, i, holdout, model)
        result.history.append(rec)
        result.thetas.append(state.theta.copy())
        monitored = [h.holdout_cost if holdout else h.batch_cost for h in result.history]
        _guard(monitored)
    check_vault_isolation(transcript, nodes)
    result.model = model.with_theta(state.theta)
    return result


def check_vault_isolation(transcript: Transcript, nodes: Sequence[ClientNode]) -> None:
    """Every message names a known vault, and a session never mixes vaults."""
    known = {n.vault_id for n in nodes}
    if len(known) != len(nodes):
        raise ProtocolError("two clients share a vault")
    seen: dict[str, str] = {}
    for m in transcript.messages:
        if m.vault not in known:
            raise ProtocolError(f"message in session {m.session} under unknown vault {m.vault!r}")
        if seen.setdefault(m.session, m.vault) != m.vault:
            raise ProtocolError(f"session {m.session} mixes vaults")


__all__ = [
    "DPConfig",
    "FedConfig",
    "ClientNode",
    "RoundRecord",
    "FedResult",
    "generate_schedule",
    "dp_sanitize",
    "make_clients",
    "batch_gradient",
    "federated_round",
    "run_federated",
    "check_vault_isolation",
]
