"""Validated experiment configs and the runner behind the command line.

Every run writes ``metrics.csv``, ``transcript.jsonl`` and ``summary.json``
into its output directory. Outputs depend only on the config (including the
seed), so repeating a run reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from importlib import metadata
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pydantic
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import dlp_kernel as dk
from .engine import AuditSecrets, ServerViewLog, audit_mixedness, audit_server_view
from .errors import ValidationError
from .federation import DPConfig, FedConfig, run_federated
from .learner import (
    LabeledSample,
    TrainConfig,
    VariationalModel,
    accuracy,
    class_of,
    classify,
    delegated_evaluate,
    make_parties,
    mse_cost,
    predict,
    toy_dataset,
    train_delegated,
)
from .protocol import CostModel, Transcript, account, account_by_session, blind_baseline_cost
from .session import upload_params
from .simulator import int_to_bits, random_state, zero_state

KINDS = ("demo-inference", "train-delegated", "train-federated", "dlp-kernel", "audit-privacy", "compare-comm")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSettings(_Strict):
    num_qubits: int = Field(1, ge=1, le=8)
    layers: int = Field(1, ge=0, le=10)
    k: int = Field(0, ge=0)
    rotations: tuple[Literal["RY", "RZ"], ...] = ("RY", "RZ")
    init: Optional[list[float]] = None

    @model_validator(mode="after")
    def _k_in_range(self):
        if self.k >= self.num_qubits:
            raise ValueError(f"k={self.k} must be < num_qubits={self.num_qubits}")
        return self


class TrainSettings(_Strict):
    lr: float = Field(0.2, ge=0)
    max_iter: int = Field(100, ge=0)
    gradient: Literal["parameter-shift", "finite-difference"] = "parameter-shift"
    eps: float = Field(1e-5, gt=0)
    samples: int = Field(8, ge=1)
    jitter: float = Field(0.3, ge=0)


class FederatedSettings(_Strict):
    M: int = Field(3, ge=1)
    T: int = Field(300, ge=1)
    batch: int = Field(2, ge=1)
    lr: float = Field(0.2, ge=0)
    per_client: int = Field(4, ge=1)
    holdout: int = Field(20, ge=1)
    dp_clip: Optional[float] = Field(None, gt=0)
    dp_sigma: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _batch_fits(self):
        if self.batch > self.per_client:
            raise ValueError(f"batch={self.batch} exceeds per_client={self.per_client}")
        if self.dp_sigma > 0 and self.dp_clip is None:
            raise ValueError("dp_sigma needs dp_clip")
        return self


class DlpSettings(_Strict):
    p: int = Field(127, ge=3, le=dk.MAX_PRIME)
    k: int = Field(5, ge=1)
    n_train: int = Field(60, ge=1)
    n_test: int = Field(40, ge=0)
    lam: float = Field(1e-3, ge=0)
    eps: float = Field(0.1, gt=0)
    concept: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _group_ok(self):
        if not dk.is_prime(self.p):
            raise ValueError(f"p={self.p} is not prime")
        if (1 << self.k) > self.p - 1 or self.k > self.p.bit_length():
            raise ValueError(f"k={self.k} too large for p={self.p}")
        if self.concept is not None and self.concept > self.p - 1:
            raise ValueError("concept index must be <= p-1")
        return self


class AuditSettings(_Strict):
    num_qubits: int = Field(2, ge=1, le=3)
    states: int = Field(5, ge=1)
    session_samples: int = Field(4, ge=1)


class CommSettings(_Strict):
    slots_1q: int = Field(4, ge=1)
    slots_2q: int = Field(8, ge=1)
    angle_bits: int = Field(1, ge=1)


class ExperimentConfig(_Strict):
    kind: Literal[KINDS]
    seed: int = Field(0, ge=0, lt=2**64)
    shots: int = Field(0, ge=0)
    out: Optional[str] = None
    model: ModelSettings = ModelSettings()
    train: TrainSettings = TrainSettings()
    federated: FederatedSettings = FederatedSettings()
    dlp: DlpSettings = DlpSettings()
    audit: AuditSettings = AuditSettings()
    comm: CommSettings = CommSettings()

    def canonical_json(self) -> str:
        data = self.model_dump(mode="json", exclude={"out"})
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _error_paths(err: pydantic.ValidationError) -> str:
    parts = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{path}: {e['msg']}")
    return "; ".join(parts)


def load_config(data: dict) -> ExperimentConfig:
    """Validate a config mapping; errors name the offending field path."""
    try:
        return ExperimentConfig.model_validate(data)
    except pydantic.ValidationError as err:
        raise ValidationError(_error_paths(err)) from None


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "pydantic"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _model(cfg: ExperimentConfig, rng: np.random.Generator) -> VariationalModel:
    m = cfg.model
    if m.init is not None:
        return VariationalModel(m.num_qubits, m.layers, m.init, m.k, m.rotations)
    return VariationalModel.random(m.num_qubits, m.layers, rng, k=m.k, rotations=m.rotations)


def make_dataset(n: int, k: int, count: int, rng: np.random.Generator, jitter: float, start: int = 0) -> list:
    """One qubit: jittered |0>/|1> states. More qubits: random classical bitstrings
    labeled +1 when qubit ``k`` is 0."""
    if n == 1:
        return toy_dataset(count, rng, jitter, start)
    labels = rng.integers(0, 1 << n, size=count)
    return [
        LabeledSample(int_to_bits(int(x), n), 1 if not (int(x) >> k) & 1 else -1, start + i)
        for i, x in enumerate(labels)
    ]


# ---------------------------------------------------------------------------
# Experiments. Each returns (metrics rows, transcript, summary metrics).


def _demo_inference(cfg: ExperimentConfig, rng: np.random.Generator):
    model = _model(cfg, rng)
    data = make_dataset(model.num_qubits, model.k, cfg.train.samples, rng, cfg.train.jitter)
    client, server = make_parties(model, cfg.seed)
    upload_params(client, server, model.theta)
    rows = []
    for s in data:
        (value,) = delegated_evaluate(client, server, s, shots=cfg.shots)
        plain = predict(model, s.state())
        rows.append(
            {
                "index": s.index,
                "label": s.y,
                "plaintext_expectation": plain,
                "delegated_expectation": value,
                "plaintext_class": classify(model, s.state()),
                "delegated_class": class_of(value),
            }
        )
    agree = sum(r["plaintext_class"] == r["delegated_class"] for r in rows) / len(rows)
    per_session = account_by_session(client.transcript)
    metrics = {
        "class_agreement": agree,
        "max_abs_diff": max(abs(r["plaintext_expectation"] - r["delegated_expectation"]) for r in rows),
        "max_rounds_per_evaluation": max(v["rounds"] for v in per_session.values()),
    }
    return rows, client.transcript, metrics


def _train_delegated(cfg: ExperimentConfig, rng: np.random.Generator):
    model = _model(cfg, rng)
    data = make_dataset(model.num_qubits, model.k, cfg.train.samples, rng, cfg.train.jitter)
    t = cfg.train
    tc = TrainConfig(t.lr, t.max_iter, t.gradient, t.eps, cfg.shots, cfg.seed)
    client, server = make_parties(model, cfg.seed)
    result = train_delegated(data, tc, model, client, server)
    trained = model.with_theta(result.theta)
    rows = [vars(h) for h in result.history]
    metrics = {
        "final_cost": mse_cost(trained, data),
        "train_accuracy": accuracy(trained, data),
        "theta": result.theta.tolist(),
        "comm": account(client.transcript),
    }
    return rows, client.transcript, metrics


def _train_federated(cfg: ExperimentConfig, rng: np.random.Generator):
    f = cfg.federated
    model = _model(cfg, rng)
    n, k = model.num_qubits, model.k
    pooled = make_dataset(n, k, f.M * f.per_client, rng, cfg.train.jitter)
    datasets = [pooled[i * f.per_client : (i + 1) * f.per_client] for i in range(f.M)]
    holdout = make_dataset(n, k, f.holdout, rng, cfg.train.jitter, start=len(pooled))
    dp = DPConfig(f.dp_clip, f.dp_sigma) if f.dp_clip is not None else None
    fc = FedConfig(f.M, f.T, f.batch, f.lr, dp, cfg.seed, cfg.train.gradient, cfg.train.eps, cfg.shots)
    result = run_federated(datasets, model, fc, holdout)
    rows = [vars(h) for h in result.history]
    hit = next((h.round for h in result.history if h.holdout_accuracy >= 0.9), None)
    metrics = {
        "final_holdout_cost": result.history[-1].holdout_cost,
        "final_holdout_accuracy": result.history[-1].holdout_accuracy,
        "first_round_accuracy_0.9": hit,
        "client_counts": np.bincount(result.schedule, minlength=f.M).tolist(),
        "theta": result.model.theta.tolist(),
        "comm": account(result.transcript),
    }
    return rows, result.transcript, metrics


def run_dlp(cfg: ExperimentConfig, rng: np.random.Generator) -> dict:
    """Plaintext and delegated kernel pipelines on the same draw; returns all pieces."""
    d = cfg.dlp
    group = dk.DlpGroup(d.p)
    fc = dk.FeatureConfig(d.k)
    fc.check(group)
    i = d.concept if d.concept is not None else int(rng.integers(1, group.p))
    concept = dk.Concept(group, i)
    xs = dk.sample_points(group, d.n_train + d.n_test, rng)
    labels = np.array([dk.concept_label(concept, int(x)) for x in xs])
    K_plain = dk.kernel_matrix(group, fc, xs)
    pipe = dk.delegated_kernel_pipeline(xs, group, fc, seed=cfg.seed, shots=cfg.shots, eps=d.eps)
    tr, te = slice(0, d.n_train), slice(d.n_train, None)
    out = {"group": group, "concept": concept, "xs": xs, "labels": labels, "K_plain": K_plain, "pipe": pipe}
    for name, K in (("plain", K_plain), ("delegated", pipe.K)):
        alpha = dk.train_kernel_classifier(K[tr, tr], labels[tr], d.lam)
        out[f"pred_{name}"] = dk.predict_from_kernel(alpha, K[te, tr])
    return out


def _dlp_kernel(cfg: ExperimentConfig, rng: np.random.Generator):
    r = run_dlp(cfg, rng)
    d = cfg.dlp
    test_x = r["xs"][d.n_train :]
    test_y = r["labels"][d.n_train :]
    rows = [
        {"x": int(x), "label": int(y), "plaintext_pred": int(a), "delegated_pred": int(b)}
        for x, y, a, b in zip(test_x, test_y, r["pred_plain"], r["pred_delegated"])
    ]
    pipe = r["pipe"]
    metrics = {
        "p": d.p,
        "generator": r["group"].a,
        "concept_i": r["concept"].i,
        "max_kernel_diff": float(np.max(np.abs(pipe.K - r["K_plain"]))),
        "min_eigenvalue": float(np.linalg.eigvalsh(pipe.K).min()),
        "plaintext_test_accuracy": float(np.mean(r["pred_plain"] == test_y)) if d.n_test else None,
        "delegated_test_accuracy": float(np.mean(r["pred_delegated"] == test_y)) if d.n_test else None,
        "prediction_agreement": float(np.mean(r["pred_plain"] == r["pred_delegated"])) if d.n_test else None,
        "classical_bits": pipe.classical_bits,
        "bound_bits_N2d_over_eps2": pipe.bound_bits,
        "bits_to_bound_ratio": pipe.ratio,
        "rounds": pipe.rounds,
    }
    return rows, pipe.transcript, metrics


def _audit_privacy(cfg: ExperimentConfig, rng: np.random.Generator):
    a = cfg.audit
    n = a.num_qubits
    states = [zero_state(n)] + [random_state(n, rng) for _ in range(a.states - 1)]
    rows = []
    for idx, psi in enumerate(states):
        rows.append(
            {
                "state": idx,
                "deviation": audit_mixedness(psi),
                "z_only_deviation": audit_mixedness(psi, use_x=False),
                "x_only_deviation": audit_mixedness(psi, use_z=False),
            }
        )
    # End-to-end session scanned against the client's secrets.
    model = VariationalModel.random(n, 1, rng)
    log = ServerViewLog()
    client, server = make_parties(model, cfg.seed, log=log)
    upload_params(client, server, model.theta)
    samples = [random_state(n, rng) for _ in range(a.session_samples)]
    for s in samples:
        delegated_evaluate(client, server, s, shots=cfg.shots)
    report = audit_server_view(log, AuditSecrets(list(client.issued_pads), [], samples))
    metrics = {
        "max_deviation": max(r["deviation"] for r in rows),
        "min_z_only_deviation": min(r["z_only_deviation"] for r in rows),
        "server_view_audit_passed": report.passed,
        "server_view_findings": report.findings,
        "scanned_values": report.scanned_values,
    }
    return rows, client.transcript, metrics


def _compare_comm(cfg: ExperimentConfig, rng: np.random.Generator):
    m = cfg.model
    cm = CostModel("blind_brickwork", cfg.comm.slots_1q, cfg.comm.slots_2q, cfg.comm.angle_bits)
    rows = []
    transcript = Transcript()
    for layers in range(0, m.layers + 1):
        model = VariationalModel.random(m.num_qubits, layers, rng, k=m.k, rotations=m.rotations)
        client, server = make_parties(model, cfg.seed, transcript=transcript)
        before = account(transcript)
        (value,) = delegated_evaluate(client, server, zero_state(m.num_qubits))
        after = account(transcript)
        blind = blind_baseline_cost(model.gates(), m.num_qubits, cm)
        qhe_rounds = after["rounds"] - before["rounds"]
        rows.append(
            {
                "layers": layers,
                "gates": len(model.gates()),
                "depth": blind["depth"],
                "qhe_qubits": after["qubits_sent"] - before["qubits_sent"],
                "qhe_classical_bits": after["classical_bits"] - before["classical_bits"],
                "qhe_rounds": qhe_rounds,
                "blind_qubits": blind["qubits_sent"],
                "blind_classical_bits": blind["classical_bits"],
                "blind_rounds": blind["rounds"],
                "round_ratio": blind["rounds"] / qhe_rounds,
            }
        )
    metrics = {
        "blind_model": cm.describe(),
        "qhe_model": {"rounds_per_evaluation": 1, "payload": "n qubits + key ciphertext; response float + ciphertext"},
        "blind_rounds_ge_depth": all(r["blind_rounds"] >= r["depth"] for r in rows),
        "max_round_ratio": max(r["round_ratio"] for r in rows),
    }
    return rows, transcript, metrics


_RUNNERS = {
    "demo-inference": _demo_inference,
    "train-delegated": _train_delegated,
    "train-federated": _train_federated,
    "dlp-kernel": _dlp_kernel,
    "audit-privacy": _audit_privacy,
    "compare-comm": _compare_comm,
}


def run_experiment(cfg: ExperimentConfig, out: Optional[Path] = None) -> dict:
    """Run one experiment and write its artifact bundle. Returns the summary."""
    out = Path(out if out is not None else (cfg.out or f"runs/{cfg.kind}"))
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    rows, transcript, metrics = _RUNNERS[cfg.kind](cfg, rng)
    _write_csv(out / "metrics.csv", rows)
    (out / "transcript.jsonl").write_text(transcript.to_jsonl())
    summary = {
        "kind": cfg.kind,
        "config": json.loads(cfg.canonical_json()),
        "config_hash": cfg.config_hash(),
        "versions": _versions(),
        "metrics": _jsonable(metrics),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


__all__ = ["KINDS", "ExperimentConfig", "load_config", "make_dataset", "run_experiment", "run_dlp"]
